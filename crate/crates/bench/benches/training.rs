use criterion::{black_box, criterion_group, criterion_main, Criterion};

use covprop::moments::BoundConfig;
use covprop::train::sample_loss;
use covprop_bench::toy;

fn training(c: &mut Criterion) {
    let (net, x) = toy();
    let cfg = BoundConfig::new(0.2, 0.25).unwrap();
    c.bench_function("sample_loss/toy", |b| b.iter(|| sample_loss(&net, black_box(&x), 0, &cfg, 0.5, 2.0, 1.0).unwrap()));
}

criterion_group!(benches, training);
criterion_main!(benches);

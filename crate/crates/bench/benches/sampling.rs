use criterion::{black_box, criterion_group, criterion_main, Criterion};

use covprop::mc::{mc_layer_moments, sample_counts};
use covprop_bench::toy;

fn sampling(c: &mut Criterion) {
    let (net, x) = toy();
    let mut g = c.benchmark_group("mc");
    g.sample_size(10);
    g.bench_function("counts_4096", |b| b.iter(|| sample_counts(&net, black_box(&x), 0.25, 4096, 0, 2).unwrap()));
    g.bench_function("layer_moments_1000", |b| b.iter(|| mc_layer_moments(&net, black_box(&x), 0.25, 1000, 0).unwrap()));
    g.finish();
}

criterion_group!(benches, sampling);
criterion_main!(benches);

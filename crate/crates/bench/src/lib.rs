//! Fixtures shared by the benchmarks.

use covprop::data::toy_test;
use covprop::network::{build_lenet_small, build_residual_with, load_file, ResidualConfig};
use covprop::{FeatureMap, NetworkSpec, Shape3};

/// The bundled toy checkpoint and one of its test images.
pub fn toy() -> (NetworkSpec, FeatureMap) {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/assets/toy_base.cvpr");
    let net = load_file(path).expect("bundled checkpoint");
    (net, toy_test().image(0).expect("toy image"))
}

/// Untrained LeNet at MNIST size.
pub fn lenet28() -> (NetworkSpec, FeatureMap) {
    let shape = Shape3::new(28, 28, 1);
    let net = build_lenet_small(shape, 10, 0).expect("lenet");
    (net, ramp(shape))
}

/// Residual net with `blocks` blocks on 8×8×3 input.
pub fn residual(blocks: usize) -> (NetworkSpec, FeatureMap) {
    let shape = Shape3::new(8, 8, 3);
    let net = build_residual_with(shape, 10, &ResidualConfig { width: 8, blocks }, 0).expect("residual");
    (net, ramp(shape))
}

fn ramp(shape: Shape3) -> FeatureMap {
    let n = shape.len();
    FeatureMap::from_vec(shape, (0..n).map(|i| (i as f64 / n as f64) - 0.5).collect()).expect("ramp")
}

use super::{
    chain_shapes, AvgPool, Conv, LayerSpec, Linear, NetworkSpec, Normalize, Residual, Shape3,
};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, NormalStream};

/// Incremental network construction with He-normal initialisation
/// (`N(0, 2/fan_in)`, zero bias). Shape errors surface at `build`.
pub struct NetworkBuilder {
    shape: Shape3,
    input_shape: Shape3,
    layers: Vec<LayerSpec>,
    rng: NormalStream,
    error: Option<Error>,
}

impl NetworkBuilder {
    pub fn new(input_shape: Shape3, seed: u64) -> Self {
        NetworkBuilder {
            shape: input_shape,
            input_shape,
            layers: Vec::new(),
            rng: NormalStream::new(seed),
            error: None,
        }
    }

    /// Current output shape of the layers added so far.
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    fn push(mut self, layer: LayerSpec) -> Self {
        if self.error.is_some() {
            return self;
        }
        match layer.output_shape(self.shape) {
            Ok(s) => {
                self.shape = s;
                self.layers.push(layer);
            }
            Err(e) => self.error = Some(e),
        }
        self
    }

    fn he(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let std = (2.0 / fan_in as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| std * self.rng.next_normal())
    }

    pub fn conv(mut self, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let n_in = self.shape.channels;
        let fan_in = kernel * kernel * n_in;
        let weights = self.he(fan_in, out_channels, fan_in.max(1));
        self.push(LayerSpec::Conv(Conv {
            in_channels: n_in,
            out_channels,
            kernel,
            stride,
            padding,
            weights,
            bias: vec![0.0; out_channels],
        }))
    }

    pub fn linear(mut self, out_dim: usize) -> Self {
        let in_dim = self.shape.len();
        let weights = self.he(in_dim, out_dim, in_dim.max(1));
        self.push(LayerSpec::Linear(Linear {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }))
    }

    pub fn relu(self) -> Self {
        self.push(LayerSpec::Relu)
    }

    pub fn avg_pool(self, kernel: usize) -> Self {
        self.push(LayerSpec::AvgPool(AvgPool { kernel }))
    }

    pub fn flatten(self) -> Self {
        self.push(LayerSpec::Flatten)
    }

    pub fn normalize(self, mu_prime: Vec<f64>, sigma_prime: Vec<f64>, enabled: bool) -> Self {
        self.push(LayerSpec::Normalize(Normalize {
            mu_prime,
            sigma_prime,
            enabled,
        }))
    }

    /// Adds `x + branch(x)`; the closure receives a builder positioned at the
    /// current shape and shares this builder's random stream.
    pub fn residual(mut self, f: impl FnOnce(NetworkBuilder) -> NetworkBuilder) -> Self {
        if self.error.is_some() {
            return self;
        }
        let sub = NetworkBuilder {
            shape: self.shape,
            input_shape: self.shape,
            layers: Vec::new(),
            rng: self.rng.clone(),
            error: None,
        };
        let sub = f(sub);
        self.rng = sub.rng;
        if let Some(e) = sub.error {
            self.error = Some(e);
            return self;
        }
        self.push(LayerSpec::ResidualAdd(Residual { branch: sub.layers }))
    }

    /// Finishes the network; the class count is the width of the last layer.
    pub fn build(self) -> Result<NetworkSpec> {
        if let Some(e) = self.error {
            return Err(e);
        }
        debug_assert_eq!(chain_shapes(&self.layers, self.input_shape)?, self.shape);
        NetworkSpec::new(self.input_shape, self.layers, self.shape.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LenetConfig {
    /// Output channels of the three conv stages.
    pub widths: [usize; 3],
    pub hidden: usize,
}

impl Default for LenetConfig {
    fn default() -> Self {
        LenetConfig {
            widths: [6, 16, 32],
            hidden: 64,
        }
    }
}

/// Three conv → ReLU → avg-pool(2) stages, then Linear → ReLU → Linear.
///
/// The first conv is 5×5 with the smallest padding reduction (2, 1, then 0)
/// that leaves the spatial size divisible by 8, so 8×8 stays 8×8 and 28×28
/// becomes 24×24. Later convs are 3×3 with padding 1.
pub fn build_lenet_with(in_shape: Shape3, class_count: usize, cfg: &LenetConfig, seed: u64) -> Result<NetworkSpec> {
    let pad = [2usize, 1, 0]
        .into_iter()
        .find(|&p| {
            let ok = |n: usize| n + 2 * p > 4 && (n + 2 * p - 4) % 8 == 0;
            ok(in_shape.height) && ok(in_shape.width)
        })
        .ok_or_else(|| Error::Shape {
            expected: "spatial size reducible to a multiple of 8 by a 5x5 conv".into(),
            actual: in_shape.to_string(),
        })?;
    let [a, b, c] = cfg.widths;
    NetworkBuilder::new(in_shape, seed)
        .conv(a, 5, 1, pad)
        .relu()
        .avg_pool(2)
        .conv(b, 3, 1, 1)
        .relu()
        .avg_pool(2)
        .conv(c, 3, 1, 1)
        .relu()
        .avg_pool(2)
        .flatten()
        .linear(cfg.hidden)
        .relu()
        .linear(class_count)
        .build()
}

pub fn build_lenet_small(in_shape: Shape3, class_count: usize, seed: u64) -> Result<NetworkSpec> {
    build_lenet_with(in_shape, class_count, &LenetConfig::default(), seed)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig { width: 8, blocks: 2 }
    }
}

/// Stem conv → ReLU → avg-pool(2), then `blocks` × [x + conv(ReLU(conv(x))), ReLU],
/// then Flatten and a single Linear head.
pub fn build_residual_with(in_shape: Shape3, class_count: usize, cfg: &ResidualConfig, seed: u64) -> Result<NetworkSpec> {
    let w = cfg.width;
    let mut b = NetworkBuilder::new(in_shape, seed)
        .conv(w, 3, 1, 1)
        .relu()
        .avg_pool(2);
    for _ in 0..cfg.blocks {
        b = b
            .residual(|r| r.conv(w, 3, 1, 1).relu().conv(w, 3, 1, 1))
            .relu();
    }
    b.flatten().linear(class_count).build()
}

pub fn build_residual_small(in_shape: Shape3, class_count: usize, blocks: usize, seed: u64) -> Result<NetworkSpec> {
    build_residual_with(
        in_shape,
        class_count,
        &ResidualConfig {
            blocks,
            ..ResidualConfig::default()
        },
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, FeatureMap};

    #[test]
    fn lenet_mnist_head() {
        let net = build_lenet_small(Shape3::new(28, 28, 1), 10, 0).unwrap();
        match net.layers.last().unwrap() {
            LayerSpec::Linear(l) => assert_eq!(l.out_dim, 10),
            _ => panic!("last layer not linear"),
        }
        let LayerSpec::Conv(c) = &net.layers[0] else { panic!() };
        assert_eq!((c.kernel, c.padding), (5, 0));
    }

    #[test]
    fn lenet_is_deterministic() {
        let a = build_lenet_small(Shape3::new(8, 8, 1), 4, 9).unwrap();
        let b = build_lenet_small(Shape3::new(8, 8, 1), 4, 9).unwrap();
        let bits = |n: &NetworkSpec| n.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = build_lenet_small(Shape3::new(8, 8, 1), 4, 10).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn lenet_finite_logits() {
        let net = build_lenet_small(Shape3::new(8, 8, 3), 4, 1).unwrap();
        let x = FeatureMap::from_vec(net.input_shape, (0..192).map(|i| (i as f64 * 0.1).cos()).collect()).unwrap();
        let y = forward(&net, &x).unwrap();
        assert_eq!(y.len(), 4);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lenet_rejects_small_input() {
        assert!(build_lenet_small(Shape3::new(3, 3, 1), 2, 0).is_err());
    }

    #[test]
    fn residual_single_head() {
        let net = build_residual_small(Shape3::new(8, 8, 1), 4, 2, 0).unwrap();
        assert_eq!(net.linear_count(), 1);
        assert!(matches!(net.layers.last(), Some(LayerSpec::Linear(_))));
    }

    #[test]
    fn zero_branch_is_identity_plus_head() {
        let mut net = build_residual_small(Shape3::new(4, 4, 1), 3, 2, 4).unwrap();
        for l in net.layers.iter_mut() {
            if let LayerSpec::ResidualAdd(r) = l {
                for bl in r.branch.iter_mut() {
                    if let LayerSpec::Conv(c) = bl {
                        c.weights.scale_in_place(0.0);
                    }
                }
            }
        }
        // Without branches: stem conv, relu, pool, (relu is idempotent), flatten, head.
        let trimmed = NetworkSpec::new(
            net.input_shape,
            net.layers
                .iter()
                .filter(|l| !matches!(l, LayerSpec::ResidualAdd(_)))
                .cloned()
                .collect(),
            3,
        )
        .unwrap();
        let x = FeatureMap::from_vec(net.input_shape, (0..16).map(|i| i as f64 / 8.0 - 1.0).collect()).unwrap();
        assert_eq!(forward(&net, &x).unwrap(), forward(&trimmed, &x).unwrap());
    }

    #[test]
    fn builder_reports_shape_error() {
        let r = NetworkBuilder::new(Shape3::new(3, 3, 1), 0).avg_pool(2).flatten().linear(2).build();
        assert!(r.is_err());
    }
}

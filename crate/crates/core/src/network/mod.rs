//! The base classifier: an ordered layer graph with weights.
//!
//! Feature maps are stored pixel-major: a `FeatureMap` of `height × width`
//! pixels with `channels` values each is a `(height·width) × channels`
//! matrix. Convolution kernels are stored reshaped as `(k²·N_in) × N_out`
//! with row index `(ky·k + kx)·N_in + c_in`, so the rows belonging to one
//! kernel position form a contiguous `N_in × N_out` block.

mod build;
mod forward;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};

pub use build::{build_lenet_small, build_lenet_with, build_residual_small, build_residual_with, LenetConfig, NetworkBuilder, ResidualConfig};
pub use forward::{argmax, avg_pool_map, conv_map, conv_output_size, forward, forward_recorded, im2col, predict};
pub use io::{load, load_file, save, save_file, FORMAT_VERSION, MAGIC};

/// Spatial shape of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape3 {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape3 {
            height,
            width,
            channels,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Pixel grid: one row of `channels` values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Matrix,
}

impl FeatureMap {
    pub fn zeros(shape: Shape3) -> Self {
        FeatureMap {
            height: shape.height,
            width: shape.width,
            pixels: Matrix::zeros(shape.pixels(), shape.channels),
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        Ok(FeatureMap {
            height: shape.height,
            width: shape.width,
            pixels: Matrix::from_vec(shape.pixels(), shape.channels, data)?,
        })
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.height, self.width, self.pixels.cols())
    }

    pub fn channels(&self) -> usize {
        self.pixels.cols()
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.pixels.row(y * self.width + x)
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    /// Same buffer viewed as a single pixel.
    pub fn flattened(&self) -> FeatureMap {
        let n = self.pixels.rows() * self.pixels.cols();
        FeatureMap {
            height: 1,
            width: 1,
            pixels: Matrix::from_vec(1, n, self.pixels.data().to_vec()).expect("same length"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(kernel²·in_channels) × out_channels`
    pub weights: Matrix,
    pub bias: Vector,
}

impl Conv {
    /// Rows of the reshaped kernel belonging to kernel position `p`.
    pub fn position_block(&self, p: usize) -> Matrix {
        self.weights
            .row_block(p * self.in_channels, (p + 1) * self.in_channels)
    }

    pub fn positions(&self) -> usize {
        self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim × out_dim`; `h = Wᵀx + b`.
    pub weights: Matrix,
    pub bias: Vector,
}

/// Non-overlapping average pooling (stride equals kernel).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AvgPool {
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub branch: Vec<LayerSpec>,
}

/// `h = (x - mu') / sigma'` per channel. A length-1 vector broadcasts.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalize {
    pub mu_prime: Vector,
    pub sigma_prime: Vector,
    pub enabled: bool,
}

impl Normalize {
    pub fn shift(&self, c: usize) -> f64 {
        if self.mu_prime.len() == 1 {
            self.mu_prime[0]
        } else {
            self.mu_prime[c]
        }
    }

    pub fn scale(&self, c: usize) -> f64 {
        if self.sigma_prime.len() == 1 {
            self.sigma_prime[0]
        } else {
            self.sigma_prime[c]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv(Conv),
    Linear(Linear),
    AvgPool(AvgPool),
    Relu,
    ResidualAdd(Residual),
    Flatten,
    Normalize(Normalize),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Linear(_) => "linear",
            LayerSpec::AvgPool(_) => "avg_pool",
            LayerSpec::Relu => "relu",
            LayerSpec::ResidualAdd(_) => "residual",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Normalize(_) => "normalize",
        }
    }

    /// Number of trainable scalars, including nested branches.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.weights.data().len() + c.bias.len(),
            LayerSpec::Linear(l) => l.weights.data().len() + l.bias.len(),
            LayerSpec::ResidualAdd(r) => r.branch.iter().map(LayerSpec::param_count).sum(),
            _ => 0,
        }
    }

    /// Output shape for a given input shape, checking weight consistency.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        let bad = |msg: String| Err(Error::InvalidNetwork(msg));
        match self {
            LayerSpec::Conv(c) => {
                if c.in_channels != input.channels {
                    return Err(Error::Shape {
                        expected: format!("{} input channels", c.in_channels),
                        actual: input.to_string(),
                    });
                }
                if c.weights.shape() != (c.positions() * c.in_channels, c.out_channels)
                    || c.bias.len() != c.out_channels
                {
                    return bad(format!(
                        "conv weights {:?} / bias {} inconsistent with {}x{} kernel {}->{}",
                        c.weights.shape(),
                        c.bias.len(),
                        c.kernel,
                        c.kernel,
                        c.in_channels,
                        c.out_channels
                    ));
                }
                if c.stride != 1 && c.stride != 2 {
                    return bad(format!("conv stride {} not in {{1, 2}}", c.stride));
                }
                if c.kernel == 0 {
                    return bad("conv kernel must be positive".into());
                }
                let h = conv_output_size(input.height, c.kernel, c.stride, c.padding)?;
                let w = conv_output_size(input.width, c.kernel, c.stride, c.padding)?;
                Ok(Shape3::new(h, w, c.out_channels))
            }
            LayerSpec::Linear(l) => {
                if input.pixels() != 1 || input.channels != l.in_dim {
                    return Err(Error::Shape {
                        expected: format!("1x1x{} (flattened)", l.in_dim),
                        actual: input.to_string(),
                    });
                }
                if l.weights.shape() != (l.in_dim, l.out_dim) || l.bias.len() != l.out_dim {
                    return bad(format!(
                        "linear weights {:?} / bias {} inconsistent with {} -> {}",
                        l.weights.shape(),
                        l.bias.len(),
                        l.in_dim,
                        l.out_dim
                    ));
                }
                Ok(Shape3::new(1, 1, l.out_dim))
            }
            LayerSpec::AvgPool(p) => {
                if p.kernel == 0 || input.height % p.kernel != 0 || input.width % p.kernel != 0 {
                    return Err(Error::Shape {
                        expected: format!("spatial dims divisible by pool kernel {}", p.kernel),
                        actual: input.to_string(),
                    });
                }
                Ok(Shape3::new(
                    input.height / p.kernel,
                    input.width / p.kernel,
                    input.channels,
                ))
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::Flatten => Ok(Shape3::new(1, 1, input.len())),
            LayerSpec::ResidualAdd(r) => {
                let out = chain_shapes(&r.branch, input)?;
                if out != input {
                    return Err(Error::Shape {
                        expected: format!("residual branch output {input}"),
                        actual: out.to_string(),
                    });
                }
                if r.branch.iter().any(|l| matches!(l, LayerSpec::Linear(_) | LayerSpec::Flatten)) {
                    return bad("residual branches may not contain linear or flatten layers".into());
                }
                Ok(input)
            }
            LayerSpec::Normalize(n) => {
                for v in [&n.mu_prime, &n.sigma_prime] {
                    if v.len() != 1 && v.len() != input.channels {
                        return bad(format!(
                            "normalize parameters of length {} for {} channels",
                            v.len(),
                            input.channels
                        ));
                    }
                }
                if n.enabled && n.sigma_prime.iter().any(|&s| !(s > 0.0)) {
                    return bad("normalize sigma' entries must be positive".into());
                }
                Ok(input)
            }
        }
    }
}

/// Runs `output_shape` through a layer list.
pub fn chain_shapes(layers: &[LayerSpec], input: Shape3) -> Result<Shape3> {
    layers.iter().try_fold(input, |s, l| l.output_shape(s))
}

/// A full classifier `u_θ` (logits; softmax is applied by the losses).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl NetworkSpec {
    pub fn new(input_shape: Shape3, layers: Vec<LayerSpec>, class_count: usize) -> Result<Self> {
        let net = NetworkSpec {
            input_shape,
            layers,
            class_count,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks shape chaining, weight shapes, the final-layer contract and
    /// that every weight is finite.
    pub fn validate(&self) -> Result<()> {
        let out = chain_shapes(&self.layers, self.input_shape)?;
        match self.layers.last() {
            Some(LayerSpec::Linear(l)) if l.out_dim == self.class_count => {}
            _ => {
                return Err(Error::InvalidNetwork(format!(
                    "final layer must be Linear with {} outputs",
                    self.class_count
                )))
            }
        }
        if self.class_count < 2 {
            return Err(Error::InvalidNetwork("need at least two classes".into()));
        }
        debug_assert_eq!(out, Shape3::new(1, 1, self.class_count));
        if !self.params().iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidNetwork("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// All trainable scalars, pre-order, weights (row-major) before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        collect_params(&self.layers, &mut out);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                op: "set_params",
                left: (self.param_count(), 1),
                right: (params.len(), 1),
            });
        }
        let mut cursor = 0;
        write_params(&mut self.layers, params, &mut cursor);
        Ok(())
    }

    /// Number of Linear layers anywhere in the graph.
    pub fn linear_count(&self) -> usize {
        fn count(layers: &[LayerSpec]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    LayerSpec::Linear(_) => 1,
                    LayerSpec::ResidualAdd(r) => count(&r.branch),
                    _ => 0,
                })
                .sum()
        }
        count(&self.layers)
    }

    /// Total number of layers, counting branch layers individually.
    pub fn layer_count(&self) -> usize {
        fn count(layers: &[LayerSpec]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    LayerSpec::ResidualAdd(r) => 1 + count(&r.branch),
                    _ => 1,
                })
                .sum()
        }
        count(&self.layers)
    }

    /// Every layer in execution order: branch layers come before the
    /// residual merge that owns them.
    pub fn flat_layers(&self) -> Vec<&LayerSpec> {
        fn walk<'a>(layers: &'a [LayerSpec], out: &mut Vec<&'a LayerSpec>) {
            for l in layers {
                if let LayerSpec::ResidualAdd(r) = l {
                    walk(&r.branch, out);
                }
                out.push(l);
            }
        }
        let mut out = Vec::with_capacity(self.layer_count());
        walk(&self.layers, &mut out);
        out
    }

    /// Copy with every Normalize layer switched on or off.
    pub fn with_normalization(&self, enabled: bool) -> NetworkSpec {
        fn walk(layers: &mut [LayerSpec], enabled: bool) {
            for l in layers {
                match l {
                    LayerSpec::Normalize(n) => n.enabled = enabled,
                    LayerSpec::ResidualAdd(r) => walk(&mut r.branch, enabled),
                    _ => {}
                }
            }
        }
        let mut net = self.clone();
        walk(&mut net.layers, enabled);
        net
    }
}

fn collect_params(layers: &[LayerSpec], out: &mut Vec<f64>) {
    for l in layers {
        match l {
            LayerSpec::Conv(c) => {
                out.extend_from_slice(c.weights.data());
                out.extend_from_slice(&c.bias);
            }
            LayerSpec::Linear(lin) => {
                out.extend_from_slice(lin.weights.data());
                out.extend_from_slice(&lin.bias);
            }
            LayerSpec::ResidualAdd(r) => collect_params(&r.branch, out),
            _ => {}
        }
    }
}

fn write_params(layers: &mut [LayerSpec], src: &[f64], cursor: &mut usize) {
    fn take(dst: &mut [f64], src: &[f64], cursor: &mut usize) {
        dst.copy_from_slice(&src[*cursor..*cursor + dst.len()]);
        *cursor += dst.len();
    }
    for l in layers.iter_mut() {
        match l {
            LayerSpec::Conv(c) => {
                take(c.weights.data_mut(), src, cursor);
                take(&mut c.bias, src, cursor);
            }
            LayerSpec::Linear(lin) => {
                take(lin.weights.data_mut(), src, cursor);
                take(&mut lin.bias, src, cursor);
            }
            LayerSpec::ResidualAdd(r) => write_params(&mut r.branch, src, cursor),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        let mut net = build_lenet_small(Shape3::new(8, 8, 1), 4, 3).unwrap();
        let p = net.params();
        assert_eq!(p.len(), net.param_count());
        let doubled: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        net.set_params(&doubled).unwrap();
        assert_eq!(net.params(), doubled);
        assert!(net.set_params(&p[1..]).is_err());
    }

    #[test]
    fn final_layer_contract() {
        let mut net = build_lenet_small(Shape3::new(8, 8, 1), 4, 3).unwrap();
        net.class_count = 5;
        assert!(net.validate().is_err());
        net.class_count = 4;
        net.layers.pop();
        assert!(net.validate().is_err());
    }

    #[test]
    fn pool_needs_divisible_input() {
        let pool = LayerSpec::AvgPool(AvgPool { kernel: 2 });
        assert!(pool.output_shape(Shape3::new(3, 4, 1)).is_err());
        assert_eq!(pool.output_shape(Shape3::new(4, 4, 2)).unwrap(), Shape3::new(2, 2, 2));
    }

    #[test]
    fn normalize_requires_positive_scale() {
        let n = LayerSpec::Normalize(Normalize {
            mu_prime: vec![0.0],
            sigma_prime: vec![0.0],
            enabled: true,
        });
        assert!(n.output_shape(Shape3::new(2, 2, 3)).is_err());
        let off = LayerSpec::Normalize(Normalize {
            mu_prime: vec![0.0],
            sigma_prime: vec![0.0],
            enabled: false,
        });
        assert!(off.output_shape(Shape3::new(2, 2, 3)).is_ok());
    }
}

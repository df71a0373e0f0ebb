//! Closed-form propagation of the perturbation moments.
//!
//! Each layer's output perturbation is summarised by per-pixel means and a
//! single channel covariance `Σ` shared by all pixels. Pixels of one layer are
//! correlated with each other in reality; instead of tracking those
//! cross-correlations, a convolution treats the `k²` inputs of its window as
//! independent with covariance inflated by `1 + r_max`, which dominates any
//! joint covariance whose cross-pixel correlation coefficients are bounded by
//! `r_max`.
//!
//! Why not track them exactly? Take a 1-D conv net with kernel 3 and trace
//! one output back `q` layers. Without overlap the output depends on `3^q`
//! nodes, each needing its own `Σ`, plus a cross-correlation `E` for every
//! pair. With overlap (stride 1) it is `2q + 1` nodes and `O(q²)` pairs, which
//! is still worse than the convolution itself. See [`crate::cost`] for the
//! counts. Here every layer costs one `N × N` matrix regardless of depth.
//!
//! Padding pixels are constants, so they add nothing to the covariance. The
//! shared `Σ` is the one of an interior pixel whose window is fully inside the
//! image, which upper-bounds border pixels.
//!
//! The `(1 + r_max)` inflation is applied at convolutions only. Average
//! pooling divides by `k²` as if the window were independent, and residual
//! merges add the two covariances; neither is inflated.

use std::io::Write;

use crate::error::{Error, Result};
use crate::network::{
    avg_pool_map, conv_map, AvgPool, Conv, FeatureMap, LayerSpec, Linear, NetworkSpec, Normalize,
    Shape3,
};
use crate::numkit::{min_eigenvalue_sym, std_normal_cdf, std_normal_pdf, Matrix};

/// Perturbation moments after one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    /// Per-pixel means.
    pub means: FeatureMap,
    /// Channel covariance shared by every pixel.
    pub cov: Matrix,
    /// Position in the flat layer order; 0 is the input.
    pub layer_index: usize,
}

impl MomentState {
    pub fn shape(&self) -> Shape3 {
        self.means.shape()
    }

    /// Symmetry to 1e-9 (relative) and smallest eigenvalue ≥ −1e-8 (relative).
    pub fn check_invariants(&self) -> Result<()> {
        let scale = self.cov.max_abs().max(1.0);
        let asym = self.cov.max_asymmetry();
        if asym > 1e-9 * scale {
            return Err(Error::NotSymmetric { max_asymmetry: asym });
        }
        let min = min_eigenvalue_sym(&self.cov)?;
        if min < -1e-8 * scale {
            return Err(Error::Numerical(format!(
                "covariance at layer {} has eigenvalue {min:e}",
                self.layer_index
            )));
        }
        if !self.means.data().iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite mean at layer {}", self.layer_index)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConfig {
    /// Assumed bound on cross-pixel correlation coefficients, in `[0, 1)`.
    pub r_max: f64,
    /// Input noise standard deviation.
    pub sigma_in: f64,
}

impl BoundConfig {
    pub fn new(r_max: f64, sigma_in: f64) -> Result<Self> {
        let cfg = BoundConfig { r_max, sigma_in };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.r_max) {
            return Err(Error::Domain(format!("r_max must lie in [0, 1), got {}", self.r_max)));
        }
        if !(self.sigma_in >= 0.0 && self.sigma_in.is_finite()) {
            return Err(Error::Domain(format!("sigma must be finite and >= 0, got {}", self.sigma_in)));
        }
        Ok(())
    }

    /// The convolution inflation factor `1 + r_max`.
    pub fn inflation(&self) -> f64 {
        hanebeck_tau(self.r_max).map(|t| t.0).unwrap_or(1.0 + self.r_max)
    }
}

/// Whether `(η, κ)` satisfies `0.5 ≤ η ≤ 1/(1+r)` and
/// `κ² ≤ (1 − 2η)/(1 − r²) + η²`.
pub fn hanebeck_admissible(eta: f64, kappa: f64, r_max: f64) -> bool {
    let upper = 1.0 / (1.0 + r_max);
    let tol = 1e-12;
    eta >= 0.5 - tol
        && eta <= upper + tol
        && kappa * kappa <= (1.0 - 2.0 * eta) / (1.0 - r_max * r_max) + eta * eta + tol
}

/// Scale factors `(τ₁, τ₂)` of the independent dominating covariance, using
/// `η = 1/(1+r_max)` and `κ = 0`, which gives `τ₁ = τ₂ = 1 + r_max`.
pub fn hanebeck_tau(r_max: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&r_max) {
        return Err(Error::Domain(format!("r_max must lie in [0, 1), got {r_max}")));
    }
    let eta = 1.0 / (1.0 + r_max);
    let kappa = 0.0;
    if !hanebeck_admissible(eta, kappa, r_max) {
        return Err(Error::Numerical(format!("eta {eta} inadmissible for r_max {r_max}")));
    }
    let tau1 = 1.0 / (eta - kappa);
    let tau2 = 1.0 / (eta + kappa);
    Ok((tau1, tau2))
}

pub fn init_input(image: &FeatureMap, cfg: &BoundConfig) -> Result<MomentState> {
    cfg.validate()?;
    let n = image.channels();
    let mut cov = Matrix::identity(n);
    cov.scale_in_place(cfg.sigma_in * cfg.sigma_in);
    Ok(MomentState {
        means: image.clone(),
        cov,
        layer_index: 0,
    })
}

/// `Σ_m W_mᵀ Σ W_m` restricted to the output columns `cols`, where `W_m` are
/// consecutive `N × ·` row blocks of `w`.
///
/// The full covariance and the two-class shortcut both go through here so
/// that every entry is produced by the same sequence of floating-point
/// operations. Only the upper triangle (in `cols` order) is computed and then
/// mirrored, so the result is exactly symmetric.
pub fn block_quadratic(cov: &Matrix, w: &Matrix, cols: &[usize]) -> Result<Matrix> {
    let n = cov.rows();
    if !cov.is_square() || n == 0 || w.rows() % n != 0 {
        return Err(Error::DimensionMismatch {
            op: "block quadratic form",
            left: cov.shape(),
            right: w.shape(),
        });
    }
    let k = cols.len();
    let mut out = Matrix::zeros(k, k);
    let mut t = vec![0.0; n * k];
    for m in 0..w.rows() / n {
        let base = m * n;
        // T = Σ · W_m[:, cols]
        for i in 0..n {
            let ci = cov.row(i);
            for (b, &cb) in cols.iter().enumerate() {
                let mut s = 0.0;
                for j in 0..n {
                    s += ci[j] * w[(base + j, cb)];
                }
                t[i * k + b] = s;
            }
        }
        for i in 0..n {
            let wi = w.row(base + i);
            for a in 0..k {
                let wa = wi[cols[a]];
                if wa == 0.0 {
                    continue;
                }
                for b in a..k {
                    out[(a, b)] += wa * t[i * k + b];
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    Ok(out)
}

/// `Σ_p W_pᵀ Σ W_p` over kernel positions, before inflation.
pub fn conv_cov(cov: &Matrix, conv: &Conv) -> Result<Matrix> {
    if cov.rows() != conv.in_channels {
        return Err(Error::Shape {
            expected: format!("{0}x{0} covariance", conv.in_channels),
            actual: format!("{}x{}", cov.rows(), cov.cols()),
        });
    }
    let cols: Vec<usize> = (0..conv.out_channels).collect();
    block_quadratic(cov, &conv.weights, &cols)
}

pub fn propagate_conv(state: &MomentState, conv: &Conv, cfg: &BoundConfig) -> Result<MomentState> {
    let means = conv_map(&state.means, conv)?;
    let mut cov = conv_cov(&state.cov, conv)?;
    cov.scale_in_place(cfg.inflation());
    Ok(MomentState {
        means,
        cov,
        layer_index: state.layer_index + 1,
    })
}

pub(crate) fn linear_mean(x: &[f64], lin: &Linear) -> Vec<f64> {
    let mut h = lin.bias.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &w) in h.iter_mut().zip(lin.weights.row(i)) {
            *o += xi * w;
        }
    }
    h
}

/// First dense layer on a (flattened) pixel grid: the pixels are taken as
/// independent copies of `Σ`, so `Σ_h = Σ_m W_mᵀ Σ W_m` with no inflation.
pub fn propagate_linear_first(state: &MomentState, lin: &Linear) -> Result<MomentState> {
    let shape = state.shape();
    if shape.len() != lin.in_dim {
        return Err(Error::Shape {
            expected: format!("{} flattened inputs", lin.in_dim),
            actual: shape.to_string(),
        });
    }
    let means = FeatureMap::from_vec(Shape3::new(1, 1, lin.out_dim), linear_mean(state.means.data(), lin))?;
    let cols: Vec<usize> = (0..lin.out_dim).collect();
    let cov = block_quadratic(&state.cov, &lin.weights, &cols)?;
    Ok(MomentState {
        means,
        cov,
        layer_index: state.layer_index + 1,
    })
}

/// Later dense layers on a single pixel: `Wᵀμ + b`, `WᵀΣW`.
pub fn propagate_linear(state: &MomentState, lin: &Linear) -> Result<MomentState> {
    if state.shape().pixels() != 1 {
        return Err(Error::Shape {
            expected: "single-pixel state (flatten before dense layers)".into(),
            actual: state.shape().to_string(),
        });
    }
    propagate_linear_first(state, lin)
}

pub fn propagate_avgpool(state: &MomentState, pool: AvgPool) -> Result<MomentState> {
    let means = avg_pool_map(&state.means, pool)?;
    let k2 = (pool.kernel * pool.kernel) as f64;
    Ok(MomentState {
        means,
        cov: state.cov.scale(1.0 / k2),
        layer_index: state.layer_index + 1,
    })
}

/// `E[max(0, X)]` for `X ~ N(μ, s²)`, written as `μΦ(μ/s) + sφ(μ/s)`, which
/// equals `½μ − ½μ·erf(−μ/(√2 s)) + s/√(2π)·exp(−μ²/(2s²))`.
pub fn relu_mean(mu: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return mu.max(0.0);
    }
    let z = mu / s;
    mu * std_normal_cdf(z) + s * std_normal_pdf(z)
}

/// Partial derivatives of [`relu_mean`] with respect to `μ` and `s`:
/// `(Φ(μ/s), φ(μ/s))`.
pub fn relu_mean_grad(mu: f64, s: f64) -> (f64, f64) {
    if s <= 0.0 {
        let d = if mu > 0.0 { 1.0 } else { 0.0 };
        return (d, if mu == 0.0 { std_normal_pdf(0.0) } else { 0.0 });
    }
    let z = mu / s;
    (std_normal_cdf(z), std_normal_pdf(z))
}

/// Channel standard deviations `√diag(Σ)`, rejecting negative variances
/// beyond −1e-8.
pub fn channel_std(cov: &Matrix) -> Result<Vec<f64>> {
    (0..cov.rows())
        .map(|c| {
            let v = cov[(c, c)];
            if v < -1e-8 {
                Err(Error::Numerical(format!("negative variance {v:e} in channel {c}")))
            } else {
                Ok(v.max(0.0).sqrt())
            }
        })
        .collect()
}

/// Means through the Gaussian ReLU moment; the covariance is passed on
/// unchanged as an upper bound of the post-activation covariance.
pub fn propagate_relu(state: &MomentState) -> Result<MomentState> {
    let s = channel_std(&state.cov)?;
    let mut means = state.means.clone();
    for r in 0..means.pixels.rows() {
        for (c, m) in means.pixels.row_mut(r).iter_mut().enumerate() {
            *m = relu_mean(*m, s[c]);
        }
    }
    Ok(MomentState {
        means,
        cov: state.cov.clone(),
        layer_index: state.layer_index + 1,
    })
}

/// `x + branch(x)` with the two paths treated as independent.
pub fn propagate_residual(trunk: &MomentState, branch_out: &MomentState) -> Result<MomentState> {
    if trunk.shape() != branch_out.shape() {
        return Err(Error::Shape {
            expected: trunk.shape().to_string(),
            actual: branch_out.shape().to_string(),
        });
    }
    let mut means = trunk.means.clone();
    for (a, b) in means.pixels.data_mut().iter_mut().zip(branch_out.means.data()) {
        *a += b;
    }
    Ok(MomentState {
        means,
        cov: trunk.cov.add(&branch_out.cov)?,
        layer_index: branch_out.layer_index.max(trunk.layer_index) + 1,
    })
}

/// `(μ − μ′)/σ′` and `Σ ./ (σ′σ′ᵀ)`.
pub fn propagate_normalize(state: &MomentState, norm: &Normalize) -> Result<MomentState> {
    if !norm.enabled {
        return Err(Error::UnsupportedLayer {
            op: "moment propagation",
            layer: "disabled normalize",
        });
    }
    LayerSpec::Normalize(norm.clone()).output_shape(state.shape())?;
    let n = state.cov.rows();
    let mut means = state.means.clone();
    for r in 0..means.pixels.rows() {
        for (c, m) in means.pixels.row_mut(r).iter_mut().enumerate() {
            *m = (*m - norm.shift(c)) / norm.scale(c);
        }
    }
    let cov = Matrix::from_fn(n, n, |i, j| state.cov[(i, j)] / (norm.scale(i) * norm.scale(j)));
    Ok(MomentState {
        means,
        cov,
        layer_index: state.layer_index + 1,
    })
}

/// Applies one non-residual layer. `first_linear` selects the block rule for
/// dense layers. Flatten and disabled normalization leave the state as is.
pub fn propagate_layer(
    state: &MomentState,
    layer: &LayerSpec,
    first_linear: bool,
    cfg: &BoundConfig,
) -> Result<MomentState> {
    let mut next = match layer {
        LayerSpec::Conv(c) => propagate_conv(state, c, cfg)?,
        LayerSpec::Linear(l) if first_linear => propagate_linear_first(state, l)?,
        LayerSpec::Linear(l) => propagate_linear(state, l)?,
        LayerSpec::AvgPool(p) => propagate_avgpool(state, *p)?,
        LayerSpec::Relu => propagate_relu(state)?,
        LayerSpec::Normalize(n) if n.enabled => propagate_normalize(state, n)?,
        LayerSpec::Normalize(_) | LayerSpec::Flatten => state.clone(),
        LayerSpec::ResidualAdd(_) => {
            return Err(Error::UnsupportedLayer {
                op: "propagate_layer",
                layer: "residual",
            })
        }
    };
    next.layer_index = state.layer_index + 1;
    Ok(next)
}

struct Walker<'a> {
    cfg: &'a BoundConfig,
    seen_linear: bool,
    trace: Vec<MomentState>,
}

impl Walker<'_> {
    fn run(&mut self, layers: &[LayerSpec], mut state: MomentState) -> Result<MomentState> {
        for layer in layers {
            state = match layer {
                LayerSpec::ResidualAdd(r) => {
                    let branch = self.run(&r.branch, state.clone())?;
                    let mut merged = propagate_residual(&state, &branch)?;
                    merged.layer_index = branch.layer_index + 1;
                    merged
                }
                LayerSpec::Linear(_) => {
                    let first = !self.seen_linear;
                    self.seen_linear = true;
                    propagate_layer(&state, layer, first, self.cfg)?
                }
                _ => propagate_layer(&state, layer, false, self.cfg)?,
            };
            self.trace.push(state.clone());
        }
        Ok(state)
    }
}

/// Runs the whole network. The trace holds the state after every layer in
/// [`NetworkSpec::flat_layers`] order; Flatten entries keep the pixel grid.
pub fn propagate_all(
    net: &NetworkSpec,
    image: &FeatureMap,
    cfg: &BoundConfig,
) -> Result<(MomentState, Vec<MomentState>)> {
    if image.shape() != net.input_shape {
        return Err(Error::Shape {
            expected: net.input_shape.to_string(),
            actual: image.shape().to_string(),
        });
    }
    let mut w = Walker {
        cfg,
        seen_linear: false,
        trace: Vec::with_capacity(net.layer_count()),
    };
    let out = w.run(&net.layers, init_input(image, cfg)?)?;
    Ok((out, w.trace))
}

/// Per-layer summary CSV: layer_index, layer_kind, N, trace, min_eig, max_diag.
pub fn write_trace_csv<W: Write>(net: &NetworkSpec, trace: &[MomentState], out: W) -> Result<()> {
    let kinds = net.flat_layers();
    if kinds.len() != trace.len() {
        return Err(Error::Shape {
            expected: format!("{} trace entries", kinds.len()),
            actual: trace.len().to_string(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer_index", "layer_kind", "N", "trace", "min_eig", "max_diag"])
        .map_err(csv_err)?;
    for (state, layer) in trace.iter().zip(kinds) {
        let max_diag = state.cov.diag().into_iter().fold(f64::NEG_INFINITY, f64::max);
        w.write_record([
            state.layer_index.to_string(),
            layer.kind().to_string(),
            state.cov.rows().to_string(),
            state.cov.trace().to_string(),
            min_eigenvalue_sym(&state.cov)?.to_string(),
            max_diag.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Numerical(format!("csv: {other:?}")),
    }
}

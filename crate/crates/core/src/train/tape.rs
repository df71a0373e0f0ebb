//! Recorded moment propagation and its reverse pass.

use crate::error::{Error, Result};
use crate::moments::{channel_std, init_input, propagate_layer, propagate_residual, relu_mean_grad, BoundConfig, MomentState};
use crate::network::{im2col, Conv, FeatureMap, LayerSpec, NetworkSpec};
use crate::numkit::{matmul, matmul_nt, matmul_tn, Matrix};

/// What the reverse pass needs from one layer.
#[derive(Clone, Debug)]
pub enum TapeNode {
    /// Input state of a plain layer. `first_linear` marks the block rule.
    Layer { input: MomentState, first_linear: bool },
    /// A residual block: the branch's own nodes.
    Residual { branch: Vec<TapeNode> },
}

/// Per-layer inputs recorded by [`forward_taped`], in the net's layer order.
#[derive(Clone, Debug)]
pub struct GradientTape {
    pub nodes: Vec<TapeNode>,
    pub r_max: f64,
    pub output: MomentState,
}

/// Gradient of a scalar loss with respect to a moment state.
#[derive(Clone, Debug)]
pub struct StateGrad {
    pub means: FeatureMap,
    /// Entries treated as independent (need not be symmetric).
    pub cov: Matrix,
}

pub fn forward_taped(net: &NetworkSpec, image: &FeatureMap, cfg: &BoundConfig) -> Result<GradientTape> {
    if image.shape() != net.input_shape {
        return Err(Error::Shape {
            expected: net.input_shape.to_string(),
            actual: image.shape().to_string(),
        });
    }
    fn run(layers: &[LayerSpec], mut state: MomentState, seen: &mut bool, cfg: &BoundConfig, nodes: &mut Vec<TapeNode>) -> Result<MomentState> {
        for layer in layers {
            state = match layer {
                LayerSpec::ResidualAdd(r) => {
                    let mut branch = Vec::with_capacity(r.branch.len());
                    let out = run(&r.branch, state.clone(), seen, cfg, &mut branch)?;
                    nodes.push(TapeNode::Residual { branch });
                    let mut merged = propagate_residual(&state, &out)?;
                    merged.layer_index = out.layer_index + 1;
                    merged
                }
                _ => {
                    let first_linear = matches!(layer, LayerSpec::Linear(_)) && !*seen;
                    *seen |= matches!(layer, LayerSpec::Linear(_));
                    let next = propagate_layer(&state, layer, first_linear, cfg)?;
                    nodes.push(TapeNode::Layer { input: state, first_linear });
                    next
                }
            };
        }
        Ok(state)
    }
    let mut nodes = Vec::with_capacity(net.layers.len());
    let output = run(&net.layers, init_input(image, cfg)?, &mut false, cfg, &mut nodes)?;
    Ok(GradientTape {
        nodes,
        r_max: cfg.r_max,
        output,
    })
}

/// Adds `Σ_m W_m S W_mᵀ`-style terms for `Σ_out = t·Σ_m W_mᵀ Σ W_m`:
/// returns `(∂/∂W, ∂/∂Σ_in)` given `G = ∂/∂Σ_out`.
fn quadratic_backward(cov: &Matrix, w: &Matrix, g: &Matrix, t: f64) -> Result<(Matrix, Matrix)> {
    let n = cov.rows();
    let blocks = w.rows() / n;
    let s = g.add(&g.transpose())?;
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    let mut gcov = Matrix::zeros(n, n);
    for m in 0..blocks {
        let wm = w.row_block(m * n, (m + 1) * n);
        let part = matmul(&matmul(cov, &wm)?, &s)?;
        for i in 0..n {
            for (dst, v) in gw.row_mut(m * n + i).iter_mut().zip(part.row(i)) {
                *dst = t * v;
            }
        }
        gcov.axpy(t, &matmul_nt(&matmul(&wm, g)?, &wm)?)?;
    }
    Ok((gw, gcov))
}

/// Scatters window gradients back onto the input grid (adjoint of `im2col`).
fn col2im(gcols: &Matrix, conv: &Conv, height: usize, width: usize, oh: usize, ow: usize) -> FeatureMap {
    let n = conv.in_channels;
    let k = conv.kernel;
    let mut out = FeatureMap::zeros(crate::network::Shape3::new(height, width, n));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = gcols.row(oy * ow + ox);
            for ky in 0..k {
                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                if iy < 0 || iy >= height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                    if ix < 0 || ix >= width as isize {
                        continue;
                    }
                    let src = &row[(ky * k + kx) * n..(ky * k + kx + 1) * n];
                    let dst = out.pixels.row_mut(iy as usize * width + ix as usize);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

fn put(grads: &mut [f64], offset: usize, w: &Matrix, b: &[f64]) {
    let wl = w.data().len();
    for (d, s) in grads[offset..offset + wl].iter_mut().zip(w.data()) {
        *d += s;
    }
    for (d, s) in grads[offset + wl..offset + wl + b.len()].iter_mut().zip(b) {
        *d += s;
    }
}

fn layer_backward(layer: &LayerSpec, input: &MomentState, first_linear: bool, r_max: f64, g: StateGrad, grads: &mut [f64], offset: usize) -> Result<StateGrad> {
    Ok(match layer {
        LayerSpec::Conv(conv) => {
            let (cols, oh, ow) = im2col(&input.means, conv.kernel, conv.stride, conv.padding)?;
            let gw_mean = matmul_tn(&cols, &g.means.pixels)?;
            let mut gb = vec![0.0; conv.out_channels];
            for r in 0..g.means.pixels.rows() {
                for (d, s) in gb.iter_mut().zip(g.means.pixels.row(r)) {
                    *d += s;
                }
            }
            let gcols = matmul_nt(&g.means.pixels, &conv.weights)?;
            let means = col2im(&gcols, conv, input.means.height, input.means.width, oh, ow);
            let (gw_cov, cov) = quadratic_backward(&input.cov, &conv.weights, &g.cov, 1.0 + r_max)?;
            put(grads, offset, &gw_mean.add(&gw_cov)?, &gb);
            StateGrad { means, cov }
        }
        LayerSpec::Linear(lin) => {
            if !first_linear && input.shape().pixels() != 1 {
                return Err(Error::Shape {
                    expected: "single-pixel state".into(),
                    actual: input.shape().to_string(),
                });
            }
            let x = input.means.data();
            let gh = g.means.data();
            let gw_mean = Matrix::from_fn(lin.in_dim, lin.out_dim, |i, o| x[i] * gh[o]);
            let gx: Vec<f64> = (0..lin.in_dim)
                .map(|i| lin.weights.row(i).iter().zip(gh).map(|(w, h)| w * h).sum())
                .collect();
            let (gw_cov, cov) = quadratic_backward(&input.cov, &lin.weights, &g.cov, 1.0)?;
            put(grads, offset, &gw_mean.add(&gw_cov)?, gh);
            StateGrad {
                means: FeatureMap::from_vec(input.shape(), gx)?,
                cov,
            }
        }
        LayerSpec::AvgPool(p) => {
            let k = p.kernel;
            let inv = 1.0 / (k * k) as f64;
            let mut means = FeatureMap::zeros(input.shape());
            let ow = g.means.width;
            for oy in 0..g.means.height {
                for ox in 0..ow {
                    let src = g.means.pixels.row(oy * ow + ox).to_vec();
                    for ky in 0..k {
                        for kx in 0..k {
                            let dst = means.pixels.row_mut((oy * k + ky) * input.means.width + ox * k + kx);
                            for (d, s) in dst.iter_mut().zip(&src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            StateGrad {
                means,
                cov: g.cov.scale(inv),
            }
        }
        LayerSpec::Relu => {
            let s = channel_std(&input.cov)?;
            let mut means = g.means.clone();
            let mut gs = vec![0.0; s.len()];
            for r in 0..means.pixels.rows() {
                let mu = input.means.pixels.row(r);
                for (c, gm) in means.pixels.row_mut(r).iter_mut().enumerate() {
                    let (d_mu, d_s) = relu_mean_grad(mu[c], s[c]);
                    gs[c] += *gm * d_s;
                    *gm *= d_mu;
                }
            }
            let mut cov = g.cov;
            for (c, (&sc, &gc)) in s.iter().zip(&gs).enumerate() {
                if sc > 0.0 {
                    cov[(c, c)] += gc / (2.0 * sc);
                }
            }
            StateGrad { means, cov }
        }
        LayerSpec::Normalize(norm) if norm.enabled => {
            let mut means = g.means;
            for r in 0..means.pixels.rows() {
                for (c, v) in means.pixels.row_mut(r).iter_mut().enumerate() {
                    *v /= norm.scale(c);
                }
            }
            let n = g.cov.rows();
            let cov = Matrix::from_fn(n, n, |i, j| g.cov[(i, j)] / (norm.scale(i) * norm.scale(j)));
            StateGrad { means, cov }
        }
        LayerSpec::Normalize(_) => g,
        LayerSpec::Flatten => StateGrad {
            means: FeatureMap::from_vec(input.shape(), g.means.data().to_vec())?,
            cov: g.cov,
        },
        LayerSpec::ResidualAdd(_) => unreachable!("residuals are handled by the walker"),
    })
}

fn nodes_backward(layers: &[LayerSpec], nodes: &[TapeNode], r_max: f64, mut g: StateGrad, grads: &mut [f64], base: usize) -> Result<StateGrad> {
    if layers.len() != nodes.len() {
        return Err(Error::InvalidNetwork(format!(
            "tape has {} entries for {} layers",
            nodes.len(),
            layers.len()
        )));
    }
    let mut offsets = Vec::with_capacity(layers.len());
    let mut at = base;
    for l in layers {
        offsets.push(at);
        at += l.param_count();
    }
    for ((layer, node), &offset) in layers.iter().zip(nodes).zip(&offsets).rev() {
        g = match (layer, node) {
            (LayerSpec::ResidualAdd(r), TapeNode::Residual { branch }) => {
                let through = nodes_backward(&r.branch, branch, r_max, g.clone(), grads, offset)?;
                StateGrad {
                    means: FeatureMap::from_vec(g.means.shape(), g.means.data().iter().zip(through.means.data()).map(|(a, b)| a + b).collect())?,
                    cov: g.cov.add(&through.cov)?,
                }
            }
            (LayerSpec::ResidualAdd(_), _) | (_, TapeNode::Residual { .. }) => {
                return Err(Error::InvalidNetwork("tape does not match the network".into()));
            }
            (_, TapeNode::Layer { input, first_linear }) => layer_backward(layer, input, *first_linear, r_max, g, grads, offset)?,
        };
    }
    Ok(g)
}

/// Parameter gradients (in [`NetworkSpec::params`] order) given the loss
/// gradient at the output state.
pub fn backward_all(net: &NetworkSpec, tape: &GradientTape, g_mu: &[f64], g_cov: &Matrix) -> Result<Vec<f64>> {
    let out = &tape.output;
    if g_mu.len() != out.shape().len() || g_cov.shape() != out.cov.shape() {
        return Err(Error::DimensionMismatch {
            op: "backward_all",
            left: (g_mu.len(), out.cov.rows()),
            right: g_cov.shape(),
        });
    }
    let g = StateGrad {
        means: FeatureMap::from_vec(out.shape(), g_mu.to_vec())?,
        cov: g_cov.clone(),
    };
    let mut grads = vec![0.0; net.param_count()];
    nodes_backward(&net.layers, &tape.nodes, tape.r_max, g, &mut grads, 0)?;
    Ok(grads)
}

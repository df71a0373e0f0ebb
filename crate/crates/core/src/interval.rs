//! Interval bound propagation baseline, for comparing box growth against the
//! propagated covariance.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::{propagate_all, BoundConfig};
use crate::network::{avg_pool_map, conv_map, Conv, FeatureMap, LayerSpec, Linear, NetworkSpec};
use crate::numkit::{log_det_sym, Matrix};

/// Default box half-width in units of σ.
pub const DEFAULT_WIDTH_MULTIPLIER: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalState {
    pub lower: FeatureMap,
    pub upper: FeatureMap,
    pub layer_index: usize,
}

impl IntervalState {
    pub fn center(&self) -> FeatureMap {
        let mut c = self.lower.clone();
        for (l, u) in c.pixels.data_mut().iter_mut().zip(self.upper.data()) {
            *l = 0.5 * (*l + u);
        }
        c
    }

    pub fn half_width(&self) -> FeatureMap {
        let mut r = self.upper.clone();
        for (u, l) in r.pixels.data_mut().iter_mut().zip(self.lower.data()) {
            *u = 0.5 * (*u - l);
        }
        r
    }

    fn from_center_radius(c: FeatureMap, r: &FeatureMap, layer_index: usize) -> Self {
        let mut lower = c.clone();
        let mut upper = c;
        for ((l, u), h) in lower
            .pixels
            .data_mut()
            .iter_mut()
            .zip(upper.pixels.data_mut().iter_mut())
            .zip(r.data())
        {
            *l -= h;
            *u += h;
        }
        IntervalState {
            lower,
            upper,
            layer_index,
        }
    }

    /// Whether `x` lies inside the box up to `tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.lower.data().len()
            && x
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    /// Mean over pixels of `Σ_c log(half-width)`.
    pub fn log_volume(&self) -> f64 {
        let r = self.half_width();
        let rows = r.pixels.rows();
        let total: f64 = r
            .data()
            .iter()
            .map(|&h| if h > 0.0 { h.ln() } else { f64::NEG_INFINITY })
            .sum();
        total / rows as f64
    }
}

/// Box `[x − mσ, x + mσ]`.
pub fn init_interval(image: &FeatureMap, sigma: f64, width_multiplier: f64) -> Result<IntervalState> {
    if !(sigma >= 0.0 && width_multiplier >= 0.0) {
        return Err(Error::Domain(format!(
            "box needs sigma >= 0 and multiplier >= 0, got {sigma} and {width_multiplier}"
        )));
    }
    let h = width_multiplier * sigma;
    let mut radius = image.clone();
    radius.pixels.data_mut().iter_mut().for_each(|v| *v = h);
    Ok(IntervalState::from_center_radius(image.clone(), &radius, 0))
}

fn abs_conv(conv: &Conv) -> Conv {
    let mut a = conv.clone();
    a.weights.data_mut().iter_mut().for_each(|w| *w = w.abs());
    a.bias.iter_mut().for_each(|b| *b = 0.0);
    a
}

fn affine_linear(x: &[f64], w: &Matrix, bias: Option<&[f64]>) -> Vec<f64> {
    let mut h = bias.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w.cols()]);
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in h.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    h
}

fn step(state: &IntervalState, layer: &LayerSpec) -> Result<IntervalState> {
    let idx = state.layer_index + 1;
    Ok(match layer {
        LayerSpec::Conv(c) => {
            let center = conv_map(&state.center(), c)?;
            let radius = conv_map(&state.half_width(), &abs_conv(c))?;
            IntervalState::from_center_radius(center, &radius, idx)
        }
        LayerSpec::Linear(l) => linear_step(state, l, idx)?,
        LayerSpec::AvgPool(p) => IntervalState {
            lower: avg_pool_map(&state.lower, *p)?,
            upper: avg_pool_map(&state.upper, *p)?,
            layer_index: idx,
        },
        LayerSpec::Relu => {
            let mut s = state.clone();
            s.lower.pixels.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            s.upper.pixels.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            s.layer_index = idx;
            s
        }
        LayerSpec::Normalize(n) if n.enabled => {
            let mut s = state.clone();
            for map in [&mut s.lower, &mut s.upper] {
                for r in 0..map.pixels.rows() {
                    for (c, v) in map.pixels.row_mut(r).iter_mut().enumerate() {
                        *v = (*v - n.shift(c)) / n.scale(c);
                    }
                }
            }
            s.layer_index = idx;
            s
        }
        LayerSpec::Normalize(_) | LayerSpec::Flatten => IntervalState {
            layer_index: idx,
            ..state.clone()
        },
        LayerSpec::ResidualAdd(_) => {
            return Err(Error::UnsupportedLayer {
                op: "interval step",
                layer: "residual",
            })
        }
    })
}

fn linear_step(state: &IntervalState, l: &Linear, idx: usize) -> Result<IntervalState> {
    if state.lower.data().len() != l.in_dim {
        return Err(Error::Shape {
            expected: format!("{} flattened inputs", l.in_dim),
            actual: state.lower.shape().to_string(),
        });
    }
    let mut abs_w = l.weights.clone();
    abs_w.data_mut().iter_mut().for_each(|w| *w = w.abs());
    let shape = crate::network::Shape3::new(1, 1, l.out_dim);
    let center = FeatureMap::from_vec(shape, affine_linear(state.center().data(), &l.weights, Some(&l.bias)))?;
    let radius = FeatureMap::from_vec(shape, affine_linear(state.half_width().data(), &abs_w, None))?;
    Ok(IntervalState::from_center_radius(center, &radius, idx))
}

fn run(layers: &[LayerSpec], mut state: IntervalState, trace: &mut Vec<IntervalState>) -> Result<IntervalState> {
    for layer in layers {
        state = match layer {
            LayerSpec::ResidualAdd(r) => {
                let b = run(&r.branch, state.clone(), trace)?;
                let mut s = state.clone();
                for (x, y) in s.lower.pixels.data_mut().iter_mut().zip(b.lower.data()) {
                    *x += y;
                }
                for (x, y) in s.upper.pixels.data_mut().iter_mut().zip(b.upper.data()) {
                    *x += y;
                }
                s.layer_index = b.layer_index + 1;
                s
            }
            _ => step(&state, layer)?,
        };
        trace.push(state.clone());
    }
    Ok(state)
}

/// Boxes after every layer in flat order. Flatten entries keep the grid.
pub fn propagate_interval(net: &NetworkSpec, state: &IntervalState) -> Result<(IntervalState, Vec<IntervalState>)> {
    if state.lower.shape() != net.input_shape {
        return Err(Error::Shape {
            expected: net.input_shape.to_string(),
            actual: state.lower.shape().to_string(),
        });
    }
    let mut trace = Vec::with_capacity(net.layer_count());
    let out = run(&net.layers, state.clone(), &mut trace)?;
    Ok((out, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TightnessRow {
    pub layer_index: usize,
    pub box_log_volume: f64,
    pub cov_log_volume: f64,
}

/// `½ log det(2πe Σ)`: differential entropy of one pixel's Gaussian.
pub fn cov_log_volume(cov: &Matrix) -> Result<f64> {
    let n = cov.rows() as f64;
    let ld = log_det_sym(cov)?;
    Ok(0.5 * (n * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + ld))
}

/// Per-layer box and covariance volume proxies, row 0 being the input.
pub fn tightness_report(
    net: &NetworkSpec,
    image: &FeatureMap,
    cfg: &BoundConfig,
    width_multiplier: f64,
) -> Result<Vec<TightnessRow>> {
    let init = init_interval(image, cfg.sigma_in, width_multiplier)?;
    let (_, boxes) = propagate_interval(net, &init)?;
    let (_, moments) = propagate_all(net, image, cfg)?;
    let first = crate::moments::init_input(image, cfg)?;
    let mut rows = vec![TightnessRow {
        layer_index: 0,
        box_log_volume: init.log_volume(),
        cov_log_volume: cov_log_volume(&first.cov)?,
    }];
    for (i, (b, m)) in boxes.iter().zip(&moments).enumerate() {
        rows.push(TightnessRow {
            layer_index: i + 1,
            box_log_volume: b.log_volume(),
            cov_log_volume: cov_log_volume(&m.cov)?,
        });
    }
    Ok(rows)
}

pub fn write_tightness_csv<W: Write>(rows: &[TightnessRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer_index", "box_log_volume", "cov_log_volume"])
        .map_err(crate::moments::csv_err)?;
    for r in rows {
        w.write_record([
            r.layer_index.to_string(),
            r.box_log_volume.to_string(),
            r.cov_log_volume.to_string(),
        ])
        .map_err(crate::moments::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

//! Monte Carlo randomized smoothing: two-phase prediction and
//! certification, plus empirical per-layer moments for checking the
//! propagated bounds.
//!
//! Noise is drawn in fixed chunks of [`CHUNK`] samples; chunk `i` of a phase
//! reads its own ChaCha stream, and chunk results are combined in chunk
//! order. Results therefore do not depend on how many threads run.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::moments::{propagate_all, BoundConfig};
use crate::network::{forward, forward_recorded, FeatureMap, NetworkSpec, Shape3};
use crate::numkit::{binom_lower_confidence, std_normal_cdf_inv, sym_eigen, Matrix, NormalStream};

pub const CHUNK: usize = 256;
/// Chunks evaluated together before their results are folded in.
const GROUP: usize = 16;
/// Widest layer `mc_layer_moments` will accumulate.
pub const MAX_CHANNELS: usize = 512;
/// Samples used for the cross-pixel correlation estimate.
pub const CORR_SAMPLES: usize = 10_000;
/// Pixel offsets (Chebyshev distance ≤ this) used for the correlation estimate.
pub const CORR_RADIUS: isize = 2;

const PHASE_SELECT: u64 = 1;
const PHASE_ESTIMATE: u64 = 2;
const PHASE_MOMENTS: u64 = 3;
const PHASE_SCATTER: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MCConfig {
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for MCConfig {
    fn default() -> Self {
        MCConfig {
            n0: 100,
            n: 100_000,
            alpha: 0.001,
            sigma: 0.25,
            seed: 0,
        }
    }
}

impl MCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 || self.n == 0 {
            return Err(Error::Domain("n0 and n must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Whether `n` is below the recommended 10 × `n0`.
    pub fn undersampled(&self) -> bool {
        self.n < 10 * self.n0
    }
}

fn stream(seed: u64, phase: u64, chunk: usize) -> NormalStream {
    NormalStream::substream(seed, (phase << 48) | chunk as u64)
}

/// Runs `f` on every chunk of `total` samples and folds the results in
/// chunk order.
fn chunked<A, F, G>(total: usize, init: A, f: F, mut fold: G) -> Result<A>
where
    A: Send,
    F: Fn(usize, usize) -> Result<A> + Sync,
    G: FnMut(&mut A, A),
{
    let chunks = total.div_ceil(CHUNK);
    let mut acc = init;
    let mut start = 0;
    while start < chunks {
        let end = (start + GROUP).min(chunks);
        let parts: Vec<Result<A>> = (start..end)
            .into_par_iter()
            .map(|c| f(c, CHUNK.min(total - c * CHUNK)))
            .collect();
        for p in parts {
            fold(&mut acc, p?);
        }
        start = end;
    }
    Ok(acc)
}

fn noisy(image: &FeatureMap, sigma: f64, rng: &mut NormalStream) -> FeatureMap {
    let mut x = image.clone();
    for v in x.pixels.data_mut() {
        *v += sigma * rng.next_normal();
    }
    x
}

fn argmax(v: &[f64]) -> usize {
    crate::network::argmax(v)
}

/// Class histogram of the base classifier over `total` noisy copies.
pub fn sample_counts(net: &NetworkSpec, image: &FeatureMap, sigma: f64, total: usize, seed: u64, phase: u64) -> Result<Vec<u64>> {
    let c = net.class_count;
    chunked(
        total,
        vec![0u64; c],
        |chunk, len| {
            let mut rng = stream(seed, phase, chunk);
            let mut counts = vec![0u64; c];
            for _ in 0..len {
                counts[argmax(&forward(net, &noisy(image, sigma, &mut rng))?)] += 1;
            }
            Ok(counts)
        },
        |acc, part| acc.iter_mut().zip(part).for_each(|(a, b)| *a += b),
    )
}

/// Top class by count, or `None` when the top two counts tie.
fn top_class(counts: &[u64]) -> Option<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    if counts.len() > 1 && counts[order[0]] == counts[order[1]] {
        None
    } else {
        Some(order[0])
    }
}

/// Majority vote over `n0` noisy forward passes; `None` on a tie.
pub fn mc_predict(net: &NetworkSpec, image: &FeatureMap, cfg: &MCConfig) -> Result<Option<usize>> {
    cfg.validate()?;
    let counts = sample_counts(net, image, cfg.sigma, cfg.n0, cfg.seed, PHASE_SELECT)?;
    Ok(top_class(&counts))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MCReport {
    /// Class chosen from the selection draws.
    pub predicted: usize,
    /// Histogram over the `n` estimation draws.
    pub class_counts: Vec<u64>,
    pub p_lower: f64,
    /// `σ·Φ⁻¹(p_lower)`, or 0 when abstaining.
    pub radius: f64,
    pub abstained: bool,
}

/// Certification from counts: Clopper–Pearson bound on the selected class's
/// success count, abstaining unless it exceeds ½.
pub fn certify_counts(predicted: usize, counts: &[u64], alpha: f64, sigma: f64) -> Result<MCReport> {
    let n: u64 = counts.iter().sum();
    let p_lower = binom_lower_confidence(counts[predicted], n, alpha)?;
    let (radius, abstained) = if p_lower > 0.5 {
        (sigma * std_normal_cdf_inv(p_lower)?, false)
    } else {
        (0.0, true)
    };
    Ok(MCReport {
        predicted,
        class_counts: counts.to_vec(),
        p_lower,
        radius,
        abstained,
    })
}

/// `n0` draws pick the class (lowest index among equal counts), `n` fresh
/// draws count its successes.
pub fn mc_certify(net: &NetworkSpec, image: &FeatureMap, cfg: &MCConfig) -> Result<MCReport> {
    cfg.validate()?;
    let sel = sample_counts(net, image, cfg.sigma, cfg.n0, cfg.seed, PHASE_SELECT)?;
    let predicted = argmax(&sel.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let counts = sample_counts(net, image, cfg.sigma, cfg.n, cfg.seed, PHASE_ESTIMATE)?;
    certify_counts(predicted, &counts, cfg.alpha, cfg.sigma)
}

/// Empirical statistics of one layer's output under input noise.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMoments {
    /// Flat layer index (1 is the first layer).
    pub layer_index: usize,
    pub kind: &'static str,
    pub shape: Shape3,
    pub mean: FeatureMap,
    /// Per-pixel covariances averaged over pixels.
    pub cov: Matrix,
    /// Largest |correlation| between channels of two distinct pixels at
    /// Chebyshev distance ≤ 2, pooled over positions.
    pub max_cross_corr: f64,
}

fn offsets() -> Vec<(isize, isize)> {
    let mut v = Vec::new();
    for dy in 0..=CORR_RADIUS {
        for dx in -CORR_RADIUS..=CORR_RADIUS {
            if dy == 0 && dx <= 0 {
                continue;
            }
            v.push((dy, dx));
        }
    }
    v
}

#[derive(Clone)]
struct LayerAcc {
    shape: Shape3,
    /// Σ d per pixel/channel.
    sum: Vec<f64>,
    /// Σ over samples and pixels of d dᵀ.
    outer: Vec<f64>,
    /// Per offset: Σ over the correlation samples and pixel pairs of d_p d_qᵀ.
    cross: Vec<Vec<f64>>,
    /// Σ d and Σ d² per pixel/channel over the correlation samples.
    corr_sum: Vec<f64>,
    corr_sq: Vec<f64>,
}

impl LayerAcc {
    fn new(shape: Shape3, n_off: usize) -> Self {
        let n = shape.channels;
        LayerAcc {
            shape,
            sum: vec![0.0; shape.len()],
            outer: vec![0.0; n * n],
            cross: vec![vec![0.0; n * n]; n_off],
            corr_sum: vec![0.0; shape.len()],
            corr_sq: vec![0.0; shape.len()],
        }
    }

    fn add(&mut self, d: &[f64], with_corr: bool, offs: &[(isize, isize)]) {
        let n = self.shape.channels;
        for (s, v) in self.sum.iter_mut().zip(d) {
            *s += v;
        }
        for p in 0..self.shape.pixels() {
            let dp = &d[p * n..(p + 1) * n];
            for a in 0..n {
                if dp[a] == 0.0 {
                    continue;
                }
                let row = &mut self.outer[a * n..(a + 1) * n];
                for b in 0..n {
                    row[b] += dp[a] * dp[b];
                }
            }
        }
        if !with_corr {
            return;
        }
        for ((s, q), v) in self.corr_sum.iter_mut().zip(&mut self.corr_sq).zip(d) {
            *s += v;
            *q += v * v;
        }
        for (o, &off) in offs.iter().enumerate() {
            let cross = &mut self.cross[o];
            for (p, q) in pairs(self.shape, off) {
                let dp = &d[p * n..(p + 1) * n];
                let dq = &d[q * n..(q + 1) * n];
                for a in 0..n {
                    if dp[a] == 0.0 {
                        continue;
                    }
                    for b in 0..n {
                        cross[a * n + b] += dp[a] * dq[b];
                    }
                }
            }
        }
    }

    fn merge(&mut self, o: LayerAcc) {
        let add = |x: &mut Vec<f64>, y: Vec<f64>| x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
        add(&mut self.sum, o.sum);
        add(&mut self.outer, o.outer);
        add(&mut self.corr_sum, o.corr_sum);
        add(&mut self.corr_sq, o.corr_sq);
        for (x, y) in self.cross.iter_mut().zip(o.cross) {
            add(x, y);
        }
    }

    /// Largest |pooled correlation| over offsets and channel pairs. For each
    /// offset and channel pair the covariances of all pixel pairs are summed
    /// and divided by `√(Σ var_p[a] · Σ var_q[b])`, which keeps it in [−1, 1].
    fn max_cross_corr(&self, offs: &[(isize, isize)], samples: f64) -> f64 {
        let nc = self.shape.channels;
        let mean: Vec<f64> = self.corr_sum.iter().map(|s| s / samples).collect();
        let var: Vec<f64> = self
            .corr_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / samples - m * m).max(0.0))
            .collect();
        let mut best: f64 = 0.0;
        for (o, &off) in offs.iter().enumerate() {
            let mut cov = vec![0.0; nc * nc];
            let mut va = vec![0.0; nc];
            let mut vb = vec![0.0; nc];
            for (p, q) in pairs(self.shape, off) {
                for a in 0..nc {
                    va[a] += var[p * nc + a];
                    vb[a] += var[q * nc + a];
                    for b in 0..nc {
                        cov[a * nc + b] -= mean[p * nc + a] * mean[q * nc + b];
                    }
                }
            }
            for a in 0..nc {
                for b in 0..nc {
                    let c = self.cross[o][a * nc + b] / samples + cov[a * nc + b];
                    let denom = (va[a] * vb[b]).sqrt();
                    if denom > 0.0 {
                        best = best.max((c / denom).abs());
                    }
                }
            }
        }
        best.min(1.0)
    }
}

/// Propagates `n` noisy copies and summarises every layer's output (flat
/// layer order, Flatten kept on the grid).
///
/// Values are accumulated as offsets from the clean forward pass. The
/// channel covariance is the average over pixels of each pixel's own
/// covariance. The cross-pixel correlation uses the first
/// `min(n, CORR_SAMPLES)` draws.
pub fn mc_layer_moments(net: &NetworkSpec, image: &FeatureMap, sigma: f64, n: usize, seed: u64) -> Result<Vec<LayerMoments>> {
    if n < 100 {
        return Err(Error::Domain(format!("need at least 100 samples, got {n}")));
    }
    let (_, clean) = forward_recorded(net, image)?;
    if let Some(m) = clean.iter().find(|m| m.channels() > MAX_CHANNELS) {
        return Err(Error::Domain(format!(
            "layer with {} channels exceeds the {MAX_CHANNELS}-channel limit",
            m.channels()
        )));
    }
    let offs = offsets();
    let fresh: Vec<LayerAcc> = clean.iter().map(|m| LayerAcc::new(m.shape(), offs.len())).collect();
    let accs = chunked(
        n,
        fresh.clone(),
        |chunk, len| {
            let mut rng = stream(seed, PHASE_MOMENTS, chunk);
            let mut local = fresh.clone();
            let mut d = Vec::new();
            for i in 0..len {
                let with_corr = chunk * CHUNK + i < CORR_SAMPLES;
                let (_, rec) = forward_recorded(net, &noisy(image, sigma, &mut rng))?;
                for ((acc, r), c) in local.iter_mut().zip(&rec).zip(&clean) {
                    d.clear();
                    d.extend(r.data().iter().zip(c.data()).map(|(a, b)| a - b));
                    acc.add(&d, with_corr, &offs);
                }
            }
            Ok(local)
        },
        |acc, part| acc.iter_mut().zip(part).for_each(|(a, b)| a.merge(b)),
    )?;

    let n_corr = n.min(CORR_SAMPLES) as f64;
    let nf = n as f64;
    let kinds = net.flat_layers();
    let mut out = Vec::with_capacity(accs.len());
    for (i, ((acc, c), layer)) in accs.into_iter().zip(&clean).zip(kinds).enumerate() {
        let shape = acc.shape;
        let dbar: Vec<f64> = acc.sum.iter().map(|s| s / nf).collect();
        let mut mean = c.clone();
        for (v, d) in mean.pixels.data_mut().iter_mut().zip(&dbar) {
            *v += d;
        }
        out.push(LayerMoments {
            layer_index: i + 1,
            kind: layer.kind(),
            shape,
            mean,
            cov: pooled_cov(&acc.outer, &dbar, nf, shape.channels, shape.pixels() as f64),
            max_cross_corr: acc.max_cross_corr(&offs, n_corr),
        });
    }
    Ok(out)
}

/// Pixel index pairs `(p, q)` with `q` at offset `(dy, dx)` from `p`.
fn pairs(s: Shape3, (dy, dx): (isize, isize)) -> impl Iterator<Item = (usize, usize)> {
    let (h, w) = (s.height as isize, s.width as isize);
    (0..(h - dy).max(0)).flat_map(move |y| {
        (0.max(-dx)..(w - dx.max(0)).max(0)).map(move |x| ((y * w + x) as usize, ((y + dy) * w + x + dx) as usize))
    })
}

fn pooled_cov(outer: &[f64], dbar: &[f64], n: f64, nc: usize, m: f64) -> Matrix {
    let mut cov = Matrix::from_vec(nc, nc, outer.iter().map(|v| v / (n * m)).collect()).expect("square");
    for p in 0..m as usize {
        let dp = &dbar[p * nc..(p + 1) * nc];
        for a in 0..nc {
            for b in 0..nc {
                cov[(a, b)] -= dp[a] * dp[b] / m;
            }
        }
    }
    cov.symmetrize()
}

/// Largest cross-pixel correlation across all layers.
pub fn max_cross_correlation(layers: &[LayerMoments]) -> f64 {
    layers.iter().map(|l| l.max_cross_corr).fold(0.0, f64::max)
}

/// Axes of a 2-D covariance ellipse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ellipse {
    pub center_x: f64,
    pub center_y: f64,
    /// Square roots of the eigenvalues, largest first.
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the major axis in radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn from_cov(center: (f64, f64), cov: &Matrix) -> Result<Self> {
        let eig = sym_eigen(cov)?;
        let v = eig.vectors;
        Ok(Ellipse {
            center_x: center.0,
            center_y: center.1,
            semi_major: eig.values[1].max(0.0).sqrt(),
            semi_minor: eig.values[0].max(0.0).sqrt(),
            angle: v[(1, 1)].atan2(v[(0, 1)]),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianityExport {
    /// `(channel_a, channel_b)` at the probed pixel for each draw.
    pub samples: Vec<(f64, f64)>,
    pub propagated: Ellipse,
    pub empirical: Ellipse,
}

/// Samples of two channels at the centre pixel of layer `layer` (flat index,
/// 0 for the input), with the propagated and empirical 1-σ ellipses.
pub fn empirical_gaussianity(
    net: &NetworkSpec,
    image: &FeatureMap,
    cfg: &BoundConfig,
    n: usize,
    layer: usize,
    channels: (usize, usize),
    seed: u64,
) -> Result<GaussianityExport> {
    let (_, trace) = propagate_all(net, image, cfg)?;
    let state = if layer == 0 {
        crate::moments::init_input(image, cfg)?
    } else {
        trace
            .get(layer - 1)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("layer {layer} out of range 0..={}", trace.len())))?
    };
    let (a, b) = channels;
    let nc = state.cov.rows();
    if a >= nc || b >= nc || a == b {
        return Err(Error::Domain(format!("channel pair ({a}, {b}) invalid for {nc} channels")));
    }
    let shape = state.shape();
    let pixel = (shape.height / 2) * shape.width + shape.width / 2;
    let samples = chunked(
        n,
        Vec::with_capacity(n),
        |chunk, len| {
            let mut rng = stream(seed, PHASE_SCATTER, chunk);
            let mut part = Vec::with_capacity(len);
            for _ in 0..len {
                let x = noisy(image, cfg.sigma_in, &mut rng);
                let map = if layer == 0 {
                    x
                } else {
                    forward_recorded(net, &x)?.1.swap_remove(layer - 1)
                };
                let row = map.pixels.row(pixel);
                part.push((row[a], row[b]));
            }
            Ok(part)
        },
        |acc, part| acc.extend(part),
    )?;
    let m = state.means.pixels.row(pixel);
    let prop_cov = Matrix::from_rows(&[
        vec![state.cov[(a, a)], state.cov[(a, b)]],
        vec![state.cov[(b, a)], state.cov[(b, b)]],
    ]);
    let nf = samples.len() as f64;
    let (mx, my) = samples.iter().fold((0.0, 0.0), |(x, y), s| (x + s.0 / nf, y + s.1 / nf));
    let mut emp = Matrix::zeros(2, 2);
    for &(x, y) in &samples {
        let d = [x - mx, y - my];
        for i in 0..2 {
            for j in 0..2 {
                emp[(i, j)] += d[i] * d[j] / nf;
            }
        }
    }
    Ok(GaussianityExport {
        propagated: Ellipse::from_cov((m[a], m[b]), &prop_cov)?,
        empirical: Ellipse::from_cov((mx, my), &emp)?,
        samples,
    })
}

pub fn write_gaussianity_csv<W: Write>(g: &GaussianityExport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "x", "y", "semi_major", "semi_minor", "angle"])
        .map_err(crate::moments::csv_err)?;
    for (name, e) in [("propagated", &g.propagated), ("empirical", &g.empirical)] {
        w.write_record([
            name.to_string(),
            e.center_x.to_string(),
            e.center_y.to_string(),
            e.semi_major.to_string(),
            e.semi_minor.to_string(),
            e.angle.to_string(),
        ])
        .map_err(crate::moments::csv_err)?;
    }
    for &(x, y) in &g.samples {
        w.write_record(["sample".to_string(), x.to_string(), y.to_string(), String::new(), String::new(), String::new()])
            .map_err(crate::moments::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the MC certification table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MCRow {
    pub sample_id: usize,
    pub true_label: usize,
    pub predicted: usize,
    pub p_lower: f64,
    /// Zero when abstaining or wrong.
    pub radius: f64,
    pub abstained: bool,
}

impl MCRow {
    pub fn new(sample_id: usize, true_label: usize, r: &MCReport) -> Self {
        MCRow {
            sample_id,
            true_label,
            predicted: r.predicted,
            p_lower: r.p_lower,
            radius: if r.abstained || r.predicted != true_label { 0.0 } else { r.radius },
            abstained: r.abstained,
        }
    }
}

/// Certifies every sample of `data`, one row per sample in order.
pub fn mc_certify_dataset(net: &NetworkSpec, data: &crate::data::Dataset, cfg: &MCConfig) -> Result<Vec<MCRow>> {
    (0..data.len())
        .map(|i| Ok(MCRow::new(i, data.label(i), &mc_certify(net, &data.image(i)?, cfg)?)))
        .collect()
}

/// `(certified accuracy at radius 0, ACR)`; abstentions and wrong
/// predictions count as radius 0.
pub fn mc_summary(rows: &[MCRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let n = rows.len() as f64;
    let hits = rows.iter().filter(|r| !r.abstained && r.predicted == r.true_label).count();
    (hits as f64 / n, rows.iter().map(|r| r.radius).sum::<f64>() / n)
}

pub fn write_mc_csv<W: Write>(rows: &[MCRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "true_label", "predicted", "p_lower", "radius", "abstained"])
        .map_err(crate::moments::csv_err)?;
    for r in rows {
        w.write_record([
            r.sample_id.to_string(),
            r.true_label.to_string(),
            r.predicted.to_string(),
            r.p_lower.to_string(),
            r.radius.to_string(),
            r.abstained.to_string(),
        ])
        .map_err(crate::moments::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, Linear, NetworkBuilder};
    use crate::numkit::{matmul, matmul_tn, std_normal_cdf};

    fn linear_net(w: Matrix, b: Vec<f64>, shape: Shape3) -> NetworkSpec {
        NetworkSpec::new(
            shape,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Linear(Linear {
                    in_dim: w.rows(),
                    out_dim: w.cols(),
                    weights: w,
                    bias: b,
                }),
            ],
            2,
        )
        .unwrap()
    }

    fn constant_net() -> NetworkSpec {
        linear_net(Matrix::zeros(3, 2), vec![1.0, 0.0], Shape3::new(1, 1, 3))
    }

    fn cfg(n0: usize, n: usize, sigma: f64, seed: u64) -> MCConfig {
        MCConfig {
            n0,
            n,
            alpha: 0.001,
            sigma,
            seed,
        }
    }

    #[test]
    fn constant_net_predicts_its_class() {
        let x = FeatureMap::zeros(Shape3::new(1, 1, 3));
        assert_eq!(mc_predict(&constant_net(), &x, &cfg(50, 100, 1.0, 0)).unwrap(), Some(0));
    }

    #[test]
    fn zero_noise_matches_forward() {
        let net = NetworkBuilder::new(Shape3::new(4, 4, 1), 2).conv(2, 3, 1, 1).relu().flatten().linear(3).build().unwrap();
        let x = FeatureMap::from_vec(net.input_shape, (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let top = crate::network::predict(&net, &x).unwrap();
        assert_eq!(mc_predict(&net, &x, &cfg(20, 100, 0.0, 1)).unwrap(), Some(top));
    }

    #[test]
    fn linear_smoothed_probability() {
        // Class 0 wins iff (w0 - w1)·(x + ε) + b0 - b1 > 0.
        let w = Matrix::from_rows(&[vec![1.0, -0.5], vec![0.5, 0.5]]);
        let net = linear_net(w, vec![0.2, 0.0], Shape3::new(1, 1, 2));
        let x = FeatureMap::from_vec(Shape3::new(1, 1, 2), vec![0.1, 0.3]).unwrap();
        let sigma = 0.7;
        let dw = [1.5, 0.0];
        let margin = dw[0] * 0.1 + dw[1] * 0.3 + 0.2;
        let p = std_normal_cdf(margin / (sigma * (dw[0] * dw[0] + dw[1] * dw[1] as f64).sqrt()));
        let n0 = 4000;
        let counts = sample_counts(&net, &x, sigma, n0, 3, PHASE_SELECT).unwrap();
        let freq = counts[0] as f64 / n0 as f64;
        assert!((freq - p).abs() <= 3.0 * (p * (1.0 - p) / n0 as f64).sqrt(), "{freq} vs {p}");
    }

    #[test]
    fn all_success_closed_form() {
        let x = FeatureMap::zeros(Shape3::new(1, 1, 3));
        let r = mc_certify(&constant_net(), &x, &cfg(10, 100, 0.5, 0)).unwrap();
        let p = 0.001f64.powf(0.01);
        assert!((r.p_lower - p).abs() < 1e-8);
        assert!((r.radius - 0.5 * std_normal_cdf_inv(p).unwrap()).abs() < 1e-8);
        assert_eq!(r.class_counts.iter().sum::<u64>(), 100);
        assert!(!r.abstained);
    }

    #[test]
    fn tied_net_abstains() {
        let w = Matrix::from_rows(&[vec![1.0, -1.0]]);
        let net = linear_net(w, vec![0.0, 0.0], Shape3::new(1, 1, 1));
        let x = FeatureMap::zeros(Shape3::new(1, 1, 1));
        let abstained = (0..100)
            .filter(|&s| mc_certify(&net, &x, &cfg(10, 200, 1.0, s)).unwrap().abstained)
            .count();
        assert!(abstained >= 99, "{abstained}");
    }

    #[test]
    fn low_success_abstains() {
        let r = certify_counts(0, &[50, 50], 0.001, 1.0).unwrap();
        assert!(r.abstained && r.radius == 0.0);
        let r = certify_counts(1, &[70, 30], 0.001, 1.0).unwrap();
        assert!(r.abstained);
    }

    #[test]
    fn deterministic_regardless_of_threads() {
        let net = NetworkBuilder::new(Shape3::new(4, 4, 1), 2).conv(2, 3, 1, 1).relu().flatten().linear(3).build().unwrap();
        let x = FeatureMap::from_vec(net.input_shape, (0..16).map(|i| (i as f64).cos()).collect()).unwrap();
        let c = cfg(100, 1000, 0.5, 9);
        let a = mc_certify(&net, &x, &c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| mc_certify(&net, &x, &c)).unwrap();
        assert_eq!(a, b);
        let la = mc_layer_moments(&net, &x, 0.5, 600, 1).unwrap();
        let lb = pool.install(|| mc_layer_moments(&net, &x, 0.5, 600, 1)).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn linear_chain_moments() {
        let net = NetworkBuilder::new(Shape3::new(1, 1, 3), 4).linear(4).linear(3).build().unwrap();
        let x = FeatureMap::from_vec(net.input_shape, vec![0.3, -0.2, 0.1]).unwrap();
        let sigma = 0.4;
        let n = 20_000;
        let layers = mc_layer_moments(&net, &x, sigma, n, 2).unwrap();
        let mut chain = Matrix::identity(3).scale(sigma * sigma);
        for (l, lm) in net.layers.iter().zip(&layers) {
            let LayerSpec::Linear(lin) = l else { unreachable!() };
            chain = matmul(&matmul_tn(&lin.weights, &chain).unwrap(), &lin.weights).unwrap();
            let err = lm.cov.sub(&chain).unwrap().frobenius_norm();
            assert!(err <= 10.0 * chain.frobenius_norm() / (n as f64).sqrt(), "{err}");
            assert_eq!(lm.max_cross_corr, 0.0);
        }
    }

    #[test]
    fn error_shrinks_with_samples() {
        let net = NetworkBuilder::new(Shape3::new(1, 1, 2), 5).linear(2).build().unwrap();
        let x = FeatureMap::zeros(net.input_shape);
        let LayerSpec::Linear(lin) = &net.layers[0] else { unreachable!() };
        let exact = matmul_tn(&lin.weights, &lin.weights).unwrap();
        // Average the error over repetitions so a single lucky draw does not decide.
        let err = |n: usize| -> f64 {
            (0..20)
                .map(|s| {
                    let m = mc_layer_moments(&net, &x, 1.0, n, 100 + s).unwrap();
                    m[0].cov.sub(&exact).unwrap().frobenius_norm()
                })
                .sum::<f64>()
                / 20.0
        };
        let ratio = err(4000) / err(1000);
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_sigma_moments() {
        let net = NetworkBuilder::new(Shape3::new(4, 4, 1), 2).conv(2, 3, 1, 1).relu().flatten().linear(3).build().unwrap();
        let x = FeatureMap::from_vec(net.input_shape, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        for l in mc_layer_moments(&net, &x, 0.0, 100, 0).unwrap() {
            assert_eq!(l.cov.max_abs(), 0.0);
        }
        assert!(mc_layer_moments(&net, &x, 0.0, 99, 0).is_err());
    }

    #[test]
    fn independent_pixels_have_small_correlation() {
        let net = NetworkBuilder::new(Shape3::new(4, 4, 2), 1).flatten().linear(2).build().unwrap();
        let x = FeatureMap::zeros(net.input_shape);
        let m = mc_layer_moments(&net, &x, 1.0, 10_000, 3).unwrap();
        assert!(m[0].max_cross_corr < 0.05, "{}", m[0].max_cross_corr);
    }

    #[test]
    fn conv_outputs_are_correlated() {
        let net = NetworkBuilder::new(Shape3::new(6, 6, 1), 1).conv(2, 3, 1, 1).flatten().linear(2).build().unwrap();
        let x = FeatureMap::zeros(net.input_shape);
        let m = mc_layer_moments(&net, &x, 1.0, 5000, 3).unwrap();
        assert!(m[0].max_cross_corr > 0.2);
    }

    #[test]
    fn gaussianity_export() {
        let net = NetworkBuilder::new(Shape3::new(4, 4, 1), 2).conv(3, 3, 1, 1).relu().conv(3, 3, 1, 1).flatten().linear(2).build().unwrap();
        let x = FeatureMap::from_vec(net.input_shape, (0..16).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let bc = BoundConfig::new(0.4, 0.5).unwrap();
        let n = 4000;
        let g = empirical_gaussianity(&net, &x, &bc, n, 3, (0, 1), 5).unwrap();
        assert_eq!(g.samples.len(), n);
        let tol = 0.1 * g.propagated.semi_major;
        assert!(g.propagated.semi_major >= g.empirical.semi_major - tol);
        assert!(g.propagated.semi_minor >= g.empirical.semi_minor - tol);
        let again = empirical_gaussianity(&net, &x, &bc, n, 3, (0, 1), 5).unwrap();
        assert_eq!(g, again);
        assert!(empirical_gaussianity(&net, &x, &bc, n, 3, (0, 7), 5).is_err());
        let mut buf = Vec::new();
        write_gaussianity_csv(&g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), n + 3);
    }
}

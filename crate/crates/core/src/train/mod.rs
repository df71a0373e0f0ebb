//! Training for large certified radius: cross-entropy on the propagated
//! logit mean plus a hinge on the propagated radius, differentiated by hand
//! through every moment rule.

mod loss;
mod tape;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

pub use loss::{loss_classification, loss_robustness, RobustLoss};
pub use tape::{backward_all, forward_taped, GradientTape, StateGrad, TapeNode};

use crate::certify::certify;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moments::BoundConfig;
use crate::network::{FeatureMap, NetworkSpec};
use crate::numkit::NormalStream;

/// Fraction of samples, ranked by certified radius, whose classification
/// term is dropped during noisy-label fine-tuning.
pub const TOP_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the robustness hinge.
    pub lambda: f64,
    /// Hinge offset: samples with radius ≥ Γ get no robustness gradient.
    pub gamma: f64,
    /// Input noise σ.
    pub sigma: f64,
    /// `(first epoch, learning rate)` pairs, sorted by epoch.
    pub lr_schedule: Vec<(usize, f64)>,
    /// λ is 0 before this epoch.
    pub lambda_activation_epoch: usize,
}

impl LossConfig {
    /// Defaults: Γ = 8σ, learning rate 0.05 dropping to 0.01 at epoch 30,
    /// λ active from epoch 20.
    pub fn new(lambda: f64, sigma: f64) -> Self {
        LossConfig {
            lambda,
            gamma: 8.0 * sigma,
            sigma,
            lr_schedule: vec![(0, 0.05), (30, 0.01)],
            lambda_activation_epoch: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.lr_schedule.first().map(|e| e.0) != Some(0) {
            return Err(Error::Domain("learning-rate schedule must start at epoch 0".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) || self.lr_schedule.iter().any(|e| !(e.1 > 0.0)) {
            return Err(Error::Domain("learning-rate schedule must be increasing in epoch with positive rates".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|e| e.0 <= epoch)
            .map(|e| e.1)
            .unwrap_or(self.lr_schedule[0].1)
    }

    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lambda_activation_epoch {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub r_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, r_max: f64) -> Self {
        TrainConfig {
            loss,
            r_max,
            epochs: 40,
            batch_size: 32,
            momentum: 0.9,
        }
    }

    pub fn bound(&self) -> Result<BoundConfig> {
        BoundConfig::new(self.r_max, self.loss.sigma)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.bound()?;
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss {
    pub loss_c: f64,
    pub loss_cr: f64,
    /// `class_weight·l_C + λ·l_CR`.
    pub total: f64,
    pub grads: Vec<f64>,
}

/// Loss and parameter gradient for one sample. `class_weight` scales the
/// cross-entropy term (0 drops it).
pub fn sample_loss(
    net: &NetworkSpec,
    image: &FeatureMap,
    label: usize,
    bound: &BoundConfig,
    lambda: f64,
    gamma: f64,
    class_weight: f64,
) -> Result<SampleLoss> {
    let tape = forward_taped(net, image, bound)?;
    let mu = tape.output.means.data().to_vec();
    let (loss_c, g_c) = loss_classification(&mu, label)?;
    let r = loss_robustness(&mu, &tape.output.cov, label, bound.sigma_in, gamma)?;
    let g_mu: Vec<f64> = g_c.iter().zip(&r.grad_mu).map(|(a, b)| class_weight * a + lambda * b).collect();
    let g_cov = r.grad_cov.scale(lambda);
    let grads = backward_all(net, &tape, &g_mu, &g_cov)?;
    Ok(SampleLoss {
        loss_c,
        loss_cr: r.value,
        total: class_weight * loss_c + lambda * r.value,
        grads,
    })
}

/// Propagated prediction accuracy and ACR over a dataset.
pub fn evaluate(net: &NetworkSpec, data: &Dataset, bound: &BoundConfig) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
    }
    let per: Vec<Result<(bool, f64)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let r = certify(net, &data.image(i)?, bound)?;
            Ok((r.predicted == data.label(i), r.radius_for(data.label(i))))
        })
        .collect();
    let (mut hits, mut total) = (0usize, 0.0);
    for p in per {
        let (hit, radius) = p?;
        hits += hit as usize;
        total += radius;
    }
    let n = data.len() as f64;
    Ok((hits as f64 / n, total / n))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub clean_acc: f64,
    pub acr: f64,
    pub mean_loss_c: f64,
    pub mean_loss_cr: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::moments::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

struct Sgd {
    velocity: Vec<f64>,
    momentum: f64,
}

impl Sgd {
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// One pass over `data` in a seeded order. Returns mean `(l_C, l_CR)`.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    net: &mut NetworkSpec,
    data: &Dataset,
    class_weight: &[f64],
    cfg: &TrainConfig,
    lambda: f64,
    epoch: usize,
    seed: u64,
    opt: &mut Sgd,
) -> Result<(f64, f64)> {
    let bound = cfg.bound()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(NormalStream::substream(seed, epoch as u64).rng_mut());
    let lr = cfg.loss.lr_at(epoch);
    let (mut sum_c, mut sum_cr) = (0.0, 0.0);
    let mut params = net.params();
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let snapshot = &*net;
        let parts: Vec<Result<SampleLoss>> = batch
            .par_iter()
            .map(|&i| {
                sample_loss(snapshot, &data.image(i)?, data.label(i), &bound, lambda, cfg.loss.gamma, class_weight[i])
            })
            .collect();
        let mut grads = vec![0.0; params.len()];
        let mut batch_loss = 0.0;
        for p in parts {
            let p = p?;
            sum_c += p.loss_c;
            sum_cr += p.loss_cr;
            batch_loss += p.total;
            for (g, v) in grads.iter_mut().zip(&p.grads) {
                *g += v;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        if !batch_loss.is_finite() || !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss or gradient at epoch {epoch}, batch {b}")));
        }
        opt.step(&mut params, &grads, lr);
        net.set_params(&params)?;
    }
    let n = data.len() as f64;
    Ok((sum_c / n, sum_cr / n))
}

fn check_data(net: &NetworkSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if data.shape() != net.input_shape || data.class_count != net.class_count {
        return Err(Error::Shape {
            expected: format!("{} images in {} classes", net.input_shape, net.class_count),
            actual: format!("{} images in {} classes", data.shape(), data.class_count),
        });
    }
    Ok(())
}

/// SGD with momentum on `l_C + λ·l_CR`, λ switching on at the configured
/// epoch. Metrics are measured on `eval` (or the training set) after every
/// epoch.
pub fn train_loop(
    net: &NetworkSpec,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(NetworkSpec, Vec<EpochMetrics>)> {
    cfg.validate()?;
    check_data(net, data)?;
    let bound = cfg.bound()?;
    let mut net = net.clone();
    let mut opt = Sgd {
        velocity: vec![0.0; net.param_count()],
        momentum: cfg.momentum,
    };
    let weights = vec![1.0; data.len()];
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (lc, lcr) = run_epoch(&mut net, data, &weights, cfg, cfg.loss.lambda_at(epoch), epoch, seed, &mut opt)?;
        let (acc, acr) = evaluate(&net, eval.unwrap_or(data), &bound)?;
        metrics.push(EpochMetrics {
            epoch,
            clean_acc: acc,
            acr,
            mean_loss_c: lc,
            mean_loss_cr: lcr,
        });
    }
    Ok((net, metrics))
}

/// Indices of the `⌈fraction·n⌉` largest radii; ties go to the lower index.
pub fn top_radius_indices(radii: &[f64], fraction: f64) -> Vec<usize> {
    let k = (fraction * radii.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..radii.len()).collect();
    order.sort_by(|&a, &b| radii[b].total_cmp(&radii[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Fine-tunes a warm-started net on noisily labelled data. Every epoch the
/// training samples are ranked by their current certified radius (of the
/// predicted class); the top 10% keep only the robustness term. λ is active
/// from the first epoch.
pub fn noisy_label_finetune(
    net: &NetworkSpec,
    noisy: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(NetworkSpec, Vec<EpochMetrics>)> {
    cfg.validate()?;
    check_data(net, noisy)?;
    let bound = cfg.bound()?;
    let mut net = net.clone();
    let mut opt = Sgd {
        velocity: vec![0.0; net.param_count()],
        momentum: cfg.momentum,
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let radii: Vec<Result<f64>> = (0..noisy.len())
            .into_par_iter()
            .map(|i| Ok(certify(&net, &noisy.image(i)?, &bound)?.radius))
            .collect();
        let radii = radii.into_iter().collect::<Result<Vec<f64>>>()?;
        let mut weights = vec![1.0; noisy.len()];
        for i in top_radius_indices(&radii, TOP_FRACTION) {
            weights[i] = 0.0;
        }
        let (lc, lcr) = run_epoch(&mut net, noisy, &weights, cfg, cfg.loss.lambda, epoch, seed, &mut opt)?;
        let (acc, acr) = evaluate(&net, eval.unwrap_or(noisy), &bound)?;
        metrics.push(EpochMetrics {
            epoch,
            clean_acc: acc,
            acr,
            mean_loss_c: lc,
            mean_loss_cr: lcr,
        });
    }
    Ok((net, metrics))
}

//! Certified radius from final-layer logit moments.
//!
//! With logits `u ~ N(μ, Σ)`, the probability that the top class `c` beats
//! the runner-up `c̃` is `Φ(z)` with
//! `z = (μ[c] − μ[c̃]) / √(Σ[c,c] + Σ[c̃,c̃] − 2Σ[c,c̃])`. Plugging
//! `p_A = Φ(z)` and `p_B = 1 − Φ(z)` into `σ/2·(Φ⁻¹(p_A) − Φ⁻¹(p_B))` gives
//! the radius `σ·z`, which is computed directly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{block_quadratic, linear_mean, propagate_all, BoundConfig, MomentState};
use crate::network::{FeatureMap, LayerSpec, Linear, NetworkSpec};
use crate::numkit::{std_normal_cdf, Matrix};

/// Lower clamp on the variance of the logit difference.
pub const MIN_DIFF_VAR: f64 = 1e-12;

/// Radius thresholds of the approximate certified accuracy report.
pub const RADIUS_THRESHOLDS: [f64; 8] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertResult {
    pub predicted: usize,
    pub runner_up: usize,
    pub p_lower: f64,
    pub radius: f64,
    pub margin_z: f64,
}

impl CertResult {
    /// The radius counted for a sample whose label is `label`: zero when the
    /// prediction is wrong.
    pub fn radius_for(&self, label: usize) -> f64 {
        if self.predicted == label {
            self.radius
        } else {
            0.0
        }
    }
}

/// Indices of the largest and second-largest entries; ties go to the lower
/// index.
pub fn top_two(mu: &[f64]) -> Result<(usize, usize)> {
    if mu.len() < 2 {
        return Err(Error::Domain(format!("need at least two classes, got {}", mu.len())));
    }
    let mut first = 0;
    for i in 1..mu.len() {
        if mu[i] > mu[first] {
            first = i;
        }
    }
    let mut second = if first == 0 { 1 } else { 0 };
    for i in 0..mu.len() {
        if i != first && mu[i] > mu[second] {
            second = i;
        }
    }
    Ok((first, second))
}

/// `(z, p)` for a pair given the three covariance entries.
fn pair_margin(gap: f64, var_a: f64, var_b: f64, cov_ab: f64) -> (f64, f64) {
    let var = (var_a + var_b - 2.0 * cov_ab).max(MIN_DIFF_VAR);
    let z = gap / var.sqrt();
    (z, std_normal_cdf(z))
}

/// `(c_x, c̃, p_lower)`.
pub fn lower_prob(mu: &[f64], cov: &Matrix) -> Result<(usize, usize, f64)> {
    let r = certified_radius(mu, cov, 1.0)?;
    Ok((r.predicted, r.runner_up, r.p_lower))
}

pub fn certified_radius(mu: &[f64], cov: &Matrix, sigma_in: f64) -> Result<CertResult> {
    if cov.shape() != (mu.len(), mu.len()) {
        return Err(Error::DimensionMismatch {
            op: "certified_radius",
            left: (mu.len(), 1),
            right: cov.shape(),
        });
    }
    let (c, d) = top_two(mu)?;
    let (z, p) = pair_margin(mu[c] - mu[d], cov[(c, c)], cov[(d, d)], cov[(c, d)]);
    Ok(CertResult {
        predicted: c,
        runner_up: d,
        p_lower: p,
        radius: (sigma_in * z).max(0.0),
        margin_z: z,
    })
}

/// Certifies through a final Linear layer while forming only the 2×2
/// covariance of the two logits that matter.
///
/// Produces exactly the numbers [`certified_radius`] gives on the full
/// propagated `C × C` covariance.
pub fn last_layer_2x2(state: &MomentState, last: &Linear, sigma_in: f64) -> Result<CertResult> {
    if state.shape().len() != last.in_dim {
        return Err(Error::Shape {
            expected: format!("{} flattened inputs", last.in_dim),
            actual: state.shape().to_string(),
        });
    }
    let mu = linear_mean(state.means.data(), last);
    let (c, d) = top_two(&mu)?;
    let (lo, hi) = if c < d { (c, d) } else { (d, c) };
    let small = block_quadratic(&state.cov, &last.weights, &[lo, hi])?;
    let at = |i: usize| if i == lo { 0 } else { 1 };
    let (z, p) = pair_margin(
        mu[c] - mu[d],
        small[(at(c), at(c))],
        small[(at(d), at(d))],
        small[(at(c), at(d))],
    );
    Ok(CertResult {
        predicted: c,
        runner_up: d,
        p_lower: p,
        radius: (sigma_in * z).max(0.0),
        margin_z: z,
    })
}

/// Full propagation followed by [`certified_radius`].
pub fn certify(net: &NetworkSpec, image: &FeatureMap, cfg: &BoundConfig) -> Result<CertResult> {
    let (out, _) = propagate_all(net, image, cfg)?;
    certified_radius(out.means.data(), &out.cov, cfg.sigma_in)
}

/// Certification through [`last_layer_2x2`]. The network's final Linear must
/// be its only Linear layer.
pub fn certify_shortcut(net: &NetworkSpec, image: &FeatureMap, cfg: &BoundConfig) -> Result<CertResult> {
    if net.linear_count() != 1 {
        return Err(Error::InvalidNetwork(format!(
            "2x2 shortcut needs exactly one Linear layer, found {}",
            net.linear_count()
        )));
    }
    let Some((LayerSpec::Linear(last), body)) = net.layers.split_last() else {
        return Err(Error::InvalidNetwork("final layer is not Linear".into()));
    };
    let headless = NetworkSpec {
        input_shape: net.input_shape,
        layers: body.to_vec(),
        class_count: net.class_count,
    };
    let (state, _) = propagate_all(&headless, image, cfg)?;
    last_layer_2x2(&state, last, cfg.sigma_in)
}

/// Average certified radius; misclassified samples count as zero.
pub fn acr(results: &[(CertResult, usize)]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Domain("ACR of an empty set".into()));
    }
    Ok(results.iter().map(|(r, y)| r.radius_for(*y)).sum::<f64>() / results.len() as f64)
}

/// One line of the certification table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertRow {
    pub sample_id: usize,
    pub true_label: usize,
    pub predicted: usize,
    pub p_lower: f64,
    /// Zero when `predicted != true_label`.
    pub radius: f64,
}

impl CertRow {
    pub fn new(sample_id: usize, true_label: usize, r: &CertResult) -> Self {
        CertRow {
            sample_id,
            true_label,
            predicted: r.predicted,
            p_lower: r.p_lower,
            radius: r.radius_for(true_label),
        }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.true_label
    }
}

pub fn write_cert_csv<W: Write>(rows: &[CertRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::moments::csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["sample_id", "true_label", "predicted", "p_lower", "radius"])
            .map_err(crate::moments::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of samples that are correct with radius at least `r`, for each
/// threshold.
pub fn certified_accuracy(rows: &[CertRow], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let m = rows.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| {
            let hits = rows.iter().filter(|r| r.correct() && r.radius >= t).count();
            (t, hits as f64 / m)
        })
        .collect()
}

/// `"0.00: 0.50, 0.25: 0.50, …"`.
pub fn format_accuracy_line(acc: &[(f64, f64)]) -> String {
    acc.iter()
        .map(|(t, a)| format!("{t:.2}: {a:.2}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{std_normal_cdf_inv, NormalStream};

    #[test]
    fn tied_means() {
        let cov = Matrix::identity(3);
        let (_, _, p) = lower_prob(&[1.0, 1.0, 0.0], &cov).unwrap();
        assert_eq!(p, 0.5);
        let r = certified_radius(&[1.0, 1.0, 0.0], &cov, 0.5).unwrap();
        assert_eq!((r.predicted, r.runner_up, r.radius), (0, 1, 0.0));
    }

    #[test]
    fn two_class_unit_cov() {
        // Oracle: MC estimate of P(X1 > X2) for X ~ N((1, 0), I).
        let mut rng = NormalStream::new(3);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| 1.0 + rng.next_normal() > rng.next_normal())
            .count();
        let p_mc = hits as f64 / n as f64;
        let (c, d, p) = lower_prob(&[1.0, 0.0], &Matrix::identity(2)).unwrap();
        assert_eq!((c, d), (0, 1));
        assert!((p - p_mc).abs() < 0.002, "{p} vs {p_mc}");
        assert!((p - 0.7602).abs() < 1e-4);

        let r = certified_radius(&[1.0, 0.0], &Matrix::identity(2), 0.5).unwrap();
        assert!((r.radius - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        let via_p = 0.25 * (std_normal_cdf_inv(p_mc).unwrap() - std_normal_cdf_inv(1.0 - p_mc).unwrap());
        assert!((r.radius - via_p).abs() < 0.01);
    }

    #[test]
    fn degenerate_difference_saturates() {
        let cov = Matrix::from_rows(&[vec![2.0, 2.0], vec![2.0, 2.0]]);
        let r = certified_radius(&[0.3, 0.1], &cov, 1.0).unwrap();
        assert_eq!(r.p_lower, 1.0);
        assert!(r.margin_z > 1e5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(lower_prob(&[1.0], &Matrix::identity(1)).is_err());
    }

    #[test]
    fn identity_of_forms() {
        for i in 1..200 {
            let p = 1e-6 + (1.0 - 2e-6) * i as f64 / 200.0;
            let z = std_normal_cdf_inv(p).unwrap();
            let form = 0.5 * (z - std_normal_cdf_inv(1.0 - p).unwrap());
            assert!((form - z).abs() < 1e-9, "p = {p}");
        }
    }

    #[test]
    fn acr_rules() {
        let r = |radius, predicted| CertResult {
            predicted,
            runner_up: 1 - predicted,
            p_lower: 0.9,
            radius,
            margin_z: 1.0,
        };
        assert_eq!(acr(&[(r(0.5, 0), 1), (r(0.7, 1), 0)]).unwrap(), 0.0);
        assert!((acr(&[(r(0.4, 0), 0), (r(0.6, 0), 0)]).unwrap() - 0.5).abs() < 1e-15);
        assert!((acr(&[(r(0.9, 0), 0), (r(0.3, 0), 1)]).unwrap() - 0.45).abs() < 1e-15);
        assert!(acr(&[]).is_err());
    }

    #[test]
    fn accuracy_line() {
        let rows = vec![
            CertRow {
                sample_id: 0,
                true_label: 1,
                predicted: 1,
                p_lower: 0.8,
                radius: 0.3,
            },
            CertRow {
                sample_id: 1,
                true_label: 0,
                predicted: 2,
                p_lower: 0.7,
                radius: 0.0,
            },
        ];
        let line = format_accuracy_line(&certified_accuracy(&rows, &RADIUS_THRESHOLDS[..3]));
        assert_eq!(line, "0.00: 0.50, 0.25: 0.50, 0.50: 0.00");
        let mut buf = Vec::new();
        write_cert_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,true_label,predicted,p_lower,radius\n"));
    }
}

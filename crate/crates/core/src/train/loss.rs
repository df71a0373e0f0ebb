use crate::certify::MIN_DIFF_VAR;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Cross-entropy of `softmax(mu)` against `label`, with its gradient
/// `softmax(mu) − onehot(label)`.
pub fn loss_classification(mu: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= mu.len() {
        return Err(Error::Domain(format!("label {label} out of range for {} logits", mu.len())));
    }
    if !mu.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let max = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = mu.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_z = max + total.ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((log_z - mu[label], grad))
}

/// Value and gradients of the hinge `max(0, Γ − σ·gap/√v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustLoss {
    pub value: f64,
    /// Gradient with respect to the logit means.
    pub grad_mu: Vec<f64>,
    /// Gradient with respect to each covariance entry taken as independent.
    pub grad_cov: Matrix,
    pub active: bool,
    /// The logit-difference variance fell below the clamp; no gradient.
    pub degenerate: bool,
}

/// Robustness hinge for a sample with label `label`.
///
/// The pair is `(label, strongest other class)`. Samples whose label is not
/// the top logit get zero loss and zero gradient, as do samples whose
/// radius already reaches `gamma`.
pub fn loss_robustness(mu: &[f64], cov: &Matrix, label: usize, sigma: f64, gamma: f64) -> Result<RobustLoss> {
    let c = mu.len();
    if label >= c || c < 2 || cov.shape() != (c, c) {
        return Err(Error::Domain(format!(
            "label {label} with {c} logits and a {:?} covariance",
            cov.shape()
        )));
    }
    let mut out = RobustLoss {
        value: 0.0,
        grad_mu: vec![0.0; c],
        grad_cov: Matrix::zeros(c, c),
        active: false,
        degenerate: false,
    };
    let other = (0..c)
        .filter(|&j| j != label)
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if mu[b] >= mu[j] => Some(b),
            _ => Some(j),
        })
        .expect("at least two classes");
    let gap = mu[label] - mu[other];
    if gap < 0.0 {
        return Ok(out);
    }
    let v = cov[(label, label)] + cov[(other, other)] - 2.0 * cov[(label, other)];
    if v < MIN_DIFF_VAR {
        out.degenerate = true;
        return Ok(out);
    }
    let sd = v.sqrt();
    let value = gamma - sigma * gap / sd;
    if value <= 0.0 {
        return Ok(out);
    }
    out.value = value;
    out.active = true;
    let d_gap = -sigma / sd;
    let d_v = 0.5 * sigma * gap / (v * sd);
    out.grad_mu[label] = d_gap;
    out.grad_mu[other] = -d_gap;
    out.grad_cov[(label, label)] = d_v;
    out.grad_cov[(other, other)] = d_v;
    out.grad_cov[(label, other)] = -2.0 * d_v;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::NormalStream;

    #[test]
    fn uniform_logits() {
        let (l, g) = loss_classification(&[0.3; 10], 4).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn classification_fd() {
        let mut rng = NormalStream::new(1);
        let mu: Vec<f64> = (0..5).map(|_| rng.next_normal()).collect();
        let (_, g) = loss_classification(&mu, 2).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let mut a = mu.clone();
            let mut b = mu.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (loss_classification(&a, 2).unwrap().0 - loss_classification(&b, 2).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn hinge_value() {
        let cov = Matrix::identity(2);
        let r = loss_robustness(&[0.5, 0.0], &cov, 0, 0.5, 2.0).unwrap();
        assert!((r.value - (2.0 - 0.25 / 2f64.sqrt())).abs() < 1e-12);
        assert!((r.value - 1.82322).abs() < 1e-5);
        let r = loss_robustness(&[5.0, 0.0], &cov, 0, 1.0, 2.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_mu.iter().all(|&g| g == 0.0) && r.grad_cov.max_abs() == 0.0);
    }

    #[test]
    fn misordered_and_degenerate() {
        let r = loss_robustness(&[0.0, 1.0], &Matrix::identity(2), 0, 1.0, 2.0).unwrap();
        assert!(!r.active && r.value == 0.0);
        let r = loss_robustness(&[1.0, 0.0], &Matrix::zeros(2, 2), 0, 1.0, 2.0).unwrap();
        assert!(r.degenerate && r.grad_mu.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hinge_fd() {
        let mut rng = NormalStream::new(7);
        let mut checked = 0;
        while checked < 100 {
            let c = 4;
            let mu: Vec<f64> = (0..c).map(|_| rng.next_normal()).collect();
            let a = Matrix::from_fn(c, c, |_, _| rng.next_normal());
            let cov = crate::numkit::matmul_tn(&a, &a).unwrap();
            let label = crate::network::argmax(&mu);
            let r = loss_robustness(&mu, &cov, label, 0.5, 4.0).unwrap();
            if !r.active {
                continue;
            }
            checked += 1;
            let h = 1e-5;
            let f = |mu: &[f64], cov: &Matrix| loss_robustness(mu, cov, label, 0.5, 4.0).unwrap().value;
            let close = |fd: f64, g: f64| (fd - g).abs() <= 1e-5 * fd.abs().max(g.abs()).max(1e-3);
            for i in 0..c {
                let (mut p, mut m) = (mu.clone(), mu.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (f(&p, &cov) - f(&m, &cov)) / (2.0 * h);
                assert!(close(fd, r.grad_mu[i]), "mu {i}: {fd} vs {}", r.grad_mu[i]);
            }
            for i in 0..c {
                for j in 0..c {
                    let (mut p, mut m) = (cov.clone(), cov.clone());
                    p[(i, j)] += h;
                    m[(i, j)] -= h;
                    let fd = (f(&mu, &p) - f(&mu, &m)) / (2.0 * h);
                    assert!(close(fd, r.grad_cov[(i, j)]), "cov {i},{j}: {fd} vs {}", r.grad_cov[(i, j)]);
                }
            }
        }
    }
}

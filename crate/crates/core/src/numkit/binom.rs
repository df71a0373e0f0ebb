use crate::error::{Error, Result};

/// `P[Bin(trials, p) >= successes]`, via the regularized incomplete beta
/// identity `I_p(successes, trials - successes + 1)`.
pub fn binom_upper_tail(successes: u64, trials: u64, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    statrs::function::beta::beta_reg(successes as f64, (trials - successes + 1) as f64, p)
}

/// One-sided Clopper–Pearson lower confidence bound on a binomial success
/// probability: the `p` at which `P[Bin(trials, p) >= successes]` equals
/// `alpha`, found by bisection on the (increasing) upper tail.
pub fn binom_lower_confidence(successes: u64, trials: u64, alpha: f64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Domain("binomial bound needs at least one trial".into()));
    }
    if successes > trials {
        return Err(Error::Domain(format!(
            "successes {successes} exceed trials {trials}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binom_upper_tail(successes, trials, mid) > alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::gamma::ln_gamma;

    /// Direct pmf summation in log space.
    fn tail_by_summation(k: u64, n: u64, p: f64) -> f64 {
        let ln_p = p.ln();
        let ln_q = (1.0 - p).ln();
        let nf = n as f64;
        (k..=n)
            .map(|i| {
                let i = i as f64;
                (ln_gamma(nf + 1.0) - ln_gamma(i + 1.0) - ln_gamma(nf - i + 1.0)
                    + i * ln_p
                    + (nf - i) * ln_q)
                    .exp()
            })
            .sum()
    }

    #[test]
    fn zero_successes_is_zero() {
        assert_eq!(binom_lower_confidence(0, 50, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn all_successes_closed_form() {
        let v = binom_lower_confidence(100, 100, 0.001).unwrap();
        let closed = 0.001f64.powf(1.0 / 100.0);
        assert!((v - closed).abs() < 1e-12, "{v} vs {closed}");
        assert!((closed - 0.933_254_300_796_991).abs() < 1e-12);
        assert!((tail_by_summation(100, 100, v) - 0.001).abs() < 1e-10);
    }

    #[test]
    fn half_successes_matches_summation() {
        let v = binom_lower_confidence(50, 100, 0.05).unwrap();
        assert!((tail_by_summation(50, 100, v) - 0.05).abs() < 1e-8);
        assert!(v > 0.40 && v < 0.50);
    }

    #[test]
    fn errors() {
        assert!(binom_lower_confidence(1, 0, 0.05).is_err());
        assert!(binom_lower_confidence(5, 4, 0.05).is_err());
        assert!(binom_lower_confidence(1, 4, 0.0).is_err());
    }

    #[test]
    fn monotone_in_successes() {
        for &n in &[1u64, 7, 100, 1000] {
            let mut prev = -1.0;
            for k in 0..=n {
                let v = binom_lower_confidence(k, n, 0.01).unwrap();
                assert!(v >= prev, "n={n} k={k}");
                prev = v;
            }
        }
    }
}

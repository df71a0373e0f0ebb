//! Error function and the standard normal CDF / quantile.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Error function, accurate to a few ulp over the whole real line.
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Complementary error function `1 - erf(x)` without cancellation for large `x`.
#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF `Φ(x)`.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * erfc(-x * FRAC_1_SQRT_2)
    } else {
        1.0 - 0.5 * erfc(x * FRAC_1_SQRT_2)
    }
}

/// Upper tail `1 - Φ(x)`.
pub fn std_normal_sf(x: f64) -> f64 {
    std_normal_cdf(-x)
}

/// Standard normal quantile `Φ⁻¹(p)` for `p` strictly inside `(0, 1)`.
///
/// Acklam's rational approximation followed by one Newton step on the
/// lower tail. Upper-tail arguments are reflected so the refinement always
/// works against a small probability.
pub fn std_normal_cdf_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile needs p in (0, 1), got {p}"
        )));
    }
    if p > 0.5 {
        return Ok(-lower_tail_quantile(1.0 - p));
    }
    Ok(lower_tail_quantile(p))
}

fn lower_tail_quantile(p: f64) -> f64 {
    let x = acklam(p);
    // Newton step against Φ(x) - p, computed without cancellation since x <= 0.
    let err = std_normal_cdf(x) - p;
    x - err / std_normal_pdf(x)
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Maclaurin series of erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / PI.sqrt()
    }

    /// Adaptive Simpson on the standard normal density.
    fn density_integral(a: f64, b: f64) -> f64 {
        fn simpson(a: f64, b: f64) -> f64 {
            let m = 0.5 * (a + b);
            (b - a) / 6.0 * (std_normal_pdf(a) + 4.0 * std_normal_pdf(m) + std_normal_pdf(b))
        }
        fn rec(a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let l = simpson(a, m);
            let r = simpson(m, b);
            if depth == 0 || (l + r - whole).abs() < 15.0 * tol {
                return l + r + (l + r - whole) / 15.0;
            }
            rec(a, m, l, tol / 2.0, depth - 1) + rec(m, b, r, tol / 2.0, depth - 1)
        }
        rec(a, b, simpson(a, b), 1e-14, 40)
    }

    #[test]
    fn erf_basics() {
        assert_eq!(erf(0.0), 0.0);
        for &x in &[0.1, 0.5, 1.3, 2.7, 4.0] {
            assert_eq!(erf(-x), -erf(x));
        }
        let one = erf_series(1.0);
        assert!((one - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf(1.0) - one).abs() < 1e-12);
    }

    #[test]
    fn erf_matches_series_on_grid() {
        for i in -300..=300 {
            let x = i as f64 / 100.0;
            assert!((erf(x) - erf_series(x)).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_eq!(std_normal_cdf_inv(0.5).unwrap(), 0.0);
        let oracle = 0.5 + density_integral(0.0, 1.96);
        assert!((oracle - 0.975_002_104_851_780).abs() < 1e-12);
        assert!((std_normal_cdf(1.96) - oracle).abs() < 1e-12);
    }

    #[test]
    fn quantile_rejects_endpoints() {
        assert!(std_normal_cdf_inv(0.0).is_err());
        assert!(std_normal_cdf_inv(1.0).is_err());
        assert!(std_normal_cdf_inv(f64::NAN).is_err());
    }

    #[test]
    fn quantile_round_trip_on_probabilities() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let x = std_normal_cdf_inv(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-10, "p = {p}");
        }
        for &p in &[1e-12, 1e-8, 1e-5, 1.0 - 1e-5, 1.0 - 1e-9] {
            let x = std_normal_cdf_inv(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-10, "p = {p}");
        }
    }

    proptest! {
        #[test]
        fn quantile_inverts_cdf(x in -6.0f64..6.0) {
            let back = std_normal_cdf_inv(std_normal_cdf(x)).unwrap();
            prop_assert!((back - x).abs() <= 1e-8, "x = {}, back = {}", x, back);
        }
    }
}

//! Student-t distribution: log-density (training loss), CDF (calibration)
//! and quantile (risk measures).
//!
//! The CDF goes through the regularized incomplete beta function; the
//! quantile inverts it by bisection with a Newton polish to an absolute
//! tolerance of 1e-10.

use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Log-density of the location-scale Student-t:
/// logΓ((ν+1)/2) − logΓ(ν/2) − ½log(νπ) − log σ − ((ν+1)/2)·log(1 + z²/ν)
/// with z = (y−μ)/σ.
pub fn logpdf(y: f64, mu: f64, sigma: f64, nu: f64) -> f64 {
    debug_assert!(sigma > 0.0 && nu > 0.0);
    let z = (y - mu) / sigma;
    ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - sigma.ln()
        - (nu + 1.0) / 2.0 * (1.0 + z * z / nu).ln()
}

/// Density of the standard Student-t.
pub fn pdf(t: f64, nu: f64) -> f64 {
    debug_assert!(nu > 0.0);
    let log_norm =
        ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    (log_norm - (nu + 1.0) / 2.0 * (1.0 + t * t / nu).ln()).exp()
}

/// CDF of the standard Student-t, via the regularized incomplete beta:
/// for t ≥ 0, F(t) = 1 − ½·I_x(ν/2, ½) with x = ν/(ν+t²).
pub fn cdf(t: f64, nu: f64) -> f64 {
    debug_assert!(nu > 0.0);
    let x = nu / (nu + t * t);
    let half_tail = 0.5 * beta_reg(nu / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - half_tail
    } else {
        half_tail
    }
}

/// Quantile (inverse CDF) of the standard Student-t for p in (0, 1).
pub fn quantile(p: f64, nu: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("quantile probability must be in (0,1), got {p}")));
    }
    if !(nu > 0.0) {
        return Err(Error::param("degrees of freedom must be positive"));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        return Ok(-quantile(1.0 - p, nu)?);
    }
    // Bracket [0, hi] with cdf(hi) >= p, then bisect.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut guard = 0;
    while cdf(hi, nu) < p {
        hi *= 2.0;
        guard += 1;
        if guard > 1100 {
            return Err(Error::numerical("failed to bracket t-quantile"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if cdf(mid, nu) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    let mut t = 0.5 * (lo + hi);
    // Newton polish, clamped inside the bracket.
    for _ in 0..4 {
        let f = cdf(t, nu) - p;
        let d = pdf(t, nu);
        if d <= 0.0 {
            break;
        }
        let step = f / d;
        let next = (t - step).clamp(lo, hi);
        if (next - t).abs() < 1e-10 * t.abs().max(1.0) {
            t = next;
            break;
        }
        t = next;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn logpdf_at_center_matches_closed_form() {
        // -logpdf(0; 0, 1, 5) computed from the gamma-function expression.
        assert_abs_diff_eq!(logpdf(0.0, 0.0, 1.0, 5.0), -0.9686195890547242, epsilon = 1e-12);
    }

    #[test]
    fn location_scale_family_relation() {
        let (y, mu, nu) = (1.7, 0.4, 5.0);
        let z = y - mu;
        let lhs = logpdf(y, mu, 2.0, nu);
        let rhs = logpdf(mu + z / 2.0, mu, 1.0, nu) - 2.0f64.ln();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-13);
    }

    #[test]
    fn density_is_symmetric() {
        for a in [0.1, 1.0, 3.7] {
            assert_abs_diff_eq!(
                logpdf(2.0 + a, 2.0, 1.3, 5.0),
                logpdf(2.0 - a, 2.0, 1.3, 5.0),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        // Simpson's rule on [-60, 60]; the excluded t5 tails hold < 1e-6.
        let (a, b, n) = (-60.0f64, 60.0f64, 240_000usize);
        let h = (b - a) / n as f64;
        let mut acc = pdf(a, 5.0) + pdf(b, 5.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * pdf(a + i as f64 * h, 5.0);
        }
        assert_relative_eq!(acc * h / 3.0, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn cdf_basics() {
        assert_abs_diff_eq!(cdf(0.0, 5.0), 0.5, epsilon = 1e-14);
        for t in [0.3, 1.0, 2.5, 7.0] {
            assert_abs_diff_eq!(cdf(-t, 5.0), 1.0 - cdf(t, 5.0), epsilon = 1e-14);
        }
        assert!(cdf(1.0, 5.0) > cdf(0.5, 5.0));
        assert!(cdf(50.0, 5.0) > 0.9999);
    }

    #[test]
    fn quantile_frozen_value() {
        // 95th percentile of t with 5 degrees of freedom.
        let q = quantile(0.95, 5.0).unwrap();
        assert_abs_diff_eq!(q, 2.0150483733330233, epsilon = 1e-9);
        assert_abs_diff_eq!(cdf(q, 5.0), 0.95, epsilon = 1e-12);
    }

    #[test]
    fn quantile_symmetry_and_median() {
        assert_eq!(quantile(0.5, 5.0).unwrap(), 0.0);
        let hi = quantile(0.95, 5.0).unwrap();
        let lo = quantile(0.05, 5.0).unwrap();
        assert_abs_diff_eq!(lo, -hi, epsilon = 1e-12);
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        assert!(quantile(0.0, 5.0).is_err());
        assert!(quantile(1.0, 5.0).is_err());
        assert!(quantile(0.5, 0.0).is_err());
    }

    #[test]
    fn extreme_tails_stay_finite() {
        let q = quantile(1.0 - 1e-9, 5.0).unwrap();
        assert!(q.is_finite() && q > 50.0);
        assert!(logpdf(1e12, 0.0, 1e-6, 5.0).is_finite());
    }

    proptest! {
        #[test]
        fn quantile_inverts_cdf(t in -8.0f64..8.0, nu in prop::sample::select(vec![3.0, 5.0, 10.0])) {
            let p = cdf(t, nu);
            let back = quantile(p, nu).unwrap();
            prop_assert!((back - t).abs() < 1e-8 * t.abs().max(1.0), "{} vs {}", back, t);
        }
    }
}

//! Per-component stochastic up/down-time model.
//!
//! Links alternate between exponential up-times (Poissonian failures) and
//! Pareto down-times. The cited field measurements behind these parameters
//! are not public, so the defaults here are synthetic and configurable:
//! failure intensity scales linearly with link length, downtime shape and
//! scale are drawn per link from documented ranges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{uniform_in, uniform_open_closed};
use crate::topology::Link;

pub const HOURS_PER_YEAR: f64 = 8760.0;

/// Default failure intensity per kilometer of link length, failures/(km·year).
pub const DEFAULT_LAMBDA_PER_KM: f64 = 0.002;
/// Range of the Pareto downtime shape parameter (must stay > 1 so the mean
/// downtime is finite).
pub const DEFAULT_ALPHA_RANGE: (f64, f64) = (1.5, 2.5);
/// Range of the Pareto downtime scale (= minimum downtime), hours.
pub const DEFAULT_BETA_RANGE: (f64, f64) = (0.5, 4.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentReliability {
    /// Failure intensity, failures per year.
    pub lambda_per_year: f64,
    /// Pareto downtime shape; > 1 required.
    pub pareto_alpha: f64,
    /// Pareto downtime scale (minimum downtime), hours.
    pub pareto_beta_h: f64,
}

impl ComponentReliability {
    pub fn new(lambda_per_year: f64, pareto_alpha: f64, pareto_beta_h: f64) -> Result<Self> {
        if !(lambda_per_year > 0.0) {
            return Err(Error::param("lambda_per_year must be positive"));
        }
        if !(pareto_alpha > 1.0) {
            return Err(Error::param("pareto_alpha must exceed 1 (finite mean downtime)"));
        }
        if !(pareto_beta_h > 0.0) {
            return Err(Error::param("pareto_beta_h must be positive"));
        }
        Ok(ComponentReliability { lambda_per_year, pareto_alpha, pareto_beta_h })
    }

    /// Mean downtime αβ/(α−1), hours.
    pub fn mean_downtime_h(&self) -> f64 {
        self.pareto_alpha * self.pareto_beta_h / (self.pareto_alpha - 1.0)
    }

    /// Mean uptime 8760/λ, hours.
    pub fn mean_uptime_h(&self) -> f64 {
        HOURS_PER_YEAR / self.lambda_per_year
    }
}

/// Tunables for [`default_reliability`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityConfig {
    pub lambda_per_km: f64,
    pub alpha_range: (f64, f64),
    pub beta_range_h: (f64, f64),
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        ReliabilityConfig {
            lambda_per_km: DEFAULT_LAMBDA_PER_KM,
            alpha_range: DEFAULT_ALPHA_RANGE,
            beta_range_h: DEFAULT_BETA_RANGE,
        }
    }
}

/// Draws reliability parameters for a link: failure intensity proportional
/// to length, downtime shape/scale uniform in the configured ranges.
pub fn default_reliability(
    link: &Link,
    config: &ReliabilityConfig,
    rng: &mut impl Rng,
) -> ComponentReliability {
    let lambda = config.lambda_per_km * link.length_km;
    let alpha = uniform_in(rng, config.alpha_range.0, config.alpha_range.1);
    let beta = uniform_in(rng, config.beta_range_h.0, config.beta_range_h.1);
    ComponentReliability { lambda_per_year: lambda, pareto_alpha: alpha, pareto_beta_h: beta }
}

/// Exponential up-time sample in hours, by inverse transform −ln(U)/rate.
pub fn sample_uptime(rel: &ComponentReliability, rng: &mut impl Rng) -> f64 {
    let rate_per_hour = rel.lambda_per_year / HOURS_PER_YEAR;
    let u = uniform_open_closed(rng);
    -u.ln() / rate_per_hour
}

/// Pareto (type I) down-time sample in hours: β·U^(−1/α), support [β, ∞).
pub fn sample_downtime(rel: &ComponentReliability, rng: &mut impl Rng) -> f64 {
    let u = uniform_open_closed(rng);
    rel.pareto_beta_h * u.powf(-1.0 / rel.pareto_alpha)
}

/// Long-run fraction of time the component is down, from alternating
/// renewal theory: E[D] / (E[U] + E[D]).
pub fn analytic_unavailability(rel: &ComponentReliability) -> f64 {
    let up = rel.mean_uptime_h();
    let down = rel.mean_downtime_h();
    down / (up + down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    #[test]
    fn lambda_scales_with_length() {
        let link = Link { id: 0, a: 0, b: 1, length_km: 500.0, backup_capacity: 0.0 };
        let mut rng = stream_rng(0, 0);
        let rel = default_reliability(&link, &ReliabilityConfig::default(), &mut rng);
        assert_relative_eq!(rel.lambda_per_year, 1.0);
        assert!(rel.pareto_alpha >= 1.5 && rel.pareto_alpha <= 2.5);
        assert!(rel.pareto_beta_h >= 0.5 && rel.pareto_beta_h <= 4.0);
    }

    #[test]
    fn default_reliability_deterministic() {
        let link = Link { id: 0, a: 0, b: 1, length_km: 123.0, backup_capacity: 0.0 };
        let a = default_reliability(&link, &ReliabilityConfig::default(), &mut stream_rng(5, 2));
        let b = default_reliability(&link, &ReliabilityConfig::default(), &mut stream_rng(5, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn uptime_inverse_transform_endpoints() {
        let rel = ComponentReliability::new(1.0, 2.0, 1.0).unwrap();
        // U = 1 maps to zero uptime, U = e^{-1} maps to exactly one mean.
        let rate = rel.lambda_per_year / HOURS_PER_YEAR;
        assert_eq!(-(1.0f64.ln()) / rate, 0.0);
        assert_relative_eq!(-((-1.0f64).exp().ln()) / rate, 8760.0, max_relative = 1e-12);
    }

    #[test]
    fn uptime_mean_matches_exponential() {
        let rel = ComponentReliability::new(1.0, 2.0, 1.0).unwrap();
        let mut rng = stream_rng(11, 0);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| sample_uptime(&rel, &mut rng)).sum::<f64>() / n as f64;
        assert_relative_eq!(mean, 8760.0, max_relative = 0.01);
    }

    #[test]
    fn downtime_support_and_mean() {
        let rel = ComponentReliability::new(1.0, 2.0, 1.0).unwrap();
        let mut rng = stream_rng(13, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = sample_downtime(&rel, &mut rng);
            assert!(d >= rel.pareto_beta_h);
            sum += d;
        }
        // Pareto mean αβ/(α−1) = 2.0; infinite variance at α=2 makes the
        // sample mean slow, so the band is loose.
        assert_relative_eq!(sum / n as f64, 2.0, max_relative = 0.02);
    }

    #[test]
    fn unavailability_closed_form() {
        let rel = ComponentReliability::new(1.0, 2.0, 4.38).unwrap();
        // E[D] = 8.76 h against E[U] = 8760 h
        assert_relative_eq!(analytic_unavailability(&rel), 8.76 / 8768.76, max_relative = 1e-12);
        assert_relative_eq!(analytic_unavailability(&rel), 9.99e-4, max_relative = 1e-3);
    }

    #[test]
    fn unavailability_vanishes_with_lambda() {
        let rel = ComponentReliability::new(1e-9, 2.0, 4.38).unwrap();
        assert!(analytic_unavailability(&rel) < 1e-11);
    }

    #[test]
    fn unavailability_depends_on_mean_only() {
        let a = ComponentReliability::new(1.0, 2.0, 4.38).unwrap();
        let b = ComponentReliability::new(1.0, 3.0, 5.84).unwrap();
        assert_relative_eq!(a.mean_downtime_h(), b.mean_downtime_h(), max_relative = 1e-12);
        assert_relative_eq!(
            analytic_unavailability(&a),
            analytic_unavailability(&b),
            max_relative = 1e-12
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ComponentReliability::new(0.0, 2.0, 1.0).is_err());
        assert!(ComponentReliability::new(1.0, 1.0, 1.0).is_err());
        assert!(ComponentReliability::new(1.0, 2.0, 0.0).is_err());
    }
}

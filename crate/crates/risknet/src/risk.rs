//! Risk measures on predicted penalty distributions.
//!
//! The surrogate predicts a location-scale Student-t per SLA on normalized
//! penalties. This module turns those into value-at-risk and conditional
//! value-at-risk (closed form), sums per-SLA CVaR into the network-level
//! upper bound, compares model fit against the feature-blind standard-t
//! baseline in bits per SLA, and computes pp-plot calibration curves.
//!
//! Conventions: tail mass `p` means the `(1 − p)` quantile (`p = 0.05` is
//! the 95th percentile), and denormalization back to monetary units is an
//! affine increasing map, so it is applied after the normalized-unit
//! computation.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metagraph::NormStats;
use crate::model::{self, Example, Hyper, Mode, ModelParams, Prediction};
use crate::rng::uniform_open_closed;
use crate::tdist;

fn check_tail_mass(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("tail mass p must be in (0, 1), got {p}")));
    }
    Ok(())
}

/// VaR at tail mass `p` of one normalized prediction: μ + σ·t_quantile(1−p).
pub fn var_normalized(mu: f64, sigma: f64, p: f64, nu: f64) -> Result<f64> {
    check_tail_mass(p)?;
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma must be non-negative"));
    }
    Ok(mu + sigma * tdist::quantile(1.0 - p, nu)?)
}

/// CVaR (expected shortfall) at tail mass `p` of one normalized prediction,
/// in closed form: μ + σ·f_ν(t_q)·(ν + t_q²) / (p·(ν − 1)) with
/// t_q = t_quantile(1 − p). Needs ν > 1 for a finite tail mean.
pub fn cvar_normalized(mu: f64, sigma: f64, p: f64, nu: f64) -> Result<f64> {
    check_tail_mass(p)?;
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma must be non-negative"));
    }
    if !(nu > 1.0) {
        return Err(Error::param("CVaR needs nu > 1 (finite mean)"));
    }
    let t_q = tdist::quantile(1.0 - p, nu)?;
    Ok(mu + sigma * tdist::pdf(t_q, nu) * (nu + t_q * t_q) / (p * (nu - 1.0)))
}

/// Network-level CVaR upper bound: the plain sum of per-SLA CVaRs
/// (CVaR is subadditive, so the sum bounds the total-penalty CVaR).
pub fn network_cvar_bound(cvars: &[f64]) -> f64 {
    cvars.iter().sum()
}

/// Per-SLA VaR/CVaR at tail mass `p`, plus their sum. Values are in
/// monetary units when `norm` is given (z-score inversion applied last),
/// otherwise in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskReport {
    pub p: f64,
    pub var: Vec<f64>,
    pub cvar: Vec<f64>,
    pub network_cvar_bound: f64,
    pub denormalized: bool,
}

pub fn risk_report(
    prediction: &Prediction,
    p: f64,
    nu: f64,
    norm: Option<&NormStats>,
) -> Result<RiskReport> {
    let mut var = Vec::with_capacity(prediction.mu.len());
    let mut cvar = Vec::with_capacity(prediction.mu.len());
    for (&mu, &sigma) in prediction.mu.iter().zip(&prediction.sigma) {
        let v = var_normalized(mu, sigma, p, nu)?;
        let c = cvar_normalized(mu, sigma, p, nu)?;
        match norm {
            Some(norm) => {
                var.push(norm.denormalize_location(v));
                cvar.push(norm.denormalize_location(c));
            }
            None => {
                var.push(v);
                cvar.push(c);
            }
        }
    }
    Ok(RiskReport {
        p,
        network_cvar_bound: network_cvar_bound(&cvar),
        var,
        cvar,
        denormalized: norm.is_some(),
    })
}

/// Mean NLL of the feature-blind baseline — a standard t(ν) on the
/// normalized labels.
pub fn baseline_nll(labels: &[f64], nu: f64) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::param("baseline_nll needs at least one label"));
    }
    let sum: f64 = labels.iter().map(|&y| -tdist::logpdf(y, 0.0, 1.0, nu)).sum();
    let value = sum / labels.len() as f64;
    if !value.is_finite() {
        return Err(Error::numerical("baseline NLL is not finite"));
    }
    Ok(value)
}

/// Description-length saving of the model over the baseline, in bits per
/// SLA-year: (baseline − model NLL) / ln 2.
pub fn information_gain_bits(model_nll: f64, baseline_nll: f64) -> f64 {
    (baseline_nll - model_nll) / std::f64::consts::LN_2
}

/// Calibration curve: nominal quantile levels `q` against the estimated
/// coverage `q_hat` over `n` pooled (example, SLA) entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PPPlotData {
    pub q: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub n: usize,
}

impl PPPlotData {
    pub fn validate(&self) -> Result<()> {
        if self.q.len() != self.q_hat.len() {
            return Err(Error::data("pp-plot grids q and q_hat differ in length"));
        }
        for pair in self.q.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::data("pp-plot grid q must be strictly increasing"));
            }
        }
        if self.q.iter().chain(&self.q_hat).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data("pp-plot values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Worst absolute calibration error max |q̂ − q|.
    pub fn max_abs_deviation(&self) -> f64 {
        self.q
            .iter()
            .zip(&self.q_hat)
            .map(|(q, q_hat)| (q_hat - q).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with header `q,q_hat,n`; the sample count repeats on every row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("q,q_hat,n\n");
        for (q, q_hat) in self.q.iter().zip(&self.q_hat) {
            writeln!(out, "{q},{q_hat},{}", self.n).expect("writing to a String cannot fail");
        }
        out
    }
}

/// The default pp-plot grid {0.01, 0.02, …, 0.99}.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// One pooled calibration entry: an observed label and its predicted
/// location/scale.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationEntry {
    pub label: f64,
    pub mu: f64,
    pub sigma: f64,
}

/// Pooled pp-plot: for every grid level q, `q̂` is the fraction of entries
/// whose label lies strictly below that entry's predicted q-quantile
/// μ + σ·t_quantile(q).
pub fn ppplot(entries: &[CalibrationEntry], grid: &[f64], nu: f64) -> Result<PPPlotData> {
    if entries.is_empty() {
        return Err(Error::param("pp-plot needs at least one entry"));
    }
    let mut q_hat = Vec::with_capacity(grid.len());
    for &q in grid {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::param("pp-plot grid levels must be in (0, 1)"));
        }
        let t_q = tdist::quantile(q, nu)?;
        let below = entries
            .iter()
            .filter(|e| e.label < e.mu + e.sigma * t_q)
            .count();
        q_hat.push(below as f64 / entries.len() as f64);
    }
    let data = PPPlotData { q: grid.to_vec(), q_hat, n: entries.len() };
    data.validate()?;
    Ok(data)
}

/// Pp-plot of a model over a set of examples: runs deterministic inference
/// on each example and pools every (example, SLA) pair.
pub fn ppplot_model(
    params: &ModelParams,
    hyper: &Hyper,
    examples: &[&Example],
    grid: &[f64],
) -> Result<PPPlotData> {
    let entries = model_entries(params, hyper, examples)?;
    ppplot(&entries, grid, hyper.nu)
}

/// Pp-plot of the feature-blind baseline (μ = 0, σ = 1 for every entry)
/// over the same pooled labels.
pub fn ppplot_baseline(examples: &[&Example], grid: &[f64], nu: f64) -> Result<PPPlotData> {
    let entries: Vec<CalibrationEntry> = examples
        .iter()
        .flat_map(|ex| ex.labels.iter().map(|&label| CalibrationEntry { label, mu: 0.0, sigma: 1.0 }))
        .collect();
    ppplot(&entries, grid, nu)
}

fn model_entries(
    params: &ModelParams,
    hyper: &Hyper,
    examples: &[&Example],
) -> Result<Vec<CalibrationEntry>> {
    let mut entries = Vec::new();
    for ex in examples {
        let pred = model::forward(params, hyper, &ex.metagraph, &ex.features, Mode::Eval)?;
        for (k, &label) in ex.labels.iter().enumerate() {
            entries.push(CalibrationEntry { label, mu: pred.mu[k], sigma: pred.sigma[k] });
        }
    }
    Ok(entries)
}

/// Empirical CVaR of a sample at tail mass `p`: the mean of the ⌈p·n⌉
/// largest values.
pub fn empirical_cvar(samples: &[f64], p: f64) -> Result<f64> {
    check_tail_mass(p)?;
    if samples.is_empty() {
        return Err(Error::param("empirical CVaR needs at least one sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("samples must not contain NaN"));
    let k = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Draws one standard Student-t(ν) variate with the polar method:
/// t = √(ν·(U^(−2/ν) − 1))·cos(2πV), U uniform on (0, 1], V on [0, 1).
pub fn sample_standard_t(rng: &mut impl Rng, nu: f64) -> f64 {
    let u = uniform_open_closed(rng);
    let v: f64 = rng.random();
    (nu * (u.powf(-2.0 / nu) - 1.0)).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metagraph::fit_normalizer;
    use crate::provisioning::{
        build_slas, reserve_backup_capacity, ProvisioningConfig, Scenario,
    };
    use crate::reliability::{default_reliability, ReliabilityConfig};
    use crate::rng::{stream_rng, uniform_in};
    use crate::simulator::simulate;
    use crate::topology::{assign_link_lengths, generate_ba, spring_layout};
    use approx::assert_relative_eq;

    /// Frozen oracle: numeric CDF inversion, cross-checked by Monte Carlo.
    const T_QUANTILE_95_NU5: f64 = 2.015_048_373_333_023_3;
    /// Frozen oracle: the closed form evaluated independently,
    /// f₅(t_q)·(5 + t_q²)/(0.05·4) with t_q above.
    const CVAR_5PCT_NU5: f64 = 2.890_128_946_273_074_4;

    #[test]
    fn var_of_standard_t_reproduces_the_frozen_quantile() {
        let v = var_normalized(0.0, 1.0, 0.05, 5.0).unwrap();
        assert_relative_eq!(v, T_QUANTILE_95_NU5, max_relative = 1e-12);
        assert!((v - 2.0150).abs() < 1e-4);
        // Degenerate scale collapses to the location.
        assert_eq!(var_normalized(3.5, 0.0, 0.05, 5.0).unwrap(), 3.5);
    }

    #[test]
    fn cvar_closed_form_matches_frozen_oracle_and_monte_carlo() {
        let c = cvar_normalized(0.0, 1.0, 0.05, 5.0).unwrap();
        assert_relative_eq!(c, CVAR_5PCT_NU5, max_relative = 1e-12);

        // Quick Monte-Carlo cross-check (the 10⁷-sample version runs in
        // the acceptance suite): tail mean of 2·10⁵ standard-t draws.
        let mut rng = stream_rng(404, 0);
        let samples: Vec<f64> = (0..200_000).map(|_| sample_standard_t(&mut rng, 5.0)).collect();
        let mc = empirical_cvar(&samples, 0.05).unwrap();
        // Tail values have heavy dispersion; 3σ of the tail-mean estimate.
        let tail: Vec<f64> = {
            let mut s = samples.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s.truncate((0.05 * samples.len() as f64).ceil() as usize);
            s
        };
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let tail_var =
            tail.iter().map(|x| (x - tail_mean).powi(2)).sum::<f64>() / tail.len() as f64;
        let se = (tail_var / tail.len() as f64).sqrt();
        assert!(
            (mc - c).abs() < 3.0 * se + 1e-3,
            "MC {mc} vs closed form {c} (3σ ≈ {})",
            3.0 * se
        );
    }

    #[test]
    fn cvar_dominates_var_and_is_location_linear() {
        for &p in &[0.01, 0.05, 0.25, 0.5, 0.9] {
            for &mu in &[-2.0, 0.0, 3.0] {
                for &sigma in &[0.05, 1.0, 7.5] {
                    let v = var_normalized(mu, sigma, p, 5.0).unwrap();
                    let c = cvar_normalized(mu, sigma, p, 5.0).unwrap();
                    assert!(c >= v, "CVaR {c} < VaR {v} at p={p} mu={mu} sigma={sigma}");
                }
            }
        }
        let base = cvar_normalized(0.0, 2.0, 0.05, 5.0).unwrap();
        let shifted = cvar_normalized(1.5, 2.0, 0.05, 5.0).unwrap();
        assert_relative_eq!(shifted, base + 1.5, max_relative = 1e-12);
    }

    #[test]
    fn risk_report_denormalizes_last() {
        // Labels 6 and 14 → mean 10, (biased) std 4.
        let features = crate::metagraph::FeatureSet {
            component_features: crate::linalg::Mat::zeros(1, crate::metagraph::N_COMPONENT_FEATURES),
            sla_features: crate::linalg::Mat::zeros(1, crate::metagraph::N_SLA_FEATURES),
        };
        let norm = fit_normalizer(&[&features], &[6.0, 14.0]).unwrap();
        let prediction =
            Prediction { mu: vec![0.0, 0.5], sigma: vec![1.0, 2.0] };

        let normalized = risk_report(&prediction, 0.05, 5.0, None).unwrap();
        let monetary = risk_report(&prediction, 0.05, 5.0, Some(&norm)).unwrap();
        assert!(!normalized.denormalized);
        assert!(monetary.denormalized);
        for k in 0..2 {
            assert_relative_eq!(
                monetary.var[k],
                10.0 + 4.0 * normalized.var[k],
                max_relative = 1e-12
            );
            assert_relative_eq!(
                monetary.cvar[k],
                10.0 + 4.0 * normalized.cvar[k],
                max_relative = 1e-12
            );
            assert!(monetary.cvar[k] >= monetary.var[k]);
        }
        assert_relative_eq!(
            monetary.network_cvar_bound,
            monetary.cvar.iter().sum::<f64>(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn network_bound_is_a_plain_sum() {
        assert_eq!(network_cvar_bound(&[]), 0.0);
        assert_eq!(network_cvar_bound(&[2.5]), 2.5);
        assert_relative_eq!(network_cvar_bound(&[1.0, 2.0, 3.5]), 6.5, max_relative = 1e-15);
    }

    #[test]
    fn empirical_network_cvar_respects_the_subadditive_bound() {
        // 20 random desk-scale scenarios: the empirical CVaR of the yearly
        // network total never exceeds the sum of per-SLA empirical CVaRs.
        for seed in 0..20u64 {
            let topology = generate_ba(10 + (seed as usize % 8), 2, seed).unwrap();
            let positions = spring_layout(&topology, 30, 1000.0, seed ^ 0x5555);
            let topology = assign_link_lengths(topology, &positions).unwrap();
            let provisioning = ProvisioningConfig { pair_fraction: 0.3, xi: 0.1, k_max: 8 };
            let (slas, _) = build_slas(&topology, &provisioning, seed ^ 0xaaaa).unwrap();
            let mut rng = stream_rng(seed ^ 0x1111, 0);
            let config =
                ReliabilityConfig { lambda_per_km: 0.01, ..ReliabilityConfig::default() };
            let reliability = topology
                .links()
                .iter()
                .map(|link| default_reliability(link, &config, &mut rng))
                .collect();
            let scenario = Scenario::new(topology, slas, reliability, None).unwrap();
            let scenario = reserve_backup_capacity(&scenario, 0.6).unwrap();
            let table = simulate(&scenario, 200, seed ^ 0x7777).unwrap();

            let totals: Vec<f64> =
                (0..table.years()).map(|y| table.year(y).iter().sum()).collect();
            let network = empirical_cvar(&totals, 0.05).unwrap();
            let bound: f64 = (0..table.n_slas())
                .map(|k| {
                    let per_sla: Vec<f64> =
                        (0..table.years()).map(|y| table.get(y, k)).collect();
                    empirical_cvar(&per_sla, 0.05).unwrap()
                })
                .sum();
            assert!(
                network <= bound + 1e-9,
                "scenario {seed}: network CVaR {network} exceeds bound {bound}"
            );
        }
    }

    #[test]
    fn baseline_nll_matches_frozen_value_and_penalizes_outliers() {
        let zeros = vec![0.0; 10];
        let frozen = 0.968_619_589_054_724_2;
        assert_relative_eq!(baseline_nll(&zeros, 5.0).unwrap(), frozen, max_relative = 1e-12);

        let calm = baseline_nll(&[0.1, -0.2, 0.3], 5.0).unwrap();
        let spiked = baseline_nll(&[0.1, -0.2, 30.0], 5.0).unwrap();
        assert!(spiked > calm);

        // Means agree under permutation (up to summation rounding).
        let shuffled = baseline_nll(&[0.3, 0.1, -0.2], 5.0).unwrap();
        assert_relative_eq!(calm, shuffled, max_relative = 1e-15);
    }

    #[test]
    fn information_gain_matches_reference_figures() {
        assert_eq!(information_gain_bits(1.5, 1.5), 0.0);
        let bits = information_gain_bits(-1.42, 1.10);
        assert!((bits - 3.64).abs() < 0.01, "got {bits}");
        // Linear in the NLL difference.
        assert_relative_eq!(
            information_gain_bits(0.0, 2.0),
            2.0 * information_gain_bits(0.0, 1.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn ppplot_is_calibrated_on_self_sampled_labels() {
        let mut rng = stream_rng(88, 0);
        let entries: Vec<CalibrationEntry> = (0..20_000)
            .map(|_| {
                let mu = uniform_in(&mut rng, -2.0, 2.0);
                let sigma = uniform_in(&mut rng, 0.2, 3.0);
                let label = mu + sigma * sample_standard_t(&mut rng, 5.0);
                CalibrationEntry { label, mu, sigma }
            })
            .collect();
        let grid = default_grid();
        let data = ppplot(&entries, &grid, 5.0).unwrap();
        data.validate().unwrap();
        for (q, q_hat) in data.q.iter().zip(&data.q_hat) {
            let band = 3.0 * (q * (1.0 - q) / entries.len() as f64).sqrt() + 1e-3;
            assert!(
                (q_hat - q).abs() <= band,
                "q {q}: q_hat {q_hat} outside the binomial band {band}"
            );
        }
        // Nested events: coverage can only grow with q.
        for pair in data.q_hat.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
    }

    #[test]
    fn ppplot_flags_systematic_miscalibration() {
        let mut rng = stream_rng(89, 0);
        // Labels shifted two scales away from the claimed distribution.
        let entries: Vec<CalibrationEntry> = (0..5_000)
            .map(|_| CalibrationEntry {
                label: 2.0 + sample_standard_t(&mut rng, 5.0),
                mu: 0.0,
                sigma: 1.0,
            })
            .collect();
        let data = ppplot(&entries, &default_grid(), 5.0).unwrap();
        assert!(data.max_abs_deviation() > 0.3);
    }

    #[test]
    fn ppplot_grid_and_schema_validation() {
        let entries = [CalibrationEntry { label: 0.0, mu: 0.0, sigma: 1.0 }];
        assert!(ppplot(&entries, &[0.2, 0.2], 5.0).is_err());
        assert!(ppplot(&entries, &[0.0, 0.5], 5.0).is_err());
        assert!(ppplot(&[], &[0.5], 5.0).is_err());

        let data = ppplot(&entries, &[0.25, 0.5, 0.75], 5.0).unwrap();
        let csv = data.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "q,q_hat,n");
        assert_eq!(csv.lines().count(), 4);

        let bad = PPPlotData { q: vec![0.5, 0.4], q_hat: vec![0.1, 0.2], n: 1 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empirical_cvar_takes_the_top_tail_mean() {
        let samples: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        // ⌈0.3·10⌉ = 3 top samples: 10, 9, 8.
        assert_relative_eq!(empirical_cvar(&samples, 0.3).unwrap(), 9.0, max_relative = 1e-15);
        // Smallest tail is a single sample — the maximum.
        assert_eq!(empirical_cvar(&samples, 0.05).unwrap(), 10.0);
        assert!(empirical_cvar(&[], 0.05).is_err());
    }

    #[test]
    fn t_sampler_matches_the_analytic_cdf() {
        let mut rng = stream_rng(90, 0);
        let n = 200_000;
        let samples: Vec<f64> = (0..n).map(|_| sample_standard_t(&mut rng, 5.0)).collect();
        for &t in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
            let expected = tdist::cdf(t, 5.0);
            let observed =
                samples.iter().filter(|&&x| x <= t).count() as f64 / n as f64;
            let band = 3.0 * (expected * (1.0 - expected) / n as f64).sqrt() + 1e-4;
            assert!(
                (observed - expected).abs() <= band,
                "CDF mismatch at {t}: {observed} vs {expected} (band {band})"
            );
        }
    }
}

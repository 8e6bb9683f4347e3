//! Dataset generation and loading for surrogate training.
//!
//! A dataset lives in a directory:
//!
//! ```text
//! <dir>/scenarios/topo-0000.json   one protected-network scenario per topology
//! <dir>/penalties/topo-0000.csv    the simulated per-year, per-SLA penalties
//! <dir>/manifest.json              file index, split assignment, normalization
//! ```
//!
//! Each simulated year of a topology becomes one training example whose label
//! vector holds that year's per-SLA penalties. Splits are assigned per
//! topology — never per year — so no scenario leaks across train/test/
//! validation, and the feature/label normalization is fitted on the train
//! split only.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metagraph::{build_metagraph, extract_features, fit_normalizer, NormStats};
use crate::model::Example;
use crate::provisioning::{
    build_slas, reserve_backup_capacity, ProvisioningConfig, Scenario, ScenarioMeta,
};
use crate::reliability::{default_reliability, ReliabilityConfig};
use crate::rng::{stream_rng, uniform_in};
use crate::simulator::{simulate, PenaltyTable};
use crate::topology::{assign_link_lengths, generate_ba, spring_layout};

/// Schema tag written into every manifest.
pub const MANIFEST_VERSION: &str = "risknet-dataset-1";
/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Which split a topology (and all of its yearly examples) belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        })
    }
}

/// Knobs for [`build_dataset`]. The default is a desk-scale preset that
/// generates in minutes on one CPU core; [`DatasetConfig::paper_scale`]
/// produces the full-size variant.
#[derive(Clone, Debug)]
pub struct DatasetConfig {
    /// Number of random topologies to generate.
    pub n_topologies: usize,
    /// Router count drawn uniformly per topology (inclusive bounds).
    pub router_range: (usize, usize),
    /// Simulated years per topology; each year is one example.
    pub years_per_topology: usize,
    /// Attachment count of the preferential-attachment generator.
    pub ba_m: usize,
    /// Extent of the force-directed layout that sets link lengths.
    pub layout_scale_km: f64,
    /// Iterations of the force-directed layout.
    pub layout_iterations: usize,
    /// Fraction of unordered router pairs that request an SLA.
    pub pair_fraction: f64,
    /// Backup-path capacity margin: backup reservations are `1 + xi` times
    /// the working demand.
    pub xi: f64,
    /// Path-search width for provisioning.
    pub k_max: usize,
    /// Failure/repair model for the generated links.
    pub reliability: ReliabilityConfig,
    /// Shared-backup overbuild factor ρ, drawn uniformly per topology.
    pub rho_range: (f64, f64),
    /// Train/test/validation fractions over topologies; must sum to 1.
    pub split_fractions: (f64, f64, f64),
    /// Wall-clock budget per topology simulation. A topology whose
    /// simulation exceeds it is dropped and recorded in the manifest.
    pub topology_timeout: Option<Duration>,
    /// Master seed; every per-topology seed derives from it.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_topologies: 60,
            router_range: (10, 20),
            years_per_topology: 100,
            ba_m: 2,
            layout_scale_km: 1000.0,
            layout_iterations: 50,
            pair_fraction: 0.25,
            xi: 0.1,
            k_max: 16,
            reliability: ReliabilityConfig::default(),
            rho_range: (0.5, 1.0),
            split_fractions: (0.7, 0.15, 0.15),
            topology_timeout: None,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Full-size preset: 1000 topologies of 10–40 routers, 1000 years each.
    pub fn paper_scale() -> Self {
        DatasetConfig {
            n_topologies: 1000,
            router_range: (10, 40),
            years_per_topology: 1000,
            ..DatasetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_topologies == 0 {
            return Err(Error::param("n_topologies must be positive"));
        }
        let (lo, hi) = self.router_range;
        if lo < 3 || hi > 1000 || lo > hi {
            return Err(Error::param("router_range must satisfy 3 <= lo <= hi <= 1000"));
        }
        if lo < self.ba_m + 1 {
            return Err(Error::param(
                "router_range lower bound must exceed the attachment count m",
            ));
        }
        if self.years_per_topology == 0 {
            return Err(Error::param("years_per_topology must be positive"));
        }
        if !(self.pair_fraction > 0.0 && self.pair_fraction <= 1.0) {
            return Err(Error::param("pair_fraction must be in (0, 1]"));
        }
        if !(self.layout_scale_km > 0.0) {
            return Err(Error::param("layout_scale_km must be positive"));
        }
        let (rlo, rhi) = self.rho_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::param("rho_range must satisfy 0 < lo <= hi"));
        }
        let (a, b, c) = self.split_fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::param("split_fractions must be positive and sum to 1"));
        }
        Ok(())
    }
}

/// One kept topology in the manifest. Paths are relative to the dataset
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub scenario_path: String,
    pub penalties_path: String,
    pub n_routers: usize,
    pub n_slas: usize,
    pub years: usize,
    pub split: Split,
}

/// A topology that was generated but dropped, with the reason. This is the
/// durable log of simulation timeouts and unprovisionable scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkippedTopology {
    pub id: String,
    pub reason: String,
}

/// Index of a generated dataset: file locations, split assignment, and the
/// normalization statistics fitted on the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedTopology>,
    pub norm: NormStats,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::data(format!(
                "unsupported dataset manifest version {:?} (expected {MANIFEST_VERSION:?})",
                m.version
            )));
        }
        Ok(m)
    }

    /// Entries of one split, in manifest order.
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Generates one scenario per topology, simulates it, writes the scenario
/// JSON and penalty CSV files, assigns topology-level splits, fits the
/// normalizer on the train split, and writes `manifest.json`.
///
/// Every per-topology seed is drawn from a master stream of `config.seed`,
/// so reruns with the same config are bitwise identical and each stage
/// (growth, layout, provisioning, reliability, simulation) gets an
/// independent stream.
pub fn build_dataset(config: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(dir.join("scenarios"))?;
    fs::create_dir_all(dir.join("penalties"))?;

    let mut master = stream_rng(config.seed, 0);
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut tables = Vec::new();
    let mut scenarios = Vec::new();

    for index in 0..config.n_topologies {
        // Fixed draw order per topology keeps the master stream aligned even
        // when a topology is later dropped.
        let n_routers = master.random_range(config.router_range.0..=config.router_range.1);
        let rho = uniform_in(&mut master, config.rho_range.0, config.rho_range.1);
        let seed_scenario: u64 = master.random();
        let seed_sim: u64 = master.random();

        let id = format!("topo-{index:04}");
        let gen = ScenarioGenConfig {
            n_routers,
            ba_m: config.ba_m,
            layout_scale_km: config.layout_scale_km,
            layout_iterations: config.layout_iterations,
            pair_fraction: config.pair_fraction,
            xi: config.xi,
            k_max: config.k_max,
            reliability: config.reliability.clone(),
            rho,
        };
        let scenario = match generate_scenario(&gen, seed_scenario) {
            Ok(s) => s,
            Err(reason) => {
                skipped.push(SkippedTopology { id, reason: reason.to_string() });
                continue;
            }
        };

        let start = Instant::now();
        let table = simulate(&scenario, config.years_per_topology, seed_sim)?;
        let elapsed = start.elapsed();
        if let Some(budget) = config.topology_timeout {
            if elapsed > budget {
                skipped.push(SkippedTopology {
                    id,
                    reason: format!(
                        "simulation took {:.3} s, over the {:.3} s budget",
                        elapsed.as_secs_f64(),
                        budget.as_secs_f64()
                    ),
                });
                continue;
            }
        }

        let scenario_path = format!("scenarios/{id}.json");
        let penalties_path = format!("penalties/{id}.csv");
        fs::write(dir.join(&scenario_path), scenario.to_json()?)?;
        fs::write(dir.join(&penalties_path), table.to_csv(false)?)?;
        entries.push(ManifestEntry {
            id,
            scenario_path,
            penalties_path,
            n_routers,
            n_slas: scenario.slas().len(),
            years: table.years(),
            split: Split::Train, // reassigned below
        });
        scenarios.push(scenario);
        tables.push(table);
    }

    if entries.is_empty() {
        return Err(Error::data(format!(
            "no usable topologies: all {} were dropped (first reason: {})",
            config.n_topologies,
            skipped.first().map(|s| s.reason.as_str()).unwrap_or("none")
        )));
    }
    assign_splits(&mut entries, config.split_fractions)?;

    // Normalization statistics come from the train split only.
    let mut train_features = Vec::new();
    let mut train_labels = Vec::new();
    for ((entry, scenario), table) in entries.iter().zip(&scenarios).zip(&tables) {
        if entry.split != Split::Train {
            continue;
        }
        train_features.push(extract_features(scenario));
        for year in 0..table.years() {
            train_labels.extend_from_slice(table.year(year));
        }
    }
    let feature_refs: Vec<_> = train_features.iter().collect();
    let norm = fit_normalizer(&feature_refs, &train_labels)?;

    let manifest =
        Manifest { version: MANIFEST_VERSION.to_string(), seed: config.seed, entries, skipped, norm };
    fs::write(dir.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}

/// Everything needed to generate one random protected scenario.
#[derive(Clone, Debug)]
pub struct ScenarioGenConfig {
    pub n_routers: usize,
    pub ba_m: usize,
    pub layout_scale_km: f64,
    pub layout_iterations: usize,
    pub pair_fraction: f64,
    pub xi: f64,
    pub k_max: usize,
    pub reliability: ReliabilityConfig,
    /// Shared-backup overbuild factor.
    pub rho: f64,
}

impl Default for ScenarioGenConfig {
    fn default() -> Self {
        ScenarioGenConfig {
            n_routers: 16,
            ba_m: 2,
            layout_scale_km: 1000.0,
            layout_iterations: 50,
            pair_fraction: 0.25,
            xi: 0.1,
            k_max: 16,
            reliability: ReliabilityConfig::default(),
            rho: 0.7,
        }
    }
}

/// Grows, lays out, provisions, and capacitates one random scenario. The
/// growth, layout, provisioning, and reliability stages draw their own
/// seeds from `seed` so their streams stay independent.
pub fn generate_scenario(config: &ScenarioGenConfig, seed: u64) -> Result<Scenario> {
    let mut seeder = stream_rng(seed, 0);
    let seed_growth: u64 = seeder.random();
    let seed_layout: u64 = seeder.random();
    let seed_provision: u64 = seeder.random();
    let seed_reliability: u64 = seeder.random();

    let topology = generate_ba(config.n_routers, config.ba_m, seed_growth)?;
    let positions =
        spring_layout(&topology, config.layout_iterations, config.layout_scale_km, seed_layout);
    let topology = assign_link_lengths(topology, &positions)?;

    let provisioning = ProvisioningConfig {
        pair_fraction: config.pair_fraction,
        xi: config.xi,
        k_max: config.k_max,
    };
    let (slas, _unroutable) = build_slas(&topology, &provisioning, seed_provision)?;
    if slas.is_empty() {
        return Err(Error::data("no SLA could be provisioned"));
    }

    let mut rng = stream_rng(seed_reliability, 0);
    let reliability = topology
        .links()
        .iter()
        .map(|link| default_reliability(link, &config.reliability, &mut rng))
        .collect();

    let meta = ScenarioMeta {
        seed,
        pair_fraction: config.pair_fraction,
        xi: config.xi,
        rho: config.rho,
        lambda_per_km: config.reliability.lambda_per_km,
    };
    let scenario = Scenario::new(topology, slas, reliability, Some(meta))?;
    reserve_backup_capacity(&scenario, config.rho)
}

/// Contiguous topology-level split assignment with rounded counts; every
/// split must end up non-empty.
fn assign_splits(entries: &mut [ManifestEntry], fractions: (f64, f64, f64)) -> Result<()> {
    let n = entries.len();
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_test = (n as f64 * fractions.1).round() as usize;
    let n_train = n_train.min(n);
    let n_test = n_test.min(n - n_train);
    let n_val = n - n_train - n_test;
    if n_train == 0 || n_test == 0 || n_val == 0 {
        return Err(Error::data(format!(
            "{n} topologies cannot fill all three splits at fractions {fractions:?}"
        )));
    }
    for (i, entry) in entries.iter_mut().enumerate() {
        entry.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_test {
            Split::Test
        } else {
            Split::Validation
        };
    }
    Ok(())
}

/// A loaded dataset: normalized yearly examples plus their split and source
/// topology, in manifest order (years ascending within a topology).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub examples: Vec<Example>,
    /// Split of each example (inherited from its topology).
    pub example_split: Vec<Split>,
    /// Index into `manifest.entries` for each example.
    pub example_topology: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example indices of one split, ascending.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len()).filter(|&i| self.example_split[i] == split).collect()
    }
}

/// Reads a dataset directory back into memory, normalizing features and
/// labels with the manifest's statistics and cross-checking the files
/// against the manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest = Manifest::from_json(&manifest_text)?;

    let mut examples = Vec::new();
    let mut example_split = Vec::new();
    let mut example_topology = Vec::new();
    for (t, entry) in manifest.entries.iter().enumerate() {
        let scenario = Scenario::from_json(&fs::read_to_string(dir.join(&entry.scenario_path))?)?;
        let table = PenaltyTable::from_csv(&fs::read_to_string(dir.join(&entry.penalties_path))?)?;
        if scenario.slas().len() != entry.n_slas || table.n_slas() != entry.n_slas {
            return Err(Error::data(format!(
                "{}: SLA counts disagree (manifest {}, scenario {}, penalties {})",
                entry.id,
                entry.n_slas,
                scenario.slas().len(),
                table.n_slas()
            )));
        }
        if table.years() != entry.years {
            return Err(Error::data(format!(
                "{}: manifest promises {} years, penalty table has {}",
                entry.id,
                entry.years,
                table.years()
            )));
        }
        let metagraph = build_metagraph(&scenario);
        let features = manifest.norm.normalize_features(&extract_features(&scenario));
        for year in 0..table.years() {
            let labels = manifest.norm.normalize_labels(table.year(year));
            examples.push(Example::new(metagraph.clone(), features.clone(), labels)?);
            example_split.push(entry.split);
            example_topology.push(t);
        }
    }
    Ok(Dataset { manifest, examples, example_split, example_topology })
}

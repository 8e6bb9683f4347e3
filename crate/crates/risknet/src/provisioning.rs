//! SLA construction: router-disjoint working/backup pairs, length-biased
//! pair selection, gravity-style demand volumes and shared backup capacity
//! dimensioning.
//!
//! A scenario bundles a topology with its SLAs and per-link reliability
//! parameters; it is the unit that both the simulator and the surrogate
//! model consume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{disjoint_backup, k_shortest_paths, Path};
use crate::reliability::ComponentReliability;
use crate::rng::{stream_rng, uniform_in};
use crate::topology::{LinkId, RouterId, Topology};
use crate::topology::{LinkJson, TopologyJson};

pub const DEFAULT_XI: f64 = 0.1;
pub const DEFAULT_K_MAX: usize = 16;

/// A protected connection: fixed working path, fixed shared-backup path,
/// and the demand volume whose outage is penalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Sla {
    pub id: usize,
    pub src: RouterId,
    pub dst: RouterId,
    pub demand: f64,
    /// Link ids of the working path, in path order.
    pub working: Vec<LinkId>,
    /// Link ids of the backup path, in path order.
    pub backup: Vec<LinkId>,
}

/// Provenance of a generated scenario, carried along in its JSON form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioMeta {
    pub seed: u64,
    pub pair_fraction: f64,
    pub xi: f64,
    pub rho: f64,
    pub lambda_per_km: f64,
}

/// A topology plus the SLAs provisioned on it and the per-link failure
/// model. Construction validates every structural invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    topology: Topology,
    slas: Vec<Sla>,
    reliability: Vec<ComponentReliability>,
    meta: Option<ScenarioMeta>,
}

impl Scenario {
    pub fn new(
        topology: Topology,
        slas: Vec<Sla>,
        reliability: Vec<ComponentReliability>,
        meta: Option<ScenarioMeta>,
    ) -> Result<Self> {
        if reliability.len() != topology.n_links() {
            return Err(Error::data(format!(
                "reliability entries cover {} links, topology has {}",
                reliability.len(),
                topology.n_links()
            )));
        }
        for (i, sla) in slas.iter().enumerate() {
            if sla.id != i {
                return Err(Error::data(format!(
                    "SLA ids must be dense: expected {i}, got {}",
                    sla.id
                )));
            }
            validate_sla(&topology, sla)?;
        }
        Ok(Scenario { topology, slas, reliability, meta })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn slas(&self) -> &[Sla] {
        &self.slas
    }

    pub fn reliability(&self) -> &[ComponentReliability] {
        &self.reliability
    }

    pub fn meta(&self) -> Option<&ScenarioMeta> {
        self.meta.as_ref()
    }
}

/// Rebuilds the router walk of a path given its link sequence, checking it
/// is simple and connects src to dst.
fn walk(topology: &Topology, src: RouterId, links: &[LinkId]) -> Result<Vec<RouterId>> {
    let mut routers = vec![src];
    let mut cur = src;
    for &l in links {
        let link = topology
            .links()
            .get(l)
            .ok_or_else(|| Error::data(format!("path references unknown link {l}")))?;
        if link.a != cur && link.b != cur {
            return Err(Error::data(format!(
                "link {l} does not continue the path at router {cur}"
            )));
        }
        cur = link.opposite(cur);
        if routers.contains(&cur) {
            return Err(Error::data(format!("path revisits router {cur}")));
        }
        routers.push(cur);
    }
    Ok(routers)
}

fn validate_sla(topology: &Topology, sla: &Sla) -> Result<()> {
    if sla.src == sla.dst {
        return Err(Error::data(format!("SLA {} connects a router to itself", sla.id)));
    }
    if !(sla.demand > 0.0) || !sla.demand.is_finite() {
        return Err(Error::data(format!("SLA {} has non-positive demand", sla.id)));
    }
    if sla.working.is_empty() || sla.backup.is_empty() {
        return Err(Error::data(format!("SLA {} has an empty path", sla.id)));
    }
    let w = walk(topology, sla.src, &sla.working)?;
    let b = walk(topology, sla.src, &sla.backup)?;
    if *w.last().unwrap() != sla.dst || *b.last().unwrap() != sla.dst {
        return Err(Error::data(format!("SLA {} paths do not end at dst", sla.id)));
    }
    for l in &sla.backup {
        if sla.working.contains(l) {
            return Err(Error::data(format!("SLA {} shares link {l} between paths", sla.id)));
        }
    }
    let w_interior = &w[1..w.len() - 1];
    for r in &b[1..b.len() - 1] {
        if w_interior.contains(r) {
            return Err(Error::data(format!(
                "SLA {} backup reuses interior router {r}",
                sla.id
            )));
        }
    }
    Ok(())
}

/// Router-disjoint (working, backup) candidates for one router pair:
/// the first `k_max` working paths in shortest-first order, each with its
/// shortest disjoint backup; workings without any disjoint backup are
/// dropped. Deterministic.
pub fn candidate_pairs(
    topology: &Topology,
    src: RouterId,
    dst: RouterId,
    k_max: usize,
) -> Vec<(Path, Path)> {
    k_shortest_paths(topology, src, dst, k_max)
        .into_iter()
        .filter_map(|w| disjoint_backup(topology, &w).map(|b| (w, b)))
        .collect()
}

/// Draws one candidate with probability proportional to
/// exp(−ξ·(working hops + backup hops)).
pub fn sample_pair<'a>(
    candidates: &'a [(Path, Path)],
    xi: f64,
    rng: &mut impl Rng,
) -> Result<&'a (Path, Path)> {
    if candidates.is_empty() {
        return Err(Error::param("cannot sample from empty candidate set"));
    }
    if xi < 0.0 {
        return Err(Error::param("xi must be non-negative"));
    }
    let weights: Vec<f64> = candidates
        .iter()
        .map(|(w, b)| (-xi * (w.hop_count() + b.hop_count()) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut ticket = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        ticket -= w;
        if ticket < 0.0 {
            return Ok(&candidates[i]);
        }
    }
    Ok(candidates.last().unwrap())
}

/// Gravity demand model: each router gets a size drawn once from
/// Uniform[10(d−1), 10(d+1)] (d = degree); a pair's demand is the product
/// of its endpoint sizes divided by 100.
#[derive(Clone, Debug)]
pub struct DemandModel {
    sizes: Vec<f64>,
}

impl DemandModel {
    pub fn demand(&self, src: RouterId, dst: RouterId) -> f64 {
        self.sizes[src] * self.sizes[dst] / 100.0
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }
}

pub fn assign_demands(topology: &Topology, rng: &mut impl Rng) -> DemandModel {
    let sizes = (0..topology.n_routers())
        .map(|r| {
            let d = topology.degree(r) as f64;
            uniform_in(rng, 10.0 * (d - 1.0), 10.0 * (d + 1.0))
        })
        .collect();
    DemandModel { sizes }
}

/// Knobs for [`build_slas`].
#[derive(Clone, Copy, Debug)]
pub struct ProvisioningConfig {
    /// Fraction of unordered router pairs that get an SLA.
    pub pair_fraction: f64,
    /// Length bias of pair selection; larger prefers shorter pairs.
    pub xi: f64,
    /// Working-path enumeration cap per pair.
    pub k_max: usize,
}

impl Default for ProvisioningConfig {
    fn default() -> Self {
        ProvisioningConfig { pair_fraction: 1.0, xi: DEFAULT_XI, k_max: DEFAULT_K_MAX }
    }
}

/// Provisions SLAs over every unordered router pair (subsampled at
/// `pair_fraction`). Pairs without any disjoint candidate pair are skipped;
/// the second return value counts them.
///
/// Randomness is split into per-purpose streams of `seed`, so the result
/// is independent of evaluation order: stream 0 drives router sizes,
/// stream 1 the subsampling coin flips, stream 2+i the path choice of
/// pair index i = src·n + dst.
pub fn build_slas(
    topology: &Topology,
    config: &ProvisioningConfig,
    seed: u64,
) -> Result<(Vec<Sla>, usize)> {
    if !(config.pair_fraction > 0.0 && config.pair_fraction <= 1.0) {
        return Err(Error::param("pair_fraction must be in (0, 1]"));
    }
    let n = topology.n_routers();
    let demands = assign_demands(topology, &mut stream_rng(seed, 0));
    let mut subsample = stream_rng(seed, 1);
    let mut slas = Vec::new();
    let mut skipped = 0usize;
    for src in 0..n {
        for dst in (src + 1)..n {
            let keep = subsample.random::<f64>() < config.pair_fraction;
            if !keep {
                continue;
            }
            let candidates = candidate_pairs(topology, src, dst, config.k_max);
            if candidates.is_empty() {
                skipped += 1;
                continue;
            }
            let mut pair_rng = stream_rng(seed, 2 + (src * n + dst) as u64);
            let (w, b) = sample_pair(&candidates, config.xi, &mut pair_rng)?;
            let demand = demands.demand(src, dst);
            if !(demand > 0.0) {
                skipped += 1;
                continue;
            }
            slas.push(Sla {
                id: slas.len(),
                src,
                dst,
                demand,
                working: w.links.clone(),
                backup: b.links.clone(),
            });
        }
    }
    Ok((slas, skipped))
}

/// Shared-backup dimensioning: each link's backup capacity is set to
/// ρ · max over single-link failures f of the demand sum of SLAs whose
/// working path contains f and whose backup path contains the link.
/// With ρ = 1 every isolated single failure is fully protected; ρ < 1
/// induces contention.
pub fn reserve_backup_capacity(scenario: &Scenario, rho: f64) -> Result<Scenario> {
    if !(rho > 0.0) {
        return Err(Error::param("rho must be positive"));
    }
    let n_links = scenario.topology().n_links();
    // need[f][l]: backup demand appearing on link l when link f fails alone
    let mut need = vec![0.0f64; n_links * n_links];
    for sla in scenario.slas() {
        for &f in &sla.working {
            for &l in &sla.backup {
                need[f * n_links + l] += sla.demand;
            }
        }
    }
    let mut topology = scenario.topology().clone();
    for l in 0..n_links {
        let worst = (0..n_links)
            .map(|f| need[f * n_links + l])
            .fold(0.0f64, f64::max);
        topology.set_backup_capacity(l, rho * worst);
    }
    Scenario::new(topology, scenario.slas().to_vec(), scenario.reliability().to_vec(), scenario.meta().copied())
}

// --- JSON serialization (strict schema, extends the topology schema) ---

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlaJson {
    id: usize,
    src: usize,
    dst: usize,
    demand: f64,
    working: Vec<usize>,
    backup: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReliabilityJson {
    link: usize,
    lambda_per_year: f64,
    pareto_alpha: f64,
    pareto_beta_h: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioJson {
    routers: usize,
    links: Vec<LinkJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<[f64; 2]>>,
    slas: Vec<SlaJson>,
    reliability: Vec<ReliabilityJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<ScenarioMeta>,
}

impl Scenario {
    pub fn to_json(&self) -> Result<String> {
        let topo = TopologyJson::from(&self.topology);
        let j = ScenarioJson {
            routers: topo.routers,
            links: topo.links,
            positions: topo.positions,
            slas: self
                .slas
                .iter()
                .map(|s| SlaJson {
                    id: s.id,
                    src: s.src,
                    dst: s.dst,
                    demand: s.demand,
                    working: s.working.clone(),
                    backup: s.backup.clone(),
                })
                .collect(),
            reliability: self
                .reliability
                .iter()
                .enumerate()
                .map(|(i, r)| ReliabilityJson {
                    link: i,
                    lambda_per_year: r.lambda_per_year,
                    pareto_alpha: r.pareto_alpha,
                    pareto_beta_h: r.pareto_beta_h,
                })
                .collect(),
            meta: self.meta,
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: ScenarioJson = serde_json::from_str(text)?;
        let topology = Topology::try_from(TopologyJson {
            routers: j.routers,
            links: j.links,
            positions: j.positions,
        })?;
        let mut reliability = vec![None; topology.n_links()];
        for r in j.reliability {
            let slot = reliability
                .get_mut(r.link)
                .ok_or_else(|| Error::data(format!("reliability references unknown link {}", r.link)))?;
            if slot.is_some() {
                return Err(Error::data(format!("duplicate reliability entry for link {}", r.link)));
            }
            *slot = Some(ComponentReliability::new(
                r.lambda_per_year,
                r.pareto_alpha,
                r.pareto_beta_h,
            )?);
        }
        let reliability: Vec<ComponentReliability> = reliability
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::data(format!("missing reliability entry for link {i}"))))
            .collect::<Result<_>>()?;
        let slas = j
            .slas
            .into_iter()
            .map(|s| Sla {
                id: s.id,
                src: s.src,
                dst: s.dst,
                demand: s.demand,
                working: s.working,
                backup: s.backup,
            })
            .collect();
        Scenario::new(topology, slas, reliability, j.meta)
    }
}

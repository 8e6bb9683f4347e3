//! Discrete-event ground-truth simulator: alternating link failures and
//! repairs under shared backup path protection, priced into per-SLA annual
//! penalties.
//!
//! Protection is revertive: an SLA returns to its working path the moment
//! the path is whole again and releases its backup allocation immediately.
//! Contention for shared backup capacity is resolved in ascending SLA id
//! order with no preemption. Penalty accrues while an SLA is down, at
//! demand × rate per hour, split exactly at year boundaries.
//!
//! Simulated years are partitioned into fixed-size blocks, each driven by
//! its own rng stream and merged in order, so results are bitwise
//! independent of how many threads run the blocks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::provisioning::Scenario;
use crate::reliability::{sample_downtime, sample_uptime, HOURS_PER_YEAR};
use crate::rng::{stream_rng, StreamRng};
use crate::topology::LinkId;

/// Event kinds; the declaration order makes `Repair` sort before `Fail`
/// at equal timestamps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Repair,
    Fail,
}

#[derive(Clone, Copy, Debug)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub component: LinkId,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.kind.cmp(&other.kind))
            .then_with(|| self.component.cmp(&other.component))
    }
}

/// Simulator knobs. `block_years` fixes the parallel work partition and is
/// part of the deterministic contract: changing it changes the sampled
/// trajectories (but never the statistics), changing thread counts never
/// changes anything.
#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    pub block_years: usize,
    /// Penalty accrual rate per demand unit per hour of downtime.
    pub rate_per_unit_hour: f64,
    /// Re-derive the allocation bookkeeping from scratch after every event
    /// and fail loudly on drift. Costs about as much as the event handling
    /// itself, so it is off by default and enabled by tests.
    pub check_invariants: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { block_years: 50, rate_per_unit_hour: 1.0, check_invariants: false }
    }
}

/// Dense per-year, per-SLA penalty matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTable {
    years: usize,
    n_slas: usize,
    values: Vec<f64>,
}

impl PenaltyTable {
    pub fn zeros(years: usize, n_slas: usize) -> Self {
        PenaltyTable { years, n_slas, values: vec![0.0; years * n_slas] }
    }

    pub fn years(&self) -> usize {
        self.years
    }

    pub fn n_slas(&self) -> usize {
        self.n_slas
    }

    pub fn get(&self, year: usize, sla: usize) -> f64 {
        self.values[year * self.n_slas + sla]
    }

    fn add(&mut self, year: usize, sla: usize, amount: f64) {
        self.values[year * self.n_slas + sla] += amount;
    }

    /// Penalties of one year, SLA-indexed.
    pub fn year(&self, year: usize) -> &[f64] {
        &self.values[year * self.n_slas..(year + 1) * self.n_slas]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// CSV export: header `year,sla_id,penalty`, one row per nonzero cell
    /// (or every cell when `dense`), and a `# years=.. slas=.. rows=..`
    /// footer.
    pub fn to_csv(&self, dense: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["year", "sla_id", "penalty"])?;
        let mut rows = 0usize;
        for y in 0..self.years {
            for k in 0..self.n_slas {
                let v = self.get(y, k);
                if dense || v != 0.0 {
                    w.write_record([y.to_string(), k.to_string(), v.to_string()])?;
                    rows += 1;
                }
            }
        }
        let mut out = String::from_utf8(w.into_inner().map_err(|e| Error::data(e.to_string()))?)
            .expect("csv output is utf-8");
        out.push_str(&format!("# years={} slas={} rows={rows}\n", self.years, self.n_slas));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let footer_start = text
            .trim_end()
            .rfind('\n')
            .map(|i| i + 1)
            .unwrap_or(0);
        let footer = text[footer_start..].trim_end();
        let (years, n_slas, rows) = parse_footer(footer)?;
        let mut table = PenaltyTable::zeros(years, n_slas);
        let mut seen = 0usize;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text[..footer_start].as_bytes());
        {
            let headers = reader.headers()?;
            if headers != vec!["year", "sla_id", "penalty"] {
                return Err(Error::data(format!("unexpected penalty CSV header: {headers:?}")));
            }
        }
        for record in reader.records() {
            let record = record?;
            let parse =
                |i: usize| -> Result<&str> {
                    record.get(i).ok_or_else(|| Error::data("short penalty CSV row"))
                };
            let year: usize = parse(0)?
                .parse()
                .map_err(|_| Error::data("bad year in penalty CSV"))?;
            let sla: usize = parse(1)?
                .parse()
                .map_err(|_| Error::data("bad sla_id in penalty CSV"))?;
            let penalty: f64 = parse(2)?
                .parse()
                .map_err(|_| Error::data("bad penalty in penalty CSV"))?;
            if year >= years || sla >= n_slas {
                return Err(Error::data(format!("penalty CSV cell ({year},{sla}) out of range")));
            }
            if !(penalty >= 0.0) {
                return Err(Error::data("negative penalty in CSV"));
            }
            table.values[year * n_slas + sla] = penalty;
            seen += 1;
        }
        if seen != rows {
            return Err(Error::data(format!(
                "penalty CSV footer promises {rows} rows, found {seen}"
            )));
        }
        Ok(table)
    }
}

fn parse_footer(line: &str) -> Result<(usize, usize, usize)> {
    let body = line
        .strip_prefix("# ")
        .ok_or_else(|| Error::data("penalty CSV is missing its footer line"))?;
    let mut years = None;
    let mut slas = None;
    let mut rows = None;
    for part in body.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::data(format!("bad footer field: {part}")))?;
        let value: usize =
            value.parse().map_err(|_| Error::data(format!("bad footer value: {part}")))?;
        match key {
            "years" => years = Some(value),
            "slas" => slas = Some(value),
            "rows" => rows = Some(value),
            _ => return Err(Error::data(format!("unknown footer field: {key}"))),
        }
    }
    match (years, slas, rows) {
        (Some(y), Some(s), Some(r)) => Ok((y, s, r)),
        _ => Err(Error::data("incomplete penalty CSV footer")),
    }
}

/// Full simulation output: the penalty table plus per-component downtime
/// tallies (for validation against renewal theory).
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub penalties: PenaltyTable,
    pub component_down_hours: Vec<f64>,
    pub simulated_hours: f64,
}

impl SimOutput {
    pub fn empirical_unavailability(&self, link: LinkId) -> f64 {
        self.component_down_hours[link] / self.simulated_hours
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pos {
    OnWorking,
    OnBackup,
    Down,
}

/// Event-processing core shared by the random driver and schedule replay.
struct Engine<'a> {
    scenario: &'a Scenario,
    rate: f64,
    check_invariants: bool,
    component_up: Vec<bool>,
    went_down_at: Vec<f64>,
    down_hours: Vec<f64>,
    allocations: Vec<f64>,
    pos: Vec<Pos>,
    down_since: Vec<f64>,
    pending: Vec<bool>,
    penalties: PenaltyTable,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario, years: usize, config: &SimConfig) -> Self {
        let n_links = scenario.topology().n_links();
        let n_slas = scenario.slas().len();
        Engine {
            scenario,
            rate: config.rate_per_unit_hour,
            check_invariants: config.check_invariants,
            component_up: vec![true; n_links],
            went_down_at: vec![0.0; n_links],
            down_hours: vec![0.0; n_links],
            allocations: vec![0.0; n_links],
            pos: vec![Pos::OnWorking; n_slas],
            down_since: vec![0.0; n_slas],
            pending: vec![false; n_slas],
            penalties: PenaltyTable::zeros(years, n_slas),
        }
    }

    fn working_up(&self, k: usize) -> bool {
        self.scenario.slas()[k].working.iter().all(|&l| self.component_up[l])
    }

    fn backup_up(&self, k: usize) -> bool {
        self.scenario.slas()[k].backup.iter().all(|&l| self.component_up[l])
    }

    fn release(&mut self, k: usize) {
        let sla = &self.scenario.slas()[k];
        for &l in &sla.backup {
            self.allocations[l] -= sla.demand;
        }
    }

    fn allocate(&mut self, k: usize) {
        let sla = &self.scenario.slas()[k];
        for &l in &sla.backup {
            self.allocations[l] += sla.demand;
        }
    }

    fn backup_has_room(&self, k: usize) -> bool {
        let sla = &self.scenario.slas()[k];
        sla.backup.iter().all(|&l| {
            self.component_up[l]
                && self.scenario.topology().link(l).backup_capacity - self.allocations[l]
                    >= sla.demand
        })
    }

    /// Books the penalty of a closed down interval, split at year bounds.
    fn accrue(&mut self, k: usize, from: f64, to: f64) {
        let demand = self.scenario.slas()[k].demand;
        let mut t = from;
        while t < to {
            let year = (t / HOURS_PER_YEAR) as usize;
            let seg_end = to.min((year + 1) as f64 * HOURS_PER_YEAR);
            self.penalties.add(year, k, demand * self.rate * (seg_end - t));
            t = seg_end;
        }
    }

    /// Re-resolves every SLA after a component changed state at time `now`.
    ///
    /// 1. Working path whole → OnWorking, releasing any allocation.
    /// 2. OnBackup SLAs whose backup broke release and rejoin the queue.
    /// 3. Queued SLAs (ascending id): allocate if the whole backup is up
    ///    with room for the demand on every link, else Down. Intact
    ///    OnBackup SLAs are never preempted.
    fn resolve(&mut self, now: f64) {
        let n_slas = self.scenario.slas().len();
        for k in 0..n_slas {
            if self.working_up(k) {
                match self.pos[k] {
                    Pos::OnWorking => {}
                    Pos::OnBackup => {
                        self.release(k);
                        self.pos[k] = Pos::OnWorking;
                    }
                    Pos::Down => {
                        let since = self.down_since[k];
                        self.accrue(k, since, now);
                        self.pos[k] = Pos::OnWorking;
                    }
                }
            }
        }
        for k in 0..n_slas {
            self.pending[k] =
                !self.working_up(k) && self.pos[k] == Pos::OnBackup && !self.backup_up(k);
            if self.pending[k] {
                self.release(k);
            }
        }
        for k in 0..n_slas {
            if self.working_up(k) {
                continue;
            }
            if self.pos[k] == Pos::OnBackup && !self.pending[k] {
                continue; // keeps its allocation
            }
            if self.backup_has_room(k) {
                self.allocate(k);
                if self.pos[k] == Pos::Down {
                    let since = self.down_since[k];
                    self.accrue(k, since, now);
                }
                self.pos[k] = Pos::OnBackup;
            } else {
                if self.pos[k] != Pos::Down {
                    self.down_since[k] = now;
                    self.pos[k] = Pos::Down;
                }
            }
        }
        if self.check_invariants {
            self.check_capacity_conservation();
        }
    }

    fn check_capacity_conservation(&self) {
        let n_links = self.scenario.topology().n_links();
        let mut used = vec![0.0f64; n_links];
        for (k, sla) in self.scenario.slas().iter().enumerate() {
            if self.pos[k] == Pos::OnBackup {
                for &l in &sla.backup {
                    used[l] += sla.demand;
                }
            }
        }
        for l in 0..n_links {
            assert!(
                (used[l] - self.allocations[l]).abs() < 1e-9,
                "allocation bookkeeping out of sync on link {l}"
            );
            assert!(
                used[l] <= self.scenario.topology().link(l).backup_capacity + 1e-9,
                "backup capacity exceeded on link {l}"
            );
        }
    }

    fn apply(&mut self, event: &Event) -> Result<()> {
        let l = event.component;
        if l >= self.component_up.len() {
            return Err(Error::param(format!("event references unknown link {l}")));
        }
        match event.kind {
            EventKind::Fail => {
                if !self.component_up[l] {
                    return Err(Error::param(format!("link {l} fails while already down")));
                }
                self.component_up[l] = false;
                self.went_down_at[l] = event.time;
            }
            EventKind::Repair => {
                if self.component_up[l] {
                    return Err(Error::param(format!("link {l} repaired while up")));
                }
                self.component_up[l] = true;
                self.down_hours[l] += event.time - self.went_down_at[l];
            }
        }
        self.resolve(event.time);
        Ok(())
    }

    /// Closes the books at the horizon: open down intervals of SLAs and
    /// components are accounted up to `horizon` hours.
    fn finish(mut self, horizon: f64) -> SimOutput {
        for k in 0..self.scenario.slas().len() {
            if self.pos[k] == Pos::Down {
                let since = self.down_since[k];
                self.accrue(k, since, horizon);
            }
        }
        for l in 0..self.component_up.len() {
            if !self.component_up[l] {
                self.down_hours[l] += horizon - self.went_down_at[l];
            }
        }
        SimOutput {
            penalties: self.penalties,
            component_down_hours: self.down_hours,
            simulated_hours: horizon,
        }
    }
}

fn simulate_block(scenario: &Scenario, config: &SimConfig, years: usize, rng: &mut StreamRng) -> SimOutput {
    let horizon = years as f64 * HOURS_PER_YEAR;
    let mut engine = Engine::new(scenario, years, config);
    let reliability = scenario.reliability();
    let mut heap: BinaryHeap<std::cmp::Reverse<Event>> = BinaryHeap::new();
    for (l, rel) in reliability.iter().enumerate() {
        let t = sample_uptime(rel, rng);
        heap.push(std::cmp::Reverse(Event { time: t, kind: EventKind::Fail, component: l }));
    }
    while let Some(std::cmp::Reverse(event)) = heap.pop() {
        if event.time >= horizon {
            break;
        }
        let rel = &reliability[event.component];
        let next = match event.kind {
            EventKind::Fail => Event {
                time: event.time + sample_downtime(rel, rng),
                kind: EventKind::Repair,
                component: event.component,
            },
            EventKind::Repair => Event {
                time: event.time + sample_uptime(rel, rng),
                kind: EventKind::Fail,
                component: event.component,
            },
        };
        heap.push(std::cmp::Reverse(next));
        engine
            .apply(&event)
            .expect("sampled event sequences alternate by construction");
    }
    engine.finish(horizon)
}

/// Simulates `years` of operation and returns penalties plus component
/// downtime tallies. Years are split into `config.block_years`-sized
/// blocks, each with rng stream = its block index over `seed`; blocks run
/// in parallel on the ambient rayon pool and merge in block order, so the
/// result is bitwise identical for any thread count.
pub fn simulate_with(
    scenario: &Scenario,
    years: usize,
    seed: u64,
    config: &SimConfig,
) -> Result<SimOutput> {
    if years == 0 {
        return Err(Error::param("simulation needs at least one year"));
    }
    if config.block_years == 0 {
        return Err(Error::param("block_years must be positive"));
    }
    if !(config.rate_per_unit_hour > 0.0) {
        return Err(Error::param("rate_per_unit_hour must be positive"));
    }
    let n_blocks = years.div_ceil(config.block_years);
    let blocks: Vec<SimOutput> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let block_years = config.block_years.min(years - b * config.block_years);
            let mut rng = stream_rng(seed, b as u64);
            simulate_block(scenario, config, block_years, &mut rng)
        })
        .collect();

    let n_slas = scenario.slas().len();
    let n_links = scenario.topology().n_links();
    let mut penalties = PenaltyTable::zeros(years, n_slas);
    let mut down_hours = vec![0.0f64; n_links];
    let mut year_offset = 0;
    for block in blocks {
        for y in 0..block.penalties.years() {
            for k in 0..n_slas {
                let v = block.penalties.get(y, k);
                if v != 0.0 {
                    penalties.add(year_offset + y, k, v);
                }
            }
        }
        for l in 0..n_links {
            down_hours[l] += block.component_down_hours[l];
        }
        year_offset += block.penalties.years();
    }
    Ok(SimOutput {
        penalties,
        component_down_hours: down_hours,
        simulated_hours: years as f64 * HOURS_PER_YEAR,
    })
}

/// [`simulate_with`] under the default configuration, penalties only.
pub fn simulate(scenario: &Scenario, years: usize, seed: u64) -> Result<PenaltyTable> {
    Ok(simulate_with(scenario, years, seed, &SimConfig::default())?.penalties)
}

/// Replays a hand-constructed event schedule (sorted by the event order;
/// fails and repairs must alternate per link, starting from all-up).
/// The horizon is rounded up to whole years for penalty bookkeeping.
pub fn replay(scenario: &Scenario, events: &[Event], horizon_hours: f64) -> Result<SimOutput> {
    replay_with(scenario, events, horizon_hours, &SimConfig::default())
}

pub fn replay_with(
    scenario: &Scenario,
    events: &[Event],
    horizon_hours: f64,
    config: &SimConfig,
) -> Result<SimOutput> {
    if !(horizon_hours > 0.0) {
        return Err(Error::param("horizon must be positive"));
    }
    let years = (horizon_hours / HOURS_PER_YEAR).ceil() as usize;
    let mut engine = Engine::new(scenario, years, config);
    for (i, event) in events.iter().enumerate() {
        if !(event.time >= 0.0) || event.time >= horizon_hours {
            return Err(Error::param(format!("event {i} outside [0, horizon)")));
        }
        if i > 0 && events[i - 1].cmp(event) == Ordering::Greater {
            return Err(Error::param(format!("event {i} out of order")));
        }
        engine.apply(event)?;
    }
    Ok(engine.finish(horizon_hours))
}

//! Network topologies: random Barabási–Albert generation, spring layout,
//! geometric link lengths and a strict JSON serialization.
//!
//! A topology is an undirected simple connected graph of routers joined by
//! failable links. Routers are dense integers, links carry a length (which
//! drives the failure intensity) and the backup capacity reserved on them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, uniform_in};

pub type RouterId = usize;
pub type LinkId = usize;

/// Per-router planar coordinates, indexed by `RouterId`.
pub type LayoutPositions = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub id: LinkId,
    pub a: RouterId,
    pub b: RouterId,
    pub length_km: f64,
    pub backup_capacity: f64,
}

impl Link {
    /// The other endpoint, given one of the two.
    pub fn opposite(&self, r: RouterId) -> RouterId {
        if r == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    n_routers: usize,
    links: Vec<Link>,
    adjacency: Vec<Vec<(RouterId, LinkId)>>,
    positions: Option<LayoutPositions>,
}

impl Topology {
    /// Builds and validates a topology from explicit links.
    ///
    /// Rejects self-loops, duplicate undirected pairs, non-positive lengths,
    /// dangling router ids, disconnected graphs and link ids that are not
    /// the dense sequence `0..links.len()`.
    pub fn new(n_routers: usize, links: Vec<Link>) -> Result<Self> {
        if n_routers == 0 {
            return Err(Error::param("topology needs at least one router"));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, link) in links.iter().enumerate() {
            if link.id != i {
                return Err(Error::param(format!(
                    "link ids must be dense: expected {i}, got {}",
                    link.id
                )));
            }
            if link.a == link.b {
                return Err(Error::param(format!("link {i} is a self-loop")));
            }
            if link.a >= n_routers || link.b >= n_routers {
                return Err(Error::param(format!("link {i} references unknown router")));
            }
            if !(link.length_km > 0.0) || !link.length_km.is_finite() {
                return Err(Error::param(format!("link {i} has non-positive length")));
            }
            if !(link.backup_capacity >= 0.0) || !link.backup_capacity.is_finite() {
                return Err(Error::param(format!("link {i} has negative backup capacity")));
            }
            let key = (link.a.min(link.b), link.a.max(link.b));
            if !seen.insert(key) {
                return Err(Error::param(format!(
                    "duplicate link between routers {} and {}",
                    key.0, key.1
                )));
            }
        }
        let mut adjacency = vec![Vec::new(); n_routers];
        for link in &links {
            adjacency[link.a].push((link.b, link.id));
            adjacency[link.b].push((link.a, link.id));
        }
        let topo = Topology { n_routers, links, adjacency, positions: None };
        if !topo.is_connected() {
            return Err(Error::param("topology is not connected"));
        }
        Ok(topo)
    }

    /// Convenience constructor: unit-length links, no backup capacity.
    pub fn from_edges(n_routers: usize, edges: &[(RouterId, RouterId)]) -> Result<Self> {
        let links = edges
            .iter()
            .enumerate()
            .map(|(id, &(a, b))| Link { id, a, b, length_km: 1.0, backup_capacity: 0.0 })
            .collect();
        Topology::new(n_routers, links)
    }

    pub fn n_routers(&self) -> usize {
        self.n_routers
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    /// Neighbors of `r` as `(router, connecting link)` pairs.
    pub fn neighbors(&self, r: RouterId) -> &[(RouterId, LinkId)] {
        &self.adjacency[r]
    }

    pub fn degree(&self, r: RouterId) -> usize {
        self.adjacency[r].len()
    }

    pub fn positions(&self) -> Option<&LayoutPositions> {
        self.positions.as_ref()
    }

    pub fn set_backup_capacity(&mut self, id: LinkId, capacity: f64) {
        self.links[id].backup_capacity = capacity;
    }

    fn is_connected(&self) -> bool {
        let mut visited = vec![false; self.n_routers];
        let mut stack = vec![0];
        visited[0] = true;
        let mut count = 1;
        while let Some(r) = stack.pop() {
            for &(next, _) in &self.adjacency[r] {
                if !visited[next] {
                    visited[next] = true;
                    count += 1;
                    stack.push(next);
                }
            }
        }
        count == self.n_routers
    }
}

/// Generates a connected Barabási–Albert graph.
///
/// The seed graph is a complete graph on `m + 1` routers; every later
/// router attaches to `m` distinct existing routers drawn with probability
/// proportional to their current degree (repeated draws, duplicates
/// rejected). Requires `m >= 2`, which guarantees router-disjoint
/// working/backup pairs exist for any router pair.
pub fn generate_ba(n_routers: usize, m: usize, seed: u64) -> Result<Topology> {
    if m < 2 {
        return Err(Error::param("attachment count m must be at least 2"));
    }
    if n_routers < m + 1 {
        return Err(Error::param(format!(
            "need at least m+1 = {} routers, got {n_routers}",
            m + 1
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let mut edges: Vec<(RouterId, RouterId)> = Vec::new();
    let mut degree = vec![0usize; n_routers];

    // seed clique
    for a in 0..=m {
        for b in (a + 1)..=m {
            edges.push((a, b));
            degree[a] += 1;
            degree[b] += 1;
        }
    }

    let mut total_degree: usize = degree.iter().sum();
    for u in (m + 1)..n_routers {
        let mut chosen: Vec<RouterId> = Vec::with_capacity(m);
        while chosen.len() < m {
            let mut ticket = uniform_in(&mut rng, 0.0, total_degree as f64);
            // Fallback covers the floating-point corner where the ticket
            // lands exactly on the total degree.
            let mut target = u - 1;
            for (r, &d) in degree.iter().enumerate().take(u) {
                ticket -= d as f64;
                if ticket < 0.0 {
                    target = r;
                    break;
                }
            }
            if !chosen.contains(&target) {
                chosen.push(target);
            }
        }
        for &t in &chosen {
            edges.push((t, u));
            degree[t] += 1;
            degree[u] += 1;
            total_degree += 2;
        }
    }
    Topology::from_edges(n_routers, &edges)
}

/// Fruchterman–Reingold force-directed layout, affinely rescaled so the
/// bounding-box diagonal equals `scale_km`.
pub fn spring_layout(
    topology: &Topology,
    iterations: usize,
    scale_km: f64,
    seed: u64,
) -> LayoutPositions {
    let n = topology.n_routers();
    let mut rng = stream_rng(seed, 0);
    let mut pos: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    if n == 1 {
        return vec![(0.0, 0.0)];
    }

    let k = (1.0 / n as f64).sqrt();
    let t0 = 0.1;
    for it in 0..iterations {
        let temp = t0 * (1.0 - it as f64 / iterations.max(1) as f64);
        let mut disp = vec![(0.0f64, 0.0f64); n];
        // repulsion between all pairs
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = pos[i].0 - pos[j].0;
                let dy = pos[i].1 - pos[j].1;
                let d = (dx * dx + dy * dy).sqrt().max(1e-9);
                let f = k * k / d;
                let (ux, uy) = (dx / d, dy / d);
                disp[i].0 += ux * f;
                disp[i].1 += uy * f;
                disp[j].0 -= ux * f;
                disp[j].1 -= uy * f;
            }
        }
        // attraction along links
        for link in topology.links() {
            let (i, j) = (link.a, link.b);
            let dx = pos[i].0 - pos[j].0;
            let dy = pos[i].1 - pos[j].1;
            let d = (dx * dx + dy * dy).sqrt().max(1e-9);
            let f = d * d / k;
            let (ux, uy) = (dx / d, dy / d);
            disp[i].0 -= ux * f;
            disp[i].1 -= uy * f;
            disp[j].0 += ux * f;
            disp[j].1 += uy * f;
        }
        for i in 0..n {
            let (dx, dy) = disp[i];
            let d = (dx * dx + dy * dy).sqrt();
            if d > 1e-12 {
                let step = d.min(temp);
                pos[i].0 += dx / d * step;
                pos[i].1 += dy / d * step;
            }
        }
    }

    rescale_to_diagonal(&mut pos, scale_km);
    pos
}

fn rescale_to_diagonal(pos: &mut [(f64, f64)], scale_km: f64) {
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pos.iter() {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    let w = max_x - min_x;
    let h = max_y - min_y;
    let diag = (w * w + h * h).sqrt();
    if diag <= 0.0 {
        for p in pos.iter_mut() {
            *p = (0.0, 0.0);
        }
        return;
    }
    let factor = scale_km / diag;
    for p in pos.iter_mut() {
        p.0 = (p.0 - min_x) * factor;
        p.1 = (p.1 - min_y) * factor;
    }
}

/// Sets every link length to the Euclidean distance of its endpoints,
/// floored at 1 km, and stores the positions on the topology.
pub fn assign_link_lengths(mut topology: Topology, positions: &LayoutPositions) -> Result<Topology> {
    if positions.len() != topology.n_routers() {
        return Err(Error::param(format!(
            "positions cover {} routers, topology has {}",
            positions.len(),
            topology.n_routers()
        )));
    }
    if positions.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::param("positions must be finite"));
    }
    for link in topology.links.iter_mut() {
        let (ax, ay) = positions[link.a];
        let (bx, by) = positions[link.b];
        let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
        link.length_km = d.max(1.0);
    }
    topology.positions = Some(positions.clone());
    Ok(topology)
}

// --- JSON serialization (strict schema) ---

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct LinkJson {
    pub(crate) id: usize,
    pub(crate) a: usize,
    pub(crate) b: usize,
    pub(crate) length_km: f64,
    pub(crate) backup_capacity: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TopologyJson {
    pub(crate) routers: usize,
    pub(crate) links: Vec<LinkJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub(crate) positions: Option<Vec<[f64; 2]>>,
}

impl From<&Topology> for TopologyJson {
    fn from(t: &Topology) -> Self {
        TopologyJson {
            routers: t.n_routers,
            links: t
                .links
                .iter()
                .map(|l| LinkJson {
                    id: l.id,
                    a: l.a,
                    b: l.b,
                    length_km: l.length_km,
                    backup_capacity: l.backup_capacity,
                })
                .collect(),
            positions: t.positions.as_ref().map(|ps| ps.iter().map(|&(x, y)| [x, y]).collect()),
        }
    }
}

impl TryFrom<TopologyJson> for Topology {
    type Error = Error;

    fn try_from(j: TopologyJson) -> Result<Topology> {
        let links = j
            .links
            .into_iter()
            .map(|l| Link {
                id: l.id,
                a: l.a,
                b: l.b,
                length_km: l.length_km,
                backup_capacity: l.backup_capacity,
            })
            .collect();
        let mut topo = Topology::new(j.routers, links)?;
        if let Some(ps) = j.positions {
            if ps.len() != topo.n_routers {
                return Err(Error::param("positions length does not match router count"));
            }
            topo.positions = Some(ps.into_iter().map(|[x, y]| (x, y)).collect());
        }
        Ok(topo)
    }
}

impl Topology {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TopologyJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: TopologyJson = serde_json::from_str(text)?;
        Topology::try_from(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ba_seed_clique_only() {
        let t = generate_ba(3, 2, 42).unwrap();
        assert_eq!(t.n_routers(), 3);
        assert_eq!(t.n_links(), 3);
    }

    #[test]
    fn ba_link_count_formula() {
        // C(m+1, 2) + m * (n - m - 1) links
        let t = generate_ba(10, 2, 9).unwrap();
        assert_eq!(t.n_links(), 3 + 2 * 7);
        let t = generate_ba(25, 3, 9).unwrap();
        assert_eq!(t.n_links(), 6 + 3 * 21);
    }

    #[test]
    fn ba_deterministic() {
        let a = generate_ba(40, 2, 1).unwrap();
        let b = generate_ba(40, 2, 1).unwrap();
        assert_eq!(a.links(), b.links());
    }

    #[test]
    fn ba_rejects_bad_sizes() {
        assert!(generate_ba(2, 2, 0).is_err());
        assert!(generate_ba(10, 1, 0).is_err());
    }

    #[test]
    fn ba_heavy_tail_degrees() {
        // right-skew smoke test: max degree >= 3 * median for >= 90% of seeds
        let mut hits = 0;
        let seeds = 50;
        for seed in 0..seeds {
            let t = generate_ba(200, 2, seed).unwrap();
            let mut degs: Vec<usize> = (0..t.n_routers()).map(|r| t.degree(r)).collect();
            degs.sort_unstable();
            let median = degs[degs.len() / 2];
            let max = *degs.last().unwrap();
            if max >= 3 * median {
                hits += 1;
            }
        }
        assert!(
            hits * 10 >= seeds * 9,
            "heavy tail in only {hits}/{seeds} seeds"
        );
    }

    #[test]
    fn layout_two_routers_diagonal_is_scale() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        let pos = spring_layout(&t, 50, 100.0, 3);
        let d = ((pos[0].0 - pos[1].0).powi(2) + (pos[0].1 - pos[1].1).powi(2)).sqrt();
        assert!((d - 100.0).abs() < 1e-9, "diagonal {d}");
    }

    #[test]
    fn layout_deterministic() {
        let t = generate_ba(12, 2, 5).unwrap();
        let a = spring_layout(&t, 50, 1000.0, 7);
        let b = spring_layout(&t, 50, 1000.0, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn layout_triangle_distances_bounded() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        for seed in 0..10 {
            let pos = spring_layout(&t, 50, 100.0, seed);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let d = ((pos[i].0 - pos[j].0).powi(2) + (pos[i].1 - pos[j].1).powi(2)).sqrt();
                    assert!(d > 0.0 && d <= 100.0 * 2f64.sqrt() + 1e-9);
                }
            }
        }
    }

    #[test]
    fn link_lengths_euclidean_with_floor() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let pos = vec![(0.0, 0.0), (3.0, 4.0), (0.0, 0.0)];
        let t = assign_link_lengths(t, &pos).unwrap();
        assert_eq!(t.link(0).length_km, 5.0);
        assert_eq!(t.link(1).length_km, 5.0);
        // coincident endpoints floor at 1 km
        assert_eq!(t.link(2).length_km, 1.0);
    }

    #[test]
    fn link_lengths_idempotent() {
        let t = generate_ba(10, 2, 3).unwrap();
        let pos = spring_layout(&t, 50, 500.0, 4);
        let t1 = assign_link_lengths(t, &pos).unwrap();
        let stored = t1.positions().unwrap().clone();
        let t2 = assign_link_lengths(t1.clone(), &stored).unwrap();
        assert_eq!(t1.to_json().unwrap(), t2.to_json().unwrap());
    }

    #[test]
    fn missing_position_is_error() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        assert!(assign_link_lengths(t, &vec![(0.0, 0.0)]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = generate_ba(15, 2, 11).unwrap();
        let pos = spring_layout(&t, 50, 800.0, 12);
        let t = assign_link_lengths(t, &pos).unwrap();
        let json = t.to_json().unwrap();
        let back = Topology::from_json(&json).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn json_rejects_negative_length() {
        let text = r#"{"routers":2,"links":[{"id":0,"a":0,"b":1,"length_km":-5.0,"backup_capacity":0.0}]}"#;
        assert!(Topology::from_json(text).is_err());
    }

    #[test]
    fn json_rejects_unknown_field() {
        let text = r#"{"routers":2,"links":[{"id":0,"a":0,"b":1,"length_km":1.0,"backup_capacity":0.0}],"color":"red"}"#;
        assert!(Topology::from_json(text).is_err());
    }

    #[test]
    fn json_rejects_disconnected() {
        let text = r#"{"routers":4,"links":[{"id":0,"a":0,"b":1,"length_km":1.0,"backup_capacity":0.0},{"id":1,"a":2,"b":3,"length_km":1.0,"backup_capacity":0.0}]}"#;
        assert!(Topology::from_json(text).is_err());
    }
}

//! Shortest-path machinery for provisioning: hop-count shortest paths,
//! Yen k-shortest enumeration, and router-disjoint backup search.
//!
//! All routines are deterministic. Ties between equal-hop paths are broken
//! by the lexicographically smallest router sequence, so enumeration order
//! is a total order on paths: (hop count, router sequence).

use std::collections::{BTreeMap, VecDeque};

use crate::topology::{LinkId, RouterId, Topology};

/// A simple path through the topology, stored redundantly as the router
/// sequence and the link sequence (`links.len() + 1 == routers.len()`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Path {
    pub routers: Vec<RouterId>,
    pub links: Vec<LinkId>,
}

impl Path {
    pub fn hop_count(&self) -> usize {
        self.links.len()
    }

    pub fn src(&self) -> RouterId {
        self.routers[0]
    }

    pub fn dst(&self) -> RouterId {
        *self.routers.last().expect("path has at least one router")
    }
}

/// Shortest path by hop count with lexicographic tie-breaking, restricted
/// to links/routers not flagged in the ban masks. The endpoints must not be
/// banned. Returns `None` when `dst` is unreachable.
fn constrained_shortest(
    topo: &Topology,
    src: RouterId,
    dst: RouterId,
    banned_link: &[bool],
    banned_router: &[bool],
) -> Option<Path> {
    if banned_router[src] || banned_router[dst] {
        return None;
    }
    if src == dst {
        return Some(Path { routers: vec![src], links: vec![] });
    }

    // Backward BFS from dst gives the remaining hop count of every router.
    let unreached = usize::MAX;
    let mut dist = vec![unreached; topo.n_routers()];
    dist[dst] = 0;
    let mut queue = VecDeque::from([dst]);
    while let Some(u) = queue.pop_front() {
        for &(v, l) in topo.neighbors(u) {
            if banned_router[v] || banned_link[l] || dist[v] != unreached {
                continue;
            }
            dist[v] = dist[u] + 1;
            queue.push_back(v);
        }
    }
    if dist[src] == unreached {
        return None;
    }

    // Forward greedy walk: always step to the smallest-id neighbor that
    // still lies on a shortest path. Since all shortest paths have the same
    // number of routers, this yields the lexicographically smallest one.
    let mut routers = vec![src];
    let mut links = Vec::with_capacity(dist[src]);
    let mut cur = src;
    while cur != dst {
        let step = topo
            .neighbors(cur)
            .iter()
            .filter(|&&(v, l)| {
                !banned_router[v] && !banned_link[l] && dist[v] == dist[cur] - 1
            })
            .min_by_key(|&&(v, _)| v)
            .expect("BFS distance guarantees a descending neighbor");
        routers.push(step.0);
        links.push(step.1);
        cur = step.0;
    }
    Some(Path { routers, links })
}

/// Shortest path by hop count, lexicographic tie-break.
pub fn shortest_path(topo: &Topology, src: RouterId, dst: RouterId) -> Option<Path> {
    let banned_link = vec![false; topo.n_links()];
    let banned_router = vec![false; topo.n_routers()];
    constrained_shortest(topo, src, dst, &banned_link, &banned_router)
}

/// Yen's algorithm: the first `k` simple paths from `src` to `dst` in
/// (hop count, router sequence) order. Returns fewer when the graph has
/// fewer simple paths.
pub fn k_shortest_paths(topo: &Topology, src: RouterId, dst: RouterId, k: usize) -> Vec<Path> {
    if k == 0 {
        return vec![];
    }
    let first = match shortest_path(topo, src, dst) {
        Some(p) => p,
        None => return vec![],
    };
    let mut result = vec![first];
    // Candidate pool keyed by (hops, router sequence): BTreeMap pop_first
    // doubles as the priority queue and the duplicate filter.
    let mut candidates: BTreeMap<(usize, Vec<RouterId>), Path> = BTreeMap::new();

    while result.len() < k {
        let prev = result.last().unwrap().clone();
        for i in 0..prev.links.len() {
            let spur_router = prev.routers[i];
            let root_routers = &prev.routers[..=i];

            // Ban the next link of every accepted path sharing this root,
            // forcing the spur to deviate here.
            let mut banned_link = vec![false; topo.n_links()];
            for p in &result {
                if p.links.len() > i && p.routers[..=i] == *root_routers {
                    banned_link[p.links[i]] = true;
                }
            }
            // Ban the root's earlier routers so the total stays simple.
            let mut banned_router = vec![false; topo.n_routers()];
            for &r in &prev.routers[..i] {
                banned_router[r] = true;
            }

            if let Some(spur) =
                constrained_shortest(topo, spur_router, dst, &banned_link, &banned_router)
            {
                let mut routers = prev.routers[..i].to_vec();
                routers.extend_from_slice(&spur.routers);
                let mut links = prev.links[..i].to_vec();
                links.extend_from_slice(&spur.links);
                let key = (links.len(), routers.clone());
                candidates.entry(key).or_insert(Path { routers, links });
            }
        }
        match candidates.pop_first() {
            Some((_, path)) => result.push(path),
            None => break,
        }
    }
    result
}

/// Shortest backup for a working path: the working path's links and interior
/// routers are removed from the graph, then the shortest remaining
/// src-to-dst path is returned. `None` when no disjoint route exists.
pub fn disjoint_backup(topo: &Topology, working: &Path) -> Option<Path> {
    if working.links.is_empty() {
        return None;
    }
    let mut banned_link = vec![false; topo.n_links()];
    for &l in &working.links {
        banned_link[l] = true;
    }
    let mut banned_router = vec![false; topo.n_routers()];
    for &r in &working.routers[1..working.routers.len() - 1] {
        banned_router[r] = true;
    }
    constrained_shortest(topo, working.src(), working.dst(), &banned_link, &banned_router)
}

//! Weighted routing graphs over a topology snapshot and parallel inter-orbit
//! path selection.
//!
//! Every edge is weighted by the reciprocal of its capacity (seconds per bit),
//! so the minimum-weight path prefers high-rate links.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::{NodeId, SatelliteId, TopologySnapshot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("source and destination orbit are both {0}")]
    SameOrbit(usize),
    #[error("unreachable: no path available")]
    Unreachable,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiEdge {
    pub from: usize,
    pub to: usize,
    /// Seconds per bit.
    pub weight: f64,
    pub capacity_bps: f64,
    pub propagation_delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedDigraph {
    nodes: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    edges: Vec<DiEdge>,
    out: Vec<Vec<usize>>,
}

impl WeightedDigraph {
    pub fn new(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let mut g = Self::default();
        for n in nodes {
            g.add_node(n);
        }
        g
    }

    pub fn add_node(&mut self, node: NodeId) -> usize {
        if let Some(&i) = self.index.get(&node) {
            return i;
        }
        let i = self.nodes.len();
        self.nodes.push(node);
        self.index.insert(node, i);
        self.out.push(Vec::new());
        i
    }

    /// Adds `from -> to` with weight `1 / capacity_bps`.
    pub fn add_edge(&mut self, from: usize, to: usize, capacity_bps: f64, propagation_delay_s: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(DiEdge {
            from,
            to,
            weight: 1.0 / capacity_bps,
            capacity_bps,
            propagation_delay_s,
        });
        self.out[from].push(id);
        id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> NodeId {
        self.nodes[i]
    }

    pub fn index_of(&self, node: NodeId) -> Option<usize> {
        self.index.get(&node).copied()
    }

    pub fn edges(&self) -> &[DiEdge] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> &DiEdge {
        &self.edges[id]
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out[node]
    }

    /// Nodes belonging to satellites of `orbit`.
    pub fn orbit_nodes(&self, orbit: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, NodeId::Satellite(s) if s.orbit == orbit))
            .map(|(i, _)| i)
            .collect()
    }

    fn without_edges(&self, removed: &[bool]) -> WeightedDigraph {
        let mut g = WeightedDigraph::new(self.nodes.iter().copied());
        g.edges = self.edges.clone();
        for (id, e) in self.edges.iter().enumerate() {
            if !removed[id] {
                g.out[e.from].push(id);
            }
        }
        g
    }
}

/// One directed edge in each direction for every available ISL.
pub fn build_weighted_graph(snapshot: &TopologySnapshot) -> WeightedDigraph {
    graph_from_links(snapshot, |l| l.kind.is_isl())
}

/// Like [`build_weighted_graph`] but also includes satellite-ground and
/// ground-cloud links, so requests can be routed to the ground.
pub fn routing_graph(snapshot: &TopologySnapshot) -> WeightedDigraph {
    graph_from_links(snapshot, |_| true)
}

fn graph_from_links(
    snapshot: &TopologySnapshot,
    keep: impl Fn(&crate::constellation::Link) -> bool,
) -> WeightedDigraph {
    let mut g = WeightedDigraph::new(snapshot.satellites().map(NodeId::Satellite));
    for link in snapshot.links.iter().filter(|l| l.available && keep(l)) {
        let a = g.add_node(link.endpoints.0);
        let b = g.add_node(link.endpoints.1);
        g.add_edge(a, b, link.rate_bps, link.propagation_delay_s);
        g.add_edge(b, a, link.rate_bps, link.propagation_delay_s);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MinItem {
    cost: f64,
    node: usize,
}

impl Eq for MinItem {}

impl Ord for MinItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for MinItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths. Returns distances and the predecessor edge of
/// every reached node. Equal-cost alternatives keep the first one found, which
/// is the one through the lowest-indexed settled node.
pub fn dijkstra(graph: &WeightedDigraph, source: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = graph.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(MinItem {
        cost: 0.0,
        node: source,
    });
    while let Some(MinItem { cost, node }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        for &eid in graph.out_edges(node) {
            let e = graph.edge(eid);
            let cand = cost + e.weight;
            if cand < dist[e.to] {
                dist[e.to] = cand;
                pred[e.to] = Some(eid);
                heap.push(MinItem { cost: cand, node: e.to });
            }
        }
    }
    (dist, pred)
}

/// Edge ids of the path to `target` in a predecessor forest.
pub fn path_edges(graph: &WeightedDigraph, pred: &[Option<usize>], source: usize, target: usize) -> Option<Vec<usize>> {
    let mut edges = Vec::new();
    let mut at = target;
    while at != source {
        let e = pred[at]?;
        edges.push(e);
        at = graph.edge(e).from;
    }
    edges.reverse();
    Some(edges)
}

/// All-pairs distances with first-hop edges for path reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct AllPairs {
    pub dist: Vec<Vec<f64>>,
    first_edge: Vec<Vec<Option<usize>>>,
}

impl AllPairs {
    pub fn distance(&self, from: usize, to: usize) -> f64 {
        self.dist[from][to]
    }

    /// Edge ids of a minimum path, `Some(vec![])` for `from == to`.
    pub fn path_edges(&self, graph: &WeightedDigraph, from: usize, to: usize) -> Option<Vec<usize>> {
        if from == to {
            return Some(Vec::new());
        }
        if !self.dist[from][to].is_finite() {
            return None;
        }
        let mut edges = Vec::new();
        let mut at = from;
        while at != to {
            let e = self.first_edge[at][to]?;
            edges.push(e);
            at = graph.edge(e).to;
            if edges.len() > graph.node_count() {
                return None;
            }
        }
        Some(edges)
    }

    pub fn path_nodes(&self, graph: &WeightedDigraph, from: usize, to: usize) -> Option<Vec<usize>> {
        let edges = self.path_edges(graph, from, to)?;
        let mut nodes = vec![from];
        nodes.extend(edges.iter().map(|&e| graph.edge(e).to));
        Some(nodes)
    }
}

/// Floyd-Warshall over nonnegative weights; unreachable pairs stay infinite.
pub fn all_pairs_shortest(graph: &WeightedDigraph) -> AllPairs {
    let n = graph.node_count();
    let mut dist = vec![vec![f64::INFINITY; n]; n];
    let mut first_edge = vec![vec![None; n]; n];
    for (u, row) in dist.iter_mut().enumerate() {
        row[u] = 0.0;
        for &eid in graph.out_edges(u) {
            let e = graph.edge(eid);
            if e.to != u && e.weight < row[e.to] {
                row[e.to] = e.weight;
                first_edge[u][e.to] = Some(eid);
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = dist[i][k];
            if !dik.is_finite() || i == k {
                continue;
            }
            for j in 0..n {
                let cand = dik + dist[k][j];
                if cand < dist[i][j] {
                    dist[i][j] = cand;
                    first_edge[i][j] = first_edge[i][k];
                }
            }
        }
    }
    AllPairs { dist, first_edge }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePath {
    pub nodes: Vec<NodeId>,
    #[serde(skip)]
    pub edges: Vec<usize>,
    pub weight: f64,
    pub bottleneck_bps: f64,
    pub propagation_delay_s: f64,
}

impl RoutePath {
    fn from_edges(graph: &WeightedDigraph, start: usize, edges: Vec<usize>) -> Self {
        let mut nodes = vec![graph.node(start)];
        let mut weight = 0.0;
        let mut bottleneck = f64::INFINITY;
        let mut delay = 0.0;
        for &e in &edges {
            let edge = graph.edge(e);
            nodes.push(graph.node(edge.to));
            weight += edge.weight;
            bottleneck = bottleneck.min(edge.capacity_bps);
            delay += edge.propagation_delay_s;
        }
        Self {
            nodes,
            edges,
            weight,
            bottleneck_bps: bottleneck,
            propagation_delay_s: delay,
        }
    }

    pub fn hop_count(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<RoutePath>,
}

impl PathSet {
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn total_bottleneck_bps(&self) -> f64 {
        self.paths.iter().map(|p| p.bottleneck_bps).sum()
    }
}

/// Repeatedly takes the minimum-weight path from any satellite of
/// `source_orbit` to any satellite of `dest_orbit` and deletes its edges, until
/// no path remains or `max_paths` have been taken. Equal-weight endpoint pairs
/// resolve to the lowest (source, destination) node indices.
pub fn select_disjoint_paths(
    graph: &WeightedDigraph,
    source_orbit: usize,
    dest_orbit: usize,
    max_paths: Option<usize>,
) -> Result<PathSet, RoutingError> {
    if source_orbit == dest_orbit {
        return Err(RoutingError::SameOrbit(source_orbit));
    }
    let sources = graph.orbit_nodes(source_orbit);
    let dests = graph.orbit_nodes(dest_orbit);
    let limit = max_paths.unwrap_or(usize::MAX);
    let mut removed = vec![false; graph.edges().len()];
    let mut set = PathSet::default();
    while set.len() < limit {
        let current = graph.without_edges(&removed);
        let apsp = all_pairs_shortest(&current);
        let mut best: Option<(f64, usize, usize)> = None;
        for &s in &sources {
            for &d in &dests {
                let w = apsp.distance(s, d);
                if w.is_finite() && best.is_none_or(|(bw, _, _)| w < bw) {
                    best = Some((w, s, d));
                }
            }
        }
        let Some((_, s, d)) = best else { break };
        let Some(edges) = apsp.path_edges(&current, s, d) else {
            break;
        };
        for &e in &edges {
            removed[e] = true;
        }
        set.paths.push(RoutePath::from_edges(graph, s, edges));
    }
    Ok(set)
}

/// Time to move `payload_bits` when the payload is split across paths in
/// proportion to their bottleneck rates.
pub fn parallel_transfer_time(paths: &PathSet, payload_bits: f64) -> Result<f64, RoutingError> {
    if paths.is_empty() {
        return Err(RoutingError::Unreachable);
    }
    Ok(payload_bits / paths.total_bottleneck_bps())
}

/// Shortest-path router over a fixed graph.
#[derive(Debug, Clone)]
pub struct Router {
    graph: WeightedDigraph,
    apsp: AllPairs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub hops: usize,
    pub bottleneck_bps: f64,
    pub propagation_delay_s: f64,
    pub edges: Vec<usize>,
}

impl Router {
    pub fn new(graph: WeightedDigraph) -> Self {
        let apsp = all_pairs_shortest(&graph);
        Self { graph, apsp }
    }

    pub fn for_snapshot(snapshot: &TopologySnapshot) -> Self {
        Self::new(routing_graph(snapshot))
    }

    pub fn graph(&self) -> &WeightedDigraph {
        &self.graph
    }

    pub fn satellite(&self, id: SatelliteId) -> Result<usize, RoutingError> {
        self.node(NodeId::Satellite(id))
    }

    pub fn node(&self, id: NodeId) -> Result<usize, RoutingError> {
        self.graph.index_of(id).ok_or(RoutingError::UnknownNode(id))
    }

    pub fn route(&self, from: NodeId, to: NodeId) -> Result<Route, RoutingError> {
        let a = self.node(from)?;
        let b = self.node(to)?;
        let edges = self
            .apsp
            .path_edges(&self.graph, a, b)
            .ok_or(RoutingError::Unreachable)?;
        let mut bottleneck = f64::INFINITY;
        let mut delay = 0.0;
        for &e in &edges {
            bottleneck = bottleneck.min(self.graph.edge(e).capacity_bps);
            delay += self.graph.edge(e).propagation_delay_s;
        }
        Ok(Route {
            hops: edges.len(),
            bottleneck_bps: bottleneck,
            propagation_delay_s: delay,
            edges,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::{build_walker, ConstellationSpec, Link, LinkConfig, LinkKind};

    fn sat(o: usize, s: usize) -> NodeId {
        NodeId::Satellite(SatelliteId::new(o, s))
    }

    fn snapshot(links: Vec<Link>, orbits: usize, spo: usize) -> TopologySnapshot {
        TopologySnapshot {
            time_s: 0.0,
            num_orbits: orbits,
            sats_per_orbit: spo,
            links,
            positions: vec![[0.0; 3]; orbits * spo],
            ground_ids: vec![],
        }
    }

    fn isl(kind: LinkKind, a: NodeId, b: NodeId, rate: f64) -> Link {
        Link {
            kind,
            endpoints: (a, b),
            rate_bps: rate,
            propagation_delay_s: 0.0,
            available: true,
        }
    }

    #[test]
    fn weight_is_reciprocal_rate() {
        let snap = snapshot(vec![isl(LinkKind::InterOrbitIsl, sat(0, 0), sat(1, 0), 2e9)], 2, 1);
        let g = build_weighted_graph(&snap);
        assert_eq!(g.edges().len(), 2);
        assert!((g.edges()[0].weight - 0.5e-9).abs() < 1e-24);
    }

    #[test]
    fn unavailable_links_are_skipped() {
        let mut l = isl(LinkKind::InterOrbitIsl, sat(0, 0), sat(1, 0), 2e9);
        l.available = false;
        assert!(build_weighted_graph(&snapshot(vec![l], 2, 1)).edges().is_empty());
    }

    #[test]
    fn intra_orbit_snapshot_is_union_of_cycles() {
        let c = build_walker(ConstellationSpec {
            num_orbits: 1,
            sats_per_orbit: 5,
            altitude_km: 550.0,
            inclination_deg: 53.0,
            phasing_factor: 0,
            epoch_s: 0.0,
        })
        .unwrap();
        let g = build_weighted_graph(&c.snapshot(0.0, &LinkConfig::default()));
        assert_eq!(g.edges().len(), 10);
        for u in 0..5 {
            assert_eq!(g.out_edges(u).len(), 2);
        }
    }

    #[test]
    fn two_node_distance() {
        let mut g = WeightedDigraph::new([sat(0, 0), sat(0, 1)]);
        g.add_edge(0, 1, 0.25, 0.0);
        let ap = all_pairs_shortest(&g);
        assert_eq!(ap.distance(0, 1), 4.0);
        assert!(ap.distance(1, 0).is_infinite());
    }

    #[test]
    fn triangle_prefers_two_light_hops() {
        let mut g = WeightedDigraph::new([sat(0, 0), sat(0, 1), sat(0, 2)]);
        g.add_edge(0, 1, 1.0, 0.0);
        g.add_edge(1, 2, 1.0, 0.0);
        g.add_edge(0, 2, 1.0 / 3.0, 0.0);
        let ap = all_pairs_shortest(&g);
        assert_eq!(ap.distance(0, 2), 2.0);
        assert_eq!(ap.path_nodes(&g, 0, 2), Some(vec![0, 1, 2]));
    }

    /// Two 4-satellite rings joined by `bridges` inter-orbit links on distinct slots.
    fn bridged_rings(bridges: &[usize]) -> WeightedDigraph {
        let mut links = Vec::new();
        for o in 0..2 {
            for s in 0..4 {
                links.push(isl(LinkKind::IntraOrbitIsl, sat(o, s), sat(o, (s + 1) % 4), 10e9));
            }
        }
        for &s in bridges {
            links.push(isl(LinkKind::InterOrbitIsl, sat(0, s), sat(1, s), 2e9));
        }
        build_weighted_graph(&snapshot(links, 2, 4))
    }

    #[test]
    fn single_bridge_single_path() {
        let set = select_disjoint_paths(&bridged_rings(&[2]), 0, 1, None).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.paths[0].nodes, vec![sat(0, 2), sat(1, 2)]);
    }

    #[test]
    fn parallel_bridges_give_parallel_paths() {
        let set = select_disjoint_paths(&bridged_rings(&[0, 1, 3]), 0, 1, None).unwrap();
        assert_eq!(set.len(), 3);
        let capped = select_disjoint_paths(&bridged_rings(&[0, 1, 3]), 0, 1, Some(2)).unwrap();
        assert_eq!(capped.len(), 2);
    }

    #[test]
    fn disconnected_orbits_give_empty_set() {
        let set = select_disjoint_paths(&bridged_rings(&[]), 0, 1, None).unwrap();
        assert!(set.is_empty());
        assert_eq!(parallel_transfer_time(&set, 1.0), Err(RoutingError::Unreachable));
    }

    #[test]
    fn same_orbit_rejected() {
        assert_eq!(
            select_disjoint_paths(&bridged_rings(&[0]), 1, 1, None),
            Err(RoutingError::SameOrbit(1))
        );
    }

    fn path_with(bottleneck: f64) -> RoutePath {
        RoutePath {
            nodes: vec![],
            edges: vec![],
            weight: 1.0 / bottleneck,
            bottleneck_bps: bottleneck,
            propagation_delay_s: 0.0,
        }
    }

    #[test]
    fn transfer_time_splits_by_bottleneck() {
        let one = PathSet {
            paths: vec![path_with(2.0)],
        };
        assert_eq!(parallel_transfer_time(&one, 8.0).unwrap(), 4.0);
        let two = PathSet {
            paths: vec![path_with(2.0), path_with(2.0)],
        };
        assert_eq!(parallel_transfer_time(&two, 8.0).unwrap(), 2.0);
        // Proportional split: 1 Gbit over the 1 Gbps path, 3 Gbit over the 3 Gbps path.
        let mixed = PathSet {
            paths: vec![path_with(1e9), path_with(3e9)],
        };
        let t = parallel_transfer_time(&mixed, 4e9).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!((t - 1e9 / 1e9).abs() < 1e-12 && (t - 3e9 / 3e9).abs() < 1e-12);
    }

    #[test]
    fn router_reports_bottleneck_and_delay() {
        let mut g = WeightedDigraph::new([sat(0, 0), sat(0, 1), NodeId::Ground(0)]);
        g.add_edge(0, 1, 10.0, 0.5);
        g.add_edge(1, 2, 2.0, 0.25);
        let r = Router::new(g);
        let route = r.route(sat(0, 0), NodeId::Ground(0)).unwrap();
        assert_eq!(route.hops, 2);
        assert_eq!(route.bottleneck_bps, 2.0);
        assert_eq!(route.propagation_delay_s, 0.75);
        assert_eq!(r.route(NodeId::Ground(0), sat(0, 0)), Err(RoutingError::Unreachable));
    }
}

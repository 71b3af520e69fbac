//! Energy-minimising request routing ("how to compute") as a directed
//! Steiner tree over the satellites hosting the request's stages.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::{NodeId, SatelliteId, TopologySnapshot};
use crate::deployment::DeploymentPlan;
use crate::msdag::{MsdagError, ServiceDag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestrationError {
    #[error("deployment plan is infeasible")]
    InfeasiblePlan,
    #[error("microservice {0} is hosted nowhere")]
    NotHosted(String),
    #[error("satellite {0} is not in the graph")]
    UnknownSatellite(SatelliteId),
    #[error("terminal {0} is unreachable from the root")]
    Unreachable(SatelliteId),
    #[error(
        "exact solver bounds exceeded: {terminals} terminals / {nodes} nodes (limit {max_terminals} / {max_nodes})"
    )]
    BoundsExceeded {
        terminals: usize,
        nodes: usize,
        max_terminals: usize,
        max_nodes: usize,
    },
    #[error(transparent)]
    Dag(#[from] MsdagError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModel {
    pub e_tx_j_per_bit: f64,
    pub e_rx_j_per_bit: f64,
    pub e_flop_j: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_tx_j_per_bit: 1e-9,
            e_rx_j_per_bit: 1e-9,
            e_flop_j: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEdge {
    pub from: usize,
    pub to: usize,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedGraph {
    pub nodes: Vec<SatelliteId>,
    /// Microservice ids hosted per node; empty for pure relays.
    pub hosting: Vec<BTreeSet<String>>,
    pub edges: Vec<EnergyEdge>,
    #[serde(skip)]
    out: Vec<Vec<usize>>,
}

impl AugmentedGraph {
    /// Graph over `nodes` with no hosting information.
    pub fn from_edges(nodes: Vec<SatelliteId>, edges: Vec<EnergyEdge>) -> Self {
        let n = nodes.len();
        let mut out = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            assert!(e.from < n && e.to < n, "edge endpoint out of range");
            assert!(e.energy_j >= 0.0, "negative edge energy");
            out[e.from].push(i);
        }
        Self {
            hosting: vec![BTreeSet::new(); n],
            nodes,
            edges,
            out,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn index_of(&self, sat: SatelliteId) -> Option<usize> {
        self.nodes.iter().position(|&s| s == sat)
    }

    pub fn out_edges(&self, v: usize) -> &[usize] {
        &self.out[v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteinerInstance {
    pub root: usize,
    pub terminals: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteinerTree {
    pub root: usize,
    /// Edge ids, ascending.
    pub edges: Vec<usize>,
    pub total_energy_j: f64,
}

impl SteinerTree {
    fn from_edges(graph: &AugmentedGraph, root: usize, edges: BTreeSet<usize>) -> Self {
        let total = edges.iter().map(|&e| graph.edges[e].energy_j).sum();
        Self {
            root,
            edges: edges.into_iter().collect(),
            total_energy_j: total,
        }
    }

    pub fn nodes(&self, graph: &AugmentedGraph) -> BTreeSet<usize> {
        let mut out = BTreeSet::from([self.root]);
        for &e in &self.edges {
            out.insert(graph.edges[e].from);
            out.insert(graph.edges[e].to);
        }
        out
    }

    /// Checks the tree invariants: one parent per non-root node, root without
    /// parent, all terminals reachable, edge count = node count - 1, energy
    /// equal to the edge sum.
    pub fn is_valid(&self, graph: &AugmentedGraph, instance: &SteinerInstance) -> bool {
        let nodes = self.nodes(graph);
        if self.edges.len() + 1 != nodes.len() {
            return false;
        }
        let mut parent: BTreeMap<usize, usize> = BTreeMap::new();
        for &e in &self.edges {
            let edge = &graph.edges[e];
            if edge.to == self.root || parent.insert(edge.to, edge.from).is_some() {
                return false;
            }
        }
        for &v in &nodes {
            let mut cur = v;
            let mut steps = 0;
            while cur != self.root {
                match parent.get(&cur) {
                    Some(&p) if steps <= nodes.len() => {
                        cur = p;
                        steps += 1;
                    }
                    _ => return false,
                }
            }
        }
        let sum: f64 = self.edges.iter().map(|&e| graph.edges[e].energy_j).sum();
        instance.terminals.iter().all(|t| nodes.contains(t))
            && (sum - self.total_energy_j).abs() <= 1e-9 * sum.abs().max(1.0)
    }
}

/// Request endpoints: the satellite receiving the sensed input and the
/// gateway satellite delivering the result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrchestrationRequest {
    pub ingress: SatelliteId,
    pub egress: SatelliteId,
}

/// Bits carried on every edge: the largest payload the request moves
/// (DAG edge payloads and stage outputs).
pub fn request_payload_bits(dag: &ServiceDag) -> f64 {
    dag.edges
        .iter()
        .map(|e| e.payload_bits)
        .chain(dag.nodes.iter().map(|n| n.output_bits))
        .fold(0.0, f64::max)
}

pub fn build_augmented_graph(
    snapshot: &TopologySnapshot,
    plan: &DeploymentPlan,
    dag: &ServiceDag,
    request: &OrchestrationRequest,
    energy: &EnergyModel,
) -> Result<(AugmentedGraph, SteinerInstance), OrchestrationError> {
    if !plan.feasible {
        return Err(OrchestrationError::InfeasiblePlan);
    }
    let dag = dag.clone().validated()?;
    let nodes: Vec<SatelliteId> = snapshot.satellites().collect();
    let index: BTreeMap<SatelliteId, usize> = nodes.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut hosting = vec![BTreeSet::new(); nodes.len()];
    for (ms, sat) in &plan.assignment {
        let &i = index.get(sat).ok_or(OrchestrationError::UnknownSatellite(*sat))?;
        hosting[i].insert(ms.clone());
    }
    let mut stage_flops = vec![0.0; nodes.len()];
    let mut terminals = BTreeSet::new();
    for m in &dag.nodes {
        let sat = plan
            .assignment
            .get(&m.id)
            .ok_or_else(|| OrchestrationError::NotHosted(m.id.clone()))?;
        stage_flops[index[sat]] += m.flops;
        terminals.insert(index[sat]);
    }
    let root = *index
        .get(&request.ingress)
        .ok_or(OrchestrationError::UnknownSatellite(request.ingress))?;
    let egress = *index
        .get(&request.egress)
        .ok_or(OrchestrationError::UnknownSatellite(request.egress))?;
    terminals.insert(egress);

    let bits = request_payload_bits(&dag);
    let per_bit = energy.e_tx_j_per_bit + energy.e_rx_j_per_bit;
    let mut edges = Vec::new();
    for link in snapshot.links.iter().filter(|l| l.available && l.kind.is_isl()) {
        let (NodeId::Satellite(a), NodeId::Satellite(b)) = link.endpoints else {
            continue;
        };
        let (a, b) = (index[&a], index[&b]);
        for (from, to) in [(a, b), (b, a)] {
            edges.push(EnergyEdge {
                from,
                to,
                energy_j: per_bit * bits + energy.e_flop_j * stage_flops[to],
            });
        }
    }
    let mut graph = AugmentedGraph::from_edges(nodes, edges);
    graph.hosting = hosting;
    Ok((graph, SteinerInstance { root, terminals }))
}

#[derive(Clone, Copy)]
struct HeapItem(f64, usize);
impl PartialEq for HeapItem {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

/// Shortest-path tree from `source` restricted to `allowed` edges. Equal
/// distances prefer the lower-indexed predecessor node.
fn shortest_path_tree(
    graph: &AugmentedGraph,
    source: usize,
    allowed: Option<&BTreeSet<usize>>,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = graph.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut done = vec![false; n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::from([HeapItem(0.0, source)]);
    while let Some(HeapItem(d, u)) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &e in graph.out_edges(u) {
            if allowed.is_some_and(|a| !a.contains(&e)) {
                continue;
            }
            let edge = &graph.edges[e];
            let v = edge.to;
            if done[v] {
                continue;
            }
            let nd = d + edge.energy_j;
            let better = nd < dist[v] || (nd == dist[v] && pred[v].is_some_and(|p| u < graph.edges[p].from));
            if better {
                dist[v] = nd;
                pred[v] = Some(e);
                heap.push(HeapItem(nd, v));
            }
        }
    }
    (dist, pred)
}

fn tree_to_terminals(
    graph: &AugmentedGraph,
    instance: &SteinerInstance,
    allowed: Option<&BTreeSet<usize>>,
) -> Result<SteinerTree, OrchestrationError> {
    let (dist, pred) = shortest_path_tree(graph, instance.root, allowed);
    let mut edges = BTreeSet::new();
    for &t in &instance.terminals {
        if !dist[t].is_finite() {
            return Err(OrchestrationError::Unreachable(graph.nodes[t]));
        }
        let mut v = t;
        while let Some(e) = pred[v] {
            if !edges.insert(e) {
                break;
            }
            v = graph.edges[e].from;
        }
    }
    Ok(SteinerTree::from_edges(graph, instance.root, edges))
}

fn check_instance(graph: &AugmentedGraph, instance: &SteinerInstance) {
    assert!(instance.root < graph.node_count(), "root out of range");
    assert!(
        instance.terminals.iter().all(|&t| t < graph.node_count()),
        "terminal out of range"
    );
}

/// Union of root-to-terminal shortest paths. The paths all come from one
/// shortest-path tree, so their union is itself a tree.
pub fn dst_heuristic(graph: &AugmentedGraph, instance: &SteinerInstance) -> Result<SteinerTree, OrchestrationError> {
    check_instance(graph, instance);
    tree_to_terminals(graph, instance, None)
}

/// Energy of the root-to-`target` shortest path.
pub fn shortest_path_energy(graph: &AugmentedGraph, root: usize, target: usize) -> f64 {
    shortest_path_tree(graph, root, None).0[target]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactBounds {
    pub max_terminals: usize,
    pub max_nodes: usize,
}

impl Default for ExactBounds {
    fn default() -> Self {
        Self {
            max_terminals: 6,
            max_nodes: 12,
        }
    }
}

pub fn dst_exact(graph: &AugmentedGraph, instance: &SteinerInstance) -> Result<SteinerTree, OrchestrationError> {
    dst_exact_bounded(graph, instance, ExactBounds::default())
}

#[derive(Clone, Copy)]
enum Choice {
    /// dp[S][v] reached by the path v -> t for S = {t}.
    Path,
    /// dp[S][v] = dist(v, u) + dp[A][u] + dp[S \ A][u].
    Split { u: usize, part: usize },
}

/// Optimal directed Steiner tree by dynamic programming over terminal
/// subsets: dp[S][v] is the cheapest arborescence rooted at v spanning S.
pub fn dst_exact_bounded(
    graph: &AugmentedGraph,
    instance: &SteinerInstance,
    bounds: ExactBounds,
) -> Result<SteinerTree, OrchestrationError> {
    check_instance(graph, instance);
    let n = graph.node_count();
    let terms: Vec<usize> = instance
        .terminals
        .iter()
        .copied()
        .filter(|&t| t != instance.root)
        .collect();
    if terms.len() > bounds.max_terminals || n > bounds.max_nodes {
        return Err(OrchestrationError::BoundsExceeded {
            terminals: terms.len(),
            nodes: n,
            max_terminals: bounds.max_terminals,
            max_nodes: bounds.max_nodes,
        });
    }
    let spt: Vec<(Vec<f64>, Vec<Option<usize>>)> = (0..n).map(|v| shortest_path_tree(graph, v, None)).collect();
    for &t in &terms {
        if !spt[instance.root].0[t].is_finite() {
            return Err(OrchestrationError::Unreachable(graph.nodes[t]));
        }
    }
    if terms.is_empty() {
        return Ok(SteinerTree::from_edges(graph, instance.root, BTreeSet::new()));
    }
    let k = terms.len();
    let full = (1usize << k) - 1;
    let mut dp = vec![vec![f64::INFINITY; n]; full + 1];
    let mut choice = vec![vec![Choice::Path; n]; full + 1];
    for (i, &t) in terms.iter().enumerate() {
        for v in 0..n {
            dp[1 << i][v] = spt[v].0[t];
        }
    }
    for s in 1..=full {
        if s.count_ones() < 2 {
            continue;
        }
        // best merge at each node u
        let mut merge = vec![(f64::INFINITY, 0usize); n];
        for (u, m) in merge.iter_mut().enumerate() {
            let mut a = (s - 1) & s;
            while a > 0 {
                // each unordered split once
                if a < s ^ a {
                    let c = dp[a][u] + dp[s ^ a][u];
                    if c < m.0 {
                        *m = (c, a);
                    }
                }
                a = (a - 1) & s;
            }
        }
        for v in 0..n {
            for (u, &(c, part)) in merge.iter().enumerate() {
                let total = spt[v].0[u] + c;
                if total < dp[s][v] {
                    dp[s][v] = total;
                    choice[s][v] = Choice::Split { u, part };
                }
            }
        }
    }

    let mut edges = BTreeSet::new();
    let mut stack = vec![(full, instance.root)];
    let path = |from: usize, to: usize, edges: &mut BTreeSet<usize>| {
        let mut v = to;
        while v != from {
            let e = spt[from].1[v].expect("reachable");
            edges.insert(e);
            v = graph.edges[e].from;
        }
    };
    while let Some((s, v)) = stack.pop() {
        match choice[s][v] {
            Choice::Path => {
                let t = terms[s.trailing_zeros() as usize];
                path(v, t, &mut edges);
            }
            Choice::Split { u, part } => {
                path(v, u, &mut edges);
                stack.push((part, u));
                stack.push((s ^ part, u));
            }
        }
    }
    // The union can share nodes between branches; a shortest-path tree inside
    // it is a proper arborescence no more expensive than the union.
    let tree = tree_to_terminals(graph, instance, Some(&edges))?;
    debug_assert!(tree.total_energy_j <= dp[full][instance.root] * (1.0 + 1e-12) + 1e-12);
    Ok(tree)
}

/// Minimum spanning arborescence (Chu-Liu/Edmonds). `edges` are
/// `(from, to, weight)`; returns indices into `edges`, or `None` if some node
/// is unreachable from `root`.
pub fn min_arborescence(n: usize, root: usize, edges: &[(usize, usize, f64)]) -> Option<Vec<usize>> {
    let mut best_in: Vec<Option<usize>> = vec![None; n];
    for (i, &(u, v, w)) in edges.iter().enumerate() {
        if u == v || v == root {
            continue;
        }
        if best_in[v].is_none_or(|b| w < edges[b].2) {
            best_in[v] = Some(i);
        }
    }
    if (0..n).any(|v| v != root && best_in[v].is_none()) {
        return None;
    }
    // cycle detection over chosen in-edges
    let mut comp = vec![usize::MAX; n];
    let mut in_cycle = vec![false; n];
    let mut visit = vec![usize::MAX; n];
    let mut cycles = 0;
    for start in 0..n {
        let mut v = start;
        while v != root && visit[v] == usize::MAX && comp[v] == usize::MAX {
            visit[v] = start;
            v = edges[best_in[v].unwrap()].0;
        }
        if v != root && visit[v] == start && comp[v] == usize::MAX {
            let mut u = v;
            loop {
                comp[u] = cycles;
                in_cycle[u] = true;
                u = edges[best_in[u].unwrap()].0;
                if u == v {
                    break;
                }
            }
            cycles += 1;
        }
    }
    if cycles == 0 {
        return Some((0..n).filter(|&v| v != root).map(|v| best_in[v].unwrap()).collect());
    }
    let mut next = cycles;
    for c in comp.iter_mut() {
        if *c == usize::MAX {
            *c = next;
            next += 1;
        }
    }
    let mut sub_edges = Vec::new();
    let mut origin = Vec::new();
    for (i, &(u, v, w)) in edges.iter().enumerate() {
        if comp[u] == comp[v] {
            continue;
        }
        let adj = if in_cycle[v] {
            w - edges[best_in[v].unwrap()].2
        } else {
            w
        };
        sub_edges.push((comp[u], comp[v], adj));
        origin.push(i);
    }
    let chosen = min_arborescence(next, comp[root], &sub_edges)?;
    let mut result: Vec<usize> = chosen.iter().map(|&j| origin[j]).collect();
    let entered: BTreeSet<usize> = result.iter().map(|&i| edges[i].1).filter(|&v| in_cycle[v]).collect();
    for v in 0..n {
        if in_cycle[v] && !entered.contains(&v) {
            result.push(best_in[v].unwrap());
        }
    }
    Some(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    pub steiner: SteinerTree,
    pub arborescence: SteinerTree,
    pub steiner_energy_j: f64,
    pub arborescence_energy_j: f64,
}

/// Compares the exact Steiner optimum with a minimum spanning arborescence
/// over the metric closure of `{root} ∪ terminals`, expanded back to graph
/// edges.
pub fn full_hosting_reduction_check(
    graph: &AugmentedGraph,
    instance: &SteinerInstance,
) -> Result<ReductionReport, OrchestrationError> {
    let steiner = dst_exact(graph, instance)?;
    let mut members: Vec<usize> = vec![instance.root];
    members.extend(instance.terminals.iter().copied().filter(|&t| t != instance.root));
    let spt: Vec<(Vec<f64>, Vec<Option<usize>>)> =
        members.iter().map(|&v| shortest_path_tree(graph, v, None)).collect();
    let mut closure = Vec::new();
    for (i, _) in members.iter().enumerate() {
        for (j, &b) in members.iter().enumerate() {
            if i != j && spt[i].0[b].is_finite() {
                closure.push((i, j, spt[i].0[b]));
            }
        }
    }
    let chosen = min_arborescence(members.len(), 0, &closure).ok_or_else(|| {
        let bad = members
            .iter()
            .find(|&&t| !spt[0].0[t].is_finite())
            .copied()
            .unwrap_or(instance.root);
        OrchestrationError::Unreachable(graph.nodes[bad])
    })?;
    let mut edges = BTreeSet::new();
    for c in chosen {
        let (i, j, _) = closure[c];
        let mut v = members[j];
        while v != members[i] {
            let e = spt[i].1[v].expect("reachable");
            edges.insert(e);
            v = graph.edges[e].from;
        }
    }
    let arborescence = tree_to_terminals(graph, instance, Some(&edges))?;
    Ok(ReductionReport {
        steiner_energy_j: steiner.total_energy_j,
        arborescence_energy_j: arborescence.total_energy_j,
        steiner,
        arborescence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteinerSolver {
    Heuristic,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageHost {
    pub stage: String,
    pub satellite: SatelliteId,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeEdge {
    pub from: SatelliteId,
    pub to: SatelliteId,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrchestrationResult {
    pub root: SatelliteId,
    pub terminals: Vec<SatelliteId>,
    pub edges: Vec<TreeEdge>,
    pub total_energy_j: f64,
    /// Stages in DAG topological order with their hosts.
    pub stage_hosts: Vec<StageHost>,
}

pub fn orchestrate(
    snapshot: &TopologySnapshot,
    plan: &DeploymentPlan,
    dag: &ServiceDag,
    request: &OrchestrationRequest,
    energy: &EnergyModel,
    solver: SteinerSolver,
) -> Result<OrchestrationResult, OrchestrationError> {
    let (graph, instance) = build_augmented_graph(snapshot, plan, dag, request, energy)?;
    let tree = match solver {
        SteinerSolver::Heuristic => dst_heuristic(&graph, &instance)?,
        SteinerSolver::Exact => dst_exact(&graph, &instance)?,
    };
    let order = dag.topological_order().expect("validated");
    Ok(OrchestrationResult {
        root: graph.nodes[instance.root],
        terminals: instance.terminals.iter().map(|&t| graph.nodes[t]).collect(),
        edges: tree
            .edges
            .iter()
            .map(|&e| TreeEdge {
                from: graph.nodes[graph.edges[e].from],
                to: graph.nodes[graph.edges[e].to],
                energy_j: graph.edges[e].energy_j,
            })
            .collect(),
        total_energy_j: tree.total_energy_j,
        stage_hosts: order
            .into_iter()
            .map(|i| StageHost {
                stage: dag.nodes[i].id.clone(),
                satellite: plan.assignment[&dag.nodes[i].id],
            })
            .collect(),
    })
}

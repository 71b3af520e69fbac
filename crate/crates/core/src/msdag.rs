//! Multimodal inference tasks as microservice DAGs.
//!
//! Microservice ids are global: two tasks naming the same id share one module.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::{NodeId, SatelliteId, TopologySnapshot};
use crate::interorbit::{Router, RoutingError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsdagError {
    #[error("DAG {dag} is invalid: {violations:?}")]
    Invalid { dag: String, violations: Vec<Violation> },
    #[error("sharing analysis needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("microservice {0} is not placed")]
    Unplaced(String),
    #[error("microservice {0} has conflicting definitions across tasks")]
    ConflictingDefinition(String),
    #[error("no route from {from} to {to}")]
    Unreachable { from: NodeId, to: NodeId },
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Microservice {
    pub id: String,
    pub flops: f64,
    pub memory_bytes: f64,
    pub output_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagEdge {
    pub from: String,
    pub to: String,
    pub payload_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDag {
    pub id: String,
    pub nodes: Vec<Microservice>,
    pub edges: Vec<DagEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    Empty,
    DuplicateNode(String),
    UnknownEndpoint(String),
    Cycle(Vec<String>),
    NoExit,
    MultipleExits(Vec<String>),
    UnreachableFromEntry(String),
    CannotReachExit(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DagReport {
    pub violations: Vec<Violation>,
}

impl DagReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl ServiceDag {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    fn adjacency(&self) -> Option<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let mut succ = vec![Vec::new(); self.nodes.len()];
        let mut pred = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (a, b) = (self.index_of(&e.from)?, self.index_of(&e.to)?);
            succ[a].push(b);
            pred[b].push(a);
        }
        Some((succ, pred))
    }

    pub fn entries(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| !self.edges.iter().any(|e| e.to == n.id))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn exits(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| !self.edges.iter().any(|e| e.from == n.id))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Node indices in topological order (Kahn, lowest index first), or `None`
    /// if the graph has a cycle or dangling edge.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let (succ, pred) = self.adjacency()?;
        let mut indeg: Vec<usize> = pred.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(u) = ready.pop_first() {
            order.push(u);
            for &v in &succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.insert(v);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    pub fn validated(self) -> Result<Self, MsdagError> {
        let report = validate_dag(&self);
        if report.is_valid() {
            Ok(self)
        } else {
            Err(MsdagError::Invalid {
                dag: self.id.clone(),
                violations: report.violations,
            })
        }
    }
}

/// Checks acyclicity, a unique exit, and that every node lies on an
/// entry-to-exit path.
pub fn validate_dag(dag: &ServiceDag) -> DagReport {
    let mut v = Vec::new();
    if dag.nodes.is_empty() {
        v.push(Violation::Empty);
        return DagReport { violations: v };
    }
    let mut seen = BTreeSet::new();
    for n in &dag.nodes {
        if !seen.insert(n.id.as_str()) {
            v.push(Violation::DuplicateNode(n.id.clone()));
        }
    }
    for e in &dag.edges {
        for end in [&e.from, &e.to] {
            if dag.index_of(end).is_none() {
                v.push(Violation::UnknownEndpoint(end.clone()));
            }
        }
    }
    if !v.is_empty() {
        return DagReport { violations: v };
    }
    let (succ, pred) = dag.adjacency().expect("endpoints checked");
    if let Some(cycle) = find_cycle(&succ) {
        v.push(Violation::Cycle(
            cycle.into_iter().map(|i| dag.nodes[i].id.clone()).collect(),
        ));
        return DagReport { violations: v };
    }
    let exits = dag.exits();
    match exits.len() {
        0 => v.push(Violation::NoExit),
        1 => {}
        _ => v.push(Violation::MultipleExits(exits.iter().map(|s| s.to_string()).collect())),
    }
    let from_entries = reach(&succ, (0..dag.nodes.len()).filter(|&i| pred[i].is_empty()));
    for (i, n) in dag.nodes.iter().enumerate() {
        if !from_entries[i] {
            v.push(Violation::UnreachableFromEntry(n.id.clone()));
        }
    }
    if exits.len() == 1 {
        let exit = dag.index_of(exits[0]).unwrap();
        let to_exit = reach(&pred, [exit]);
        for (i, n) in dag.nodes.iter().enumerate() {
            if !to_exit[i] {
                v.push(Violation::CannotReachExit(n.id.clone()));
            }
        }
    }
    DagReport { violations: v }
}

fn reach(adj: &[Vec<usize>], starts: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut stack: Vec<usize> = starts.into_iter().collect();
    while let Some(u) = stack.pop() {
        if std::mem::replace(&mut seen[u], true) {
            continue;
        }
        stack.extend(adj[u].iter().copied().filter(|&w| !seen[w]));
    }
    seen
}

fn find_cycle(succ: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    fn visit(u: usize, succ: &[Vec<usize>], mark: &mut [Mark], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        mark[u] = Mark::Open;
        stack.push(u);
        for &w in &succ[u] {
            match mark[w] {
                Mark::Open => {
                    let at = stack.iter().position(|&x| x == w).unwrap();
                    return Some(stack[at..].to_vec());
                }
                Mark::New => {
                    if let Some(c) = visit(w, succ, mark, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        mark[u] = Mark::Done;
        None
    }
    let mut mark = vec![Mark::New; succ.len()];
    for u in 0..succ.len() {
        if mark[u] == Mark::New {
            if let Some(c) = visit(u, succ, &mut mark, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingReport {
    pub shared: BTreeSet<String>,
    /// Invocations per epoch if every task ran its own copy of each module.
    pub invocations_without_sharing: usize,
    /// Invocations per epoch when each shared module runs once for all tasks.
    pub invocations_with_sharing: usize,
    pub saved_invocations: usize,
}

/// Microservices used by two or more of `tasks`.
pub fn shared_modules(tasks: &[ServiceDag]) -> Result<SharingReport, MsdagError> {
    if tasks.len() < 2 {
        return Err(MsdagError::TooFewTasks(tasks.len()));
    }
    let mut users: BTreeMap<&str, usize> = BTreeMap::new();
    let mut without = 0;
    for dag in tasks {
        let ids: BTreeSet<&str> = dag.nodes.iter().map(|n| n.id.as_str()).collect();
        without += ids.len();
        for id in ids {
            *users.entry(id).or_default() += 1;
        }
    }
    let with = users.len();
    Ok(SharingReport {
        shared: users
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .map(|(id, _)| id.to_string())
            .collect(),
        invocations_without_sharing: without,
        invocations_with_sharing: with,
        saved_invocations: without - with,
    })
}

/// One definition per microservice id across all `dags`.
pub fn microservice_catalog(dags: &[ServiceDag]) -> Result<BTreeMap<String, Microservice>, MsdagError> {
    let mut out: BTreeMap<String, Microservice> = BTreeMap::new();
    for dag in dags {
        for n in &dag.nodes {
            match out.get(&n.id) {
                Some(existing) if existing != n => return Err(MsdagError::ConflictingDefinition(n.id.clone())),
                Some(_) => {}
                None => {
                    out.insert(n.id.clone(), n.clone());
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRequest {
    pub dag: String,
    /// Satellite that senses the input data.
    pub source_satellite: SatelliteId,
    /// Ground station receiving the result; `None` skips final delivery.
    #[serde(default)]
    pub destination: Option<usize>,
    #[serde(default)]
    pub release_time_s: f64,
    /// Size of the sensed input shipped from the source to entry hosts.
    #[serde(default)]
    pub input_bits: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub throughput_flops: BTreeMap<SatelliteId, f64>,
    /// Used for satellites missing from `throughput_flops`.
    pub default_throughput_flops: f64,
    /// Packing/unpacking cost added to every DAG edge.
    pub edge_overhead_s: f64,
}

impl LatencyModel {
    pub fn uniform(throughput_flops: f64) -> Self {
        Self {
            throughput_flops: BTreeMap::new(),
            default_throughput_flops: throughput_flops,
            edge_overhead_s: 0.0,
        }
    }

    pub fn throughput(&self, sat: SatelliteId) -> f64 {
        self.throughput_flops
            .get(&sat)
            .copied()
            .unwrap_or(self.default_throughput_flops)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub total_s: f64,
    pub critical_path: Vec<String>,
}

/// How nodes without a host are costed in a partial evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unplaced {
    Reject,
    /// Compute at the given throughput, all their transfers free.
    Optimistic(f64),
}

/// Seconds to move `bits` from `from` to `to`; zero when co-located.
pub fn transfer_latency(router: &Router, from: NodeId, to: NodeId, bits: f64) -> Result<f64, MsdagError> {
    if from == to {
        return Ok(0.0);
    }
    let route = router.route(from, to).map_err(|e| match e {
        RoutingError::Unreachable => MsdagError::Unreachable { from, to },
        other => other.into(),
    })?;
    Ok(bits / route.bottleneck_bps + route.propagation_delay_s)
}

/// Longest-path latency from the sensing source through the DAG to the
/// destination, using `host` for placements.
pub fn latency_with(
    task: &TaskRequest,
    dag: &ServiceDag,
    router: &Router,
    model: &LatencyModel,
    host: &dyn Fn(&str) -> Option<SatelliteId>,
    unplaced: Unplaced,
) -> Result<LatencyBreakdown, MsdagError> {
    let order = dag.topological_order().ok_or_else(|| MsdagError::Invalid {
        dag: dag.id.clone(),
        violations: validate_dag(dag).violations,
    })?;
    let n = dag.nodes.len();
    let hosts: Vec<Option<SatelliteId>> = dag.nodes.iter().map(|m| host(&m.id)).collect();
    let mut compute = vec![0.0; n];
    for (i, m) in dag.nodes.iter().enumerate() {
        compute[i] = match (hosts[i], unplaced) {
            (Some(h), _) => m.flops / model.throughput(h),
            (None, Unplaced::Optimistic(rate)) => m.flops / rate,
            (None, Unplaced::Reject) => return Err(MsdagError::Unplaced(m.id.clone())),
        };
    }
    let source = NodeId::Satellite(task.source_satellite);
    let mut finish = vec![0.0f64; n];
    let mut best_pred: Vec<Option<usize>> = vec![None; n];
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in &dag.edges {
        let (a, b) = (dag.index_of(&e.from).unwrap(), dag.index_of(&e.to).unwrap());
        incoming[b].push((a, e.payload_bits));
    }
    for &v in &order {
        let mut start = 0.0f64;
        if incoming[v].is_empty() {
            if let Some(h) = hosts[v] {
                start = transfer_latency(router, source, NodeId::Satellite(h), task.input_bits)?;
            }
        }
        for &(u, bits) in &incoming[v] {
            let edge = match (hosts[u], hosts[v]) {
                (Some(a), Some(b)) => transfer_latency(router, NodeId::Satellite(a), NodeId::Satellite(b), bits)?,
                _ => 0.0,
            } + model.edge_overhead_s;
            let t = finish[u] + edge;
            if best_pred[v].is_none() || t > start {
                start = t;
                best_pred[v] = Some(u);
            }
        }
        finish[v] = start + compute[v];
    }
    // A valid DAG has exactly one exit; otherwise take the latest-finishing sink.
    let exit = (0..n)
        .filter(|&i| !dag.edges.iter().any(|e| e.from == dag.nodes[i].id))
        .max_by(|&a, &b| finish[a].total_cmp(&finish[b]).then(b.cmp(&a)))
        .expect("acyclic nonempty DAG has a sink");
    let mut total = finish[exit];
    if let (Some(dest), Some(h)) = (task.destination, hosts[exit]) {
        total += transfer_latency(
            router,
            NodeId::Satellite(h),
            NodeId::Ground(dest),
            dag.nodes[exit].output_bits,
        )?;
    }
    let mut path = vec![dag.nodes[exit].id.clone()];
    let mut at = exit;
    while let Some(p) = best_pred[at] {
        path.push(dag.nodes[p].id.clone());
        at = p;
    }
    path.reverse();
    Ok(LatencyBreakdown {
        total_s: total,
        critical_path: path,
    })
}

/// End-to-end latency of a fully placed task on `snapshot`.
pub fn end_to_end_latency(
    task: &TaskRequest,
    dag: &ServiceDag,
    placement: &BTreeMap<String, SatelliteId>,
    snapshot: &TopologySnapshot,
    model: &LatencyModel,
) -> Result<LatencyBreakdown, MsdagError> {
    let router = Router::for_snapshot(snapshot);
    latency_with(
        task,
        dag,
        &router,
        model,
        &|id| placement.get(id).copied(),
        Unplaced::Reject,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interorbit::WeightedDigraph;

    pub(crate) fn ms(id: &str, flops: f64) -> Microservice {
        Microservice {
            id: id.into(),
            flops,
            memory_bytes: 1.0,
            output_bits: 0.0,
        }
    }

    fn edge(a: &str, b: &str, bits: f64) -> DagEdge {
        DagEdge {
            from: a.into(),
            to: b.into(),
            payload_bits: bits,
        }
    }

    fn dag(id: &str, nodes: Vec<Microservice>, edges: Vec<DagEdge>) -> ServiceDag {
        ServiceDag {
            id: id.into(),
            nodes,
            edges,
        }
    }

    fn task(d: &str) -> TaskRequest {
        TaskRequest {
            dag: d.into(),
            source_satellite: SatelliteId::new(0, 0),
            destination: None,
            release_time_s: 0.0,
            input_bits: 0.0,
            weight: 1.0,
        }
    }

    #[test]
    fn single_node_is_valid() {
        assert!(validate_dag(&dag("d", vec![ms("a", 1.0)], vec![])).is_valid());
    }

    #[test]
    fn two_cycle_reported() {
        let d = dag(
            "d",
            vec![ms("a", 1.0), ms("b", 1.0)],
            vec![edge("a", "b", 0.0), edge("b", "a", 0.0)],
        );
        let r = validate_dag(&d);
        assert_eq!(r.violations, vec![Violation::Cycle(vec!["a".into(), "b".into()])]);
    }

    #[test]
    fn multiple_exits_reported() {
        let d = dag(
            "d",
            vec![ms("a", 1.0), ms("b", 1.0), ms("c", 1.0)],
            vec![edge("a", "b", 0.0), edge("a", "c", 0.0)],
        );
        assert_eq!(
            validate_dag(&d).violations,
            vec![Violation::MultipleExits(vec!["b".into(), "c".into()])]
        );
    }

    #[test]
    fn dangling_edge_reported() {
        let d = dag("d", vec![ms("a", 1.0)], vec![edge("a", "zz", 0.0)]);
        assert_eq!(
            validate_dag(&d).violations,
            vec![Violation::UnknownEndpoint("zz".into())]
        );
    }

    /// Two tasks in the style of the shared-module inference figure: the
    /// masking (1) and projection (3) modules are used by both.
    pub(crate) fn two_sharing_tasks() -> Vec<ServiceDag> {
        vec![
            dag(
                "task1",
                vec![ms("ms1", 1.0), ms("ms2", 2.0), ms("ms3", 1.0), ms("ms4", 3.0)],
                vec![
                    edge("ms1", "ms2", 8.0),
                    edge("ms2", "ms3", 8.0),
                    edge("ms3", "ms4", 8.0),
                ],
            ),
            dag(
                "task2",
                vec![ms("ms1", 1.0), ms("ms5", 2.0), ms("ms3", 1.0), ms("ms6", 3.0)],
                vec![
                    edge("ms1", "ms5", 8.0),
                    edge("ms5", "ms3", 8.0),
                    edge("ms3", "ms6", 8.0),
                ],
            ),
        ]
    }

    #[test]
    fn figure_style_tasks_share_modules_one_and_three() {
        let tasks = two_sharing_tasks();
        assert!(tasks.iter().all(|t| validate_dag(t).is_valid()));
        let r = shared_modules(&tasks).unwrap();
        assert_eq!(r.shared, BTreeSet::from(["ms1".to_string(), "ms3".to_string()]));
        assert_eq!(r.invocations_without_sharing, 8);
        assert_eq!(r.invocations_with_sharing, 6);
        assert_eq!(r.saved_invocations, 2);
    }

    #[test]
    fn identical_and_disjoint_sharing() {
        let t = two_sharing_tasks();
        let r = shared_modules(&[t[0].clone(), t[0].clone()]).unwrap();
        assert_eq!(r.shared.len(), 4);
        let other = dag("x", vec![ms("x1", 1.0)], vec![]);
        assert!(shared_modules(&[t[0].clone(), other]).unwrap().shared.is_empty());
        assert_eq!(shared_modules(&t[..1]), Err(MsdagError::TooFewTasks(1)));
    }

    #[test]
    fn conflicting_definitions_rejected() {
        let a = dag("a", vec![ms("m", 1.0)], vec![]);
        let b = dag("b", vec![ms("m", 2.0)], vec![]);
        assert_eq!(
            microservice_catalog(&[a, b]),
            Err(MsdagError::ConflictingDefinition("m".into()))
        );
    }

    fn one_sat_router() -> Router {
        Router::new(WeightedDigraph::new([NodeId::Satellite(SatelliteId::new(0, 0))]))
    }

    #[test]
    fn chain_on_one_satellite_sums_compute() {
        let d = dag("d", vec![ms("a", 3.0), ms("b", 5.0)], vec![edge("a", "b", 0.0)]);
        let here = |_: &str| Some(SatelliteId::new(0, 0));
        let r = latency_with(
            &task("d"),
            &d,
            &one_sat_router(),
            &LatencyModel::uniform(2.0),
            &here,
            Unplaced::Reject,
        )
        .unwrap();
        assert_eq!(r.total_s, 4.0);
        assert_eq!(r.critical_path, vec!["a", "b"]);
    }

    #[test]
    fn parallel_branches_take_max() {
        let d = dag(
            "d",
            vec![ms("s", 0.0), ms("x", 3.0), ms("y", 5.0), ms("z", 1.0)],
            vec![
                edge("s", "x", 0.0),
                edge("s", "y", 0.0),
                edge("x", "z", 0.0),
                edge("y", "z", 0.0),
            ],
        );
        let here = |_: &str| Some(SatelliteId::new(0, 0));
        let r = latency_with(
            &task("d"),
            &d,
            &one_sat_router(),
            &LatencyModel::uniform(1.0),
            &here,
            Unplaced::Reject,
        )
        .unwrap();
        assert_eq!(r.total_s, 6.0);
        assert_eq!(r.critical_path, vec!["s", "y", "z"]);
    }

    #[test]
    fn unplaced_node_is_an_error() {
        let d = dag("d", vec![ms("a", 1.0)], vec![]);
        let nowhere = |_: &str| None;
        assert_eq!(
            latency_with(
                &task("d"),
                &d,
                &one_sat_router(),
                &LatencyModel::uniform(1.0),
                &nowhere,
                Unplaced::Reject
            ),
            Err(MsdagError::Unplaced("a".into()))
        );
    }

    #[test]
    fn transfers_use_bottleneck_and_delay() {
        let a = NodeId::Satellite(SatelliteId::new(0, 0));
        let b = NodeId::Satellite(SatelliteId::new(0, 1));
        let mut g = WeightedDigraph::new([a, b, NodeId::Ground(4)]);
        g.add_edge(0, 1, 4.0, 0.5);
        g.add_edge(1, 2, 2.0, 0.25);
        let router = Router::new(g);
        let d = dag(
            "d",
            vec![
                ms("p", 2.0),
                Microservice {
                    id: "q".into(),
                    flops: 2.0,
                    memory_bytes: 0.0,
                    output_bits: 4.0,
                },
            ],
            vec![edge("p", "q", 8.0)],
        );
        let mut t = task("d");
        t.destination = Some(4);
        let host = |id: &str| Some(SatelliteId::new(0, if id == "p" { 0 } else { 1 }));
        let r = latency_with(&t, &d, &router, &LatencyModel::uniform(1.0), &host, Unplaced::Reject).unwrap();
        // 2 compute + (8/4 + 0.5) transfer + 2 compute + (4/2 + 0.25) delivery
        assert_eq!(r.total_s, 8.75);
        let unreachable = |id: &str| Some(SatelliteId::new(0, if id == "p" { 1 } else { 0 }));
        assert!(matches!(
            latency_with(
                &t,
                &d,
                &router,
                &LatencyModel::uniform(1.0),
                &unreachable,
                Unplaced::Reject
            ),
            Err(MsdagError::Unreachable { .. })
        ));
    }
}

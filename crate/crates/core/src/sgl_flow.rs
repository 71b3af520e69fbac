//! Satellite-ground coordinated transmission as a max-flow problem.
//!
//! Capacities are fractions of one orbit's model: an edge with capacity 0.4
//! can carry 40% of the model during the interval being planned. Each epoch a
//! fresh network is built from the windows active in that epoch and the
//! fractions still undelivered, and its maximum flow is pushed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::{ContactWindow, GroundStation, SatelliteId};

/// Feasibility tolerance on fractional flows.
pub const FLOW_TOLERANCE: f64 = 1e-9;
const RESIDUAL_EPS: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid downlink input: {0}")]
    InvalidInput(String),
    #[error("window references orbit {orbit} but only {orbits} orbits are tracked")]
    UnknownOrbit { orbit: usize, orbits: usize },
    #[error("window references unknown ground station {0}")]
    UnknownStation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub from: usize,
    pub to: usize,
    pub capacity: f64,
}

/// A plain directed capacity graph.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowGraph {
    pub vertex_count: usize,
    pub edges: Vec<FlowEdge>,
}

impl FlowGraph {
    pub fn new(vertex_count: usize) -> Self {
        Self {
            vertex_count,
            edges: Vec::new(),
        }
    }

    pub fn add_edge(&mut self, from: usize, to: usize, capacity: f64) -> usize {
        self.edges.push(FlowEdge { from, to, capacity });
        self.edges.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowAssignment {
    /// Flow on each edge, indexed like the graph's edge list.
    pub flows: Vec<f64>,
    pub value: f64,
}

impl FlowAssignment {
    /// Checks capacity bounds and conservation at every vertex other than
    /// `source` and `sink`, and that `value` is the source's net out-flow.
    pub fn verify(&self, graph: &FlowGraph, source: usize, sink: usize, tol: f64) -> Result<(), String> {
        if self.flows.len() != graph.edges.len() {
            return Err("flow vector length differs from edge count".into());
        }
        let mut net = vec![0.0; graph.vertex_count];
        for (i, (e, &f)) in graph.edges.iter().zip(&self.flows).enumerate() {
            if f < -tol || f > e.capacity + tol {
                return Err(format!("edge {i}: flow {f} outside [0, {}]", e.capacity));
            }
            net[e.from] -= f;
            net[e.to] += f;
        }
        for (v, &balance) in net.iter().enumerate() {
            if v != source && v != sink && balance.abs() > tol {
                return Err(format!("vertex {v}: imbalance {balance}"));
            }
        }
        if (-net[source] - self.value).abs() > tol {
            return Err(format!("value {} but source emits {}", self.value, -net[source]));
        }
        Ok(())
    }
}

/// Edmonds-Karp: Ford-Fulkerson with breadth-first (shortest) augmenting
/// paths. Adjacency is scanned in edge insertion order, so the result is
/// deterministic.
pub fn max_flow_between(graph: &FlowGraph, source: usize, sink: usize) -> FlowAssignment {
    let mut flows = vec![0.0; graph.edges.len()];
    if source == sink {
        return FlowAssignment { flows, value: 0.0 };
    }
    // (edge id, forward?) per vertex
    let mut adj: Vec<Vec<(usize, bool)>> = vec![Vec::new(); graph.vertex_count];
    for (i, e) in graph.edges.iter().enumerate() {
        adj[e.from].push((i, true));
        adj[e.to].push((i, false));
    }
    let residual = |flows: &[f64], (e, fwd): (usize, bool)| {
        if fwd {
            graph.edges[e].capacity - flows[e]
        } else {
            flows[e]
        }
    };
    let mut value = 0.0;
    loop {
        let mut parent: Vec<Option<(usize, bool)>> = vec![None; graph.vertex_count];
        let mut seen = vec![false; graph.vertex_count];
        seen[source] = true;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            if u == sink {
                break;
            }
            for &(e, fwd) in &adj[u] {
                let v = if fwd { graph.edges[e].to } else { graph.edges[e].from };
                if !seen[v] && residual(&flows, (e, fwd)) > RESIDUAL_EPS {
                    seen[v] = true;
                    parent[v] = Some((e, fwd));
                    queue.push_back(v);
                }
            }
        }
        if !seen[sink] {
            break;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = sink;
        while let Some((e, fwd)) = parent[v] {
            bottleneck = bottleneck.min(residual(&flows, (e, fwd)));
            v = if fwd { graph.edges[e].from } else { graph.edges[e].to };
        }
        let mut v = sink;
        while let Some((e, fwd)) = parent[v] {
            if fwd {
                flows[e] = (flows[e] + bottleneck).min(graph.edges[e].capacity);
                v = graph.edges[e].from;
            } else {
                flows[e] = (flows[e] - bottleneck).max(0.0);
                v = graph.edges[e].to;
            }
        }
        value += bottleneck;
    }
    FlowAssignment { flows, value }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVertex {
    Source,
    Sink,
    Orbit(usize),
    Satellite(SatelliteId),
    Ground(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Orbits to ground: source -> orbit -> satellite -> station -> sink.
    Downlink,
    /// Cloud to orbits: source -> station -> satellite -> orbit -> sink.
    Uplink,
}

/// Layered satellite-ground network for one planning interval.
///
/// Each orbit gets its own vertex between the source and its satellites. The
/// source -> orbit edge carries the orbit's undelivered fraction, so several
/// satellites of one orbit can share the work without delivering the same data
/// twice; each orbit -> satellite edge also carries that fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNetwork {
    pub direction: Direction,
    pub vertices: Vec<FlowVertex>,
    pub graph: FlowGraph,
}

impl FlowNetwork {
    pub const SOURCE: usize = 0;
    pub const SINK: usize = 1;

    pub fn max_flow(&self) -> FlowAssignment {
        max_flow_between(&self.graph, Self::SOURCE, Self::SINK)
    }

    pub fn vertex_index(&self, v: FlowVertex) -> Option<usize> {
        self.vertices.iter().position(|&x| x == v)
    }

    pub fn capacity(&self, from: FlowVertex, to: FlowVertex) -> Option<f64> {
        let (a, b) = (self.vertex_index(from)?, self.vertex_index(to)?);
        self.graph
            .edges
            .iter()
            .find(|e| e.from == a && e.to == b)
            .map(|e| e.capacity)
    }

    /// Fraction delivered for each orbit under `assignment`.
    pub fn delivered_per_orbit(&self, assignment: &FlowAssignment, orbits: usize) -> Vec<f64> {
        let mut out = vec![0.0; orbits];
        for (e, &f) in self.graph.edges.iter().zip(&assignment.flows) {
            let orbit_edge = match self.direction {
                Direction::Downlink if e.from == Self::SOURCE => self.vertices[e.to],
                Direction::Uplink if e.to == Self::SINK => self.vertices[e.from],
                _ => continue,
            };
            if let FlowVertex::Orbit(o) = orbit_edge {
                out[o] += f;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkState {
    /// Undelivered fraction per orbit, each in `[0, 1]`.
    pub remaining: Vec<f64>,
    pub elapsed_windows: usize,
}

impl DownlinkState {
    pub fn fresh(orbits: usize) -> Self {
        Self {
            remaining: vec![1.0; orbits],
            elapsed_windows: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.remaining.iter().all(|&r| r <= 0.0)
    }
}

/// Builds the network for the interval `[start, end)`.
///
/// Satellite-station capacity is `rate * overlap / model_bits` summed over the
/// pair's windows; station-sink capacity is `dedicated_rate * (end - start) /
/// model_bits`. Only satellites and stations with a positive overlap appear.
pub fn build_flow_network(
    windows: &[ContactWindow],
    stations: &[GroundStation],
    state: &DownlinkState,
    interval: (f64, f64),
    model_bits: f64,
    direction: Direction,
) -> Result<FlowNetwork, FlowError> {
    let (start, end) = interval;
    if !(end > start) {
        return Err(FlowError::InvalidInput(format!("interval [{start}, {end}) is empty")));
    }
    if !(model_bits > 0.0) {
        return Err(FlowError::InvalidInput("model_bits must be positive".into()));
    }
    let orbits = state.remaining.len();
    let mut link_capacity: BTreeMap<(SatelliteId, usize), f64> = BTreeMap::new();
    for w in windows {
        let overlap = w.overlap(start, end);
        if overlap <= 0.0 {
            continue;
        }
        if w.satellite.orbit >= orbits {
            return Err(FlowError::UnknownOrbit {
                orbit: w.satellite.orbit,
                orbits,
            });
        }
        *link_capacity.entry((w.satellite, w.ground_station)).or_default() += w.rate_bps * overlap / model_bits;
    }
    let station_ids: BTreeSet<usize> = link_capacity.keys().map(|&(_, g)| g).collect();
    let satellites: BTreeSet<SatelliteId> = link_capacity.keys().map(|&(s, _)| s).collect();

    let mut vertices = vec![FlowVertex::Source, FlowVertex::Sink];
    vertices.extend((0..orbits).map(FlowVertex::Orbit));
    vertices.extend(satellites.iter().copied().map(FlowVertex::Satellite));
    vertices.extend(station_ids.iter().copied().map(FlowVertex::Ground));
    let index: BTreeMap<FlowVertex, usize> = vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut graph = FlowGraph::new(vertices.len());
    let mut add = |a: FlowVertex, b: FlowVertex, cap: f64| {
        let (a, b) = (index[&a], index[&b]);
        match direction {
            Direction::Downlink => graph.add_edge(a, b, cap),
            Direction::Uplink => {
                let flip = |v: usize| match v {
                    FlowNetwork::SOURCE => FlowNetwork::SINK,
                    FlowNetwork::SINK => FlowNetwork::SOURCE,
                    v => v,
                };
                graph.add_edge(flip(b), flip(a), cap)
            }
        };
    };

    for (o, &rem) in state.remaining.iter().enumerate() {
        add(FlowVertex::Source, FlowVertex::Orbit(o), rem);
    }
    for &s in &satellites {
        add(
            FlowVertex::Orbit(s.orbit),
            FlowVertex::Satellite(s),
            state.remaining[s.orbit],
        );
    }
    for (&(s, g), &cap) in &link_capacity {
        add(FlowVertex::Satellite(s), FlowVertex::Ground(g), cap);
    }
    for &g in &station_ids {
        let gs = stations
            .iter()
            .find(|gs| gs.id == g)
            .ok_or(FlowError::UnknownStation(g))?;
        add(
            FlowVertex::Ground(g),
            FlowVertex::Sink,
            gs.dedicated_rate_bps * (end - start) / model_bits,
        );
    }
    Ok(FlowNetwork {
        direction,
        vertices,
        graph,
    })
}

/// Inputs of a multi-epoch transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRequest<'a> {
    pub windows: &'a [ContactWindow],
    pub stations: &'a [GroundStation],
    pub orbits: usize,
    /// Size of each orbit's payload; all orbits carry equally sized payloads.
    pub model_bits: f64,
    pub start_s: f64,
    pub horizon_end_s: f64,
    pub epoch_s: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub network: FlowNetwork,
    pub assignment: FlowAssignment,
    /// Fraction of each orbit's payload moved in this epoch.
    pub delivered: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownlinkSchedule {
    pub epochs: Vec<EpochRecord>,
    pub final_state: DownlinkState,
    pub complete: bool,
    /// Absolute time at which the last fraction arrives, refined inside the
    /// final epoch; `None` when incomplete.
    pub completion_time_s: Option<f64>,
}

impl DownlinkSchedule {
    pub fn epochs_used(&self) -> usize {
        self.epochs.len()
    }
}

fn settle(state: &mut DownlinkState, delivered: &mut [f64]) {
    for (rem, d) in state.remaining.iter_mut().zip(delivered.iter_mut()) {
        *d = d.min(*rem).max(0.0);
        *rem -= *d;
        if *rem <= FLOW_TOLERANCE {
            *d += *rem;
            *rem = 0.0;
        }
    }
}

/// Runs epochs of `epoch_s` seconds from `start_s` until every orbit's payload
/// is delivered or the horizon ends. Running out of horizon is reported through
/// `complete == false`, not as an error.
pub fn schedule_downlink(req: &TransferRequest<'_>) -> Result<DownlinkSchedule, FlowError> {
    if !(req.epoch_s > 0.0) {
        return Err(FlowError::InvalidInput("epoch_s must be positive".into()));
    }
    if !(req.model_bits > 0.0) {
        return Err(FlowError::InvalidInput("model_bits must be positive".into()));
    }
    if req.orbits == 0 {
        return Err(FlowError::InvalidInput("at least one orbit is required".into()));
    }
    let mut state = DownlinkState::fresh(req.orbits);
    let mut epochs = Vec::new();
    let mut completion = None;
    let mut k = 0usize;
    loop {
        let es = req.start_s + k as f64 * req.epoch_s;
        if es >= req.horizon_end_s {
            break;
        }
        let ee = (es + req.epoch_s).min(req.horizon_end_s);
        let relevant: Vec<ContactWindow> = req
            .windows
            .iter()
            .filter(|w| w.overlap(es, ee) > 0.0)
            .copied()
            .collect();
        let before = state.clone();
        let network = build_flow_network(&relevant, req.stations, &state, (es, ee), req.model_bits, req.direction)?;
        let assignment = network.max_flow();
        let mut delivered = network.delivered_per_orbit(&assignment, req.orbits);
        settle(&mut state, &mut delivered);
        state.elapsed_windows += 1;
        epochs.push(EpochRecord {
            index: k,
            start_s: es,
            end_s: ee,
            network,
            assignment,
            delivered,
        });
        if state.is_done() {
            completion = Some(es + finishing_time(req, &relevant, &before, es, ee)?);
            break;
        }
        k += 1;
    }
    Ok(DownlinkSchedule {
        complete: state.is_done(),
        epochs,
        final_state: state,
        completion_time_s: completion,
    })
}

/// Smallest `tau` in `(0, ee - es]` such that the interval `[es, es + tau)`
/// already clears `state`. Delivered volume is nondecreasing in `tau`.
fn finishing_time(
    req: &TransferRequest<'_>,
    windows: &[ContactWindow],
    state: &DownlinkState,
    es: f64,
    ee: f64,
) -> Result<f64, FlowError> {
    let clears = |tau: f64| -> Result<bool, FlowError> {
        let net = build_flow_network(
            windows,
            req.stations,
            state,
            (es, es + tau),
            req.model_bits,
            req.direction,
        )?;
        let mut delivered = net.delivered_per_orbit(&net.max_flow(), req.orbits);
        let mut s = state.clone();
        settle(&mut s, &mut delivered);
        Ok(s.is_done())
    };
    let (mut lo, mut hi) = (0.0, ee - es);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if clears(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Epoch count of the best schedule that uses a single satellite-station pair
/// for the whole transfer, or `None` if no single pair completes it.
pub fn best_single_link_epochs(req: &TransferRequest<'_>) -> Result<Option<usize>, FlowError> {
    let pairs: BTreeSet<(SatelliteId, usize)> = req.windows.iter().map(|w| (w.satellite, w.ground_station)).collect();
    let mut best: Option<usize> = None;
    for (sat, gs) in pairs {
        let only: Vec<ContactWindow> = req
            .windows
            .iter()
            .filter(|w| w.satellite == sat && w.ground_station == gs)
            .copied()
            .collect();
        let sched = schedule_downlink(&TransferRequest {
            windows: &only,
            ..req.clone()
        })?;
        if sched.complete {
            let n = sched.epochs_used();
            best = Some(best.map_or(n, |b| b.min(n)));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn station(id: usize, rate: f64) -> GroundStation {
        GroundStation {
            id,
            latitude_deg: 0.0,
            longitude_deg: 0.0,
            dedicated_rate_bps: rate,
            min_elevation_deg: 10.0,
        }
    }

    fn window(orbit: usize, slot: usize, gs: usize, start: f64, end: f64, rate: f64) -> ContactWindow {
        ContactWindow {
            satellite: SatelliteId::new(orbit, slot),
            ground_station: gs,
            start_s: start,
            end_s: end,
            rate_bps: rate,
        }
    }

    #[test]
    fn empty_graph_has_zero_flow() {
        let g = FlowGraph::new(2);
        assert_eq!(max_flow_between(&g, 0, 1).value, 0.0);
    }

    #[test]
    fn diamond_network() {
        // s=0, A=1, B=2, G1=3, t=4
        let mut g = FlowGraph::new(5);
        g.add_edge(0, 1, 0.6);
        g.add_edge(0, 2, 0.6);
        g.add_edge(1, 3, 0.5);
        g.add_edge(2, 3, 0.5);
        g.add_edge(3, 4, 0.8);
        let f = max_flow_between(&g, 0, 4);
        assert!((f.value - 0.8).abs() < 1e-12);
        f.verify(&g, 0, 4, 1e-12).unwrap();
    }

    #[test]
    fn no_windows_no_flow() {
        let state = DownlinkState::fresh(2);
        let net = build_flow_network(&[], &[station(0, 1e9)], &state, (0.0, 60.0), 1e9, Direction::Downlink).unwrap();
        assert!(net
            .graph
            .edges
            .iter()
            .all(|e| !matches!(net.vertices[e.to], FlowVertex::Ground(_))));
        assert_eq!(net.max_flow().value, 0.0);
    }

    #[test]
    fn single_path_is_min_of_capacities() {
        // SGL moves 0.4 of the model in the interval, the dedicated link 1.0.
        let w = [window(0, 0, 0, 0.0, 100.0, 4e6)];
        let state = DownlinkState::fresh(1);
        let net = build_flow_network(&w, &[station(0, 1e7)], &state, (0.0, 100.0), 1e9, Direction::Downlink).unwrap();
        assert!(
            (net.capacity(FlowVertex::Satellite(SatelliteId::new(0, 0)), FlowVertex::Ground(0))
                .unwrap()
                - 0.4)
                .abs()
                < 1e-12
        );
        assert!((net.max_flow().value - 0.4).abs() < 1e-12);
    }

    #[test]
    fn same_orbit_satellites_get_orbit_fraction() {
        let w = [window(0, 0, 0, 0.0, 60.0, 1e9), window(0, 1, 0, 0.0, 60.0, 1e9)];
        let state = DownlinkState {
            remaining: vec![0.7],
            elapsed_windows: 3,
        };
        let net = build_flow_network(&w, &[station(0, 1e12)], &state, (0.0, 60.0), 1e9, Direction::Downlink).unwrap();
        for slot in 0..2 {
            let cap = net
                .capacity(FlowVertex::Orbit(0), FlowVertex::Satellite(SatelliteId::new(0, slot)))
                .unwrap();
            assert_eq!(cap, 0.7);
        }
        // The orbit vertex keeps the two satellites from delivering 1.4.
        assert!((net.max_flow().value - 0.7).abs() < 1e-12);
    }

    #[test]
    fn uplink_reverses_edges() {
        let w = [window(0, 0, 0, 0.0, 100.0, 4e6)];
        let state = DownlinkState::fresh(1);
        let net = build_flow_network(&w, &[station(0, 1e7)], &state, (0.0, 100.0), 1e9, Direction::Uplink).unwrap();
        let f = net.max_flow();
        assert!((f.value - 0.4).abs() < 1e-12);
        assert!((net.delivered_per_orbit(&f, 1)[0] - 0.4).abs() < 1e-12);
        let src = net.graph.edges.iter().filter(|e| e.from == FlowNetwork::SOURCE).count();
        assert_eq!(src, 1);
        assert!(matches!(
            net.vertices[net
                .graph
                .edges
                .iter()
                .find(|e| e.from == FlowNetwork::SOURCE)
                .unwrap()
                .to],
            FlowVertex::Ground(0)
        ));
    }

    fn request<'a>(
        windows: &'a [ContactWindow],
        stations: &'a [GroundStation],
        orbits: usize,
        horizon: f64,
    ) -> TransferRequest<'a> {
        TransferRequest {
            windows,
            stations,
            orbits,
            model_bits: 60e9,
            start_s: 0.0,
            horizon_end_s: horizon,
            epoch_s: 60.0,
            direction: Direction::Downlink,
        }
    }

    #[test]
    fn fits_in_one_epoch() {
        let w = [window(0, 0, 0, 0.0, 600.0, 2e9)];
        let st = [station(0, 10e9)];
        let s = schedule_downlink(&request(&w, &st, 1, 600.0)).unwrap();
        assert!(s.complete);
        assert_eq!(s.epochs_used(), 1);
        assert!((s.completion_time_s.unwrap() - 30.0).abs() < 1e-6);
    }

    #[test]
    fn two_orbits_two_stations_take_two_epochs() {
        // Each SGL moves 0.5 of a model per 60 s epoch.
        let w = [window(0, 0, 0, 0.0, 600.0, 0.5e9), window(1, 0, 1, 0.0, 600.0, 0.5e9)];
        let st = [station(0, 10e9), station(1, 10e9)];
        let s = schedule_downlink(&request(&w, &st, 2, 600.0)).unwrap();
        assert!(s.complete);
        assert_eq!(s.epochs_used(), 2);
        for e in &s.epochs {
            assert!((e.delivered[0] - 0.5).abs() < 1e-12 && (e.delivered[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn no_windows_is_incomplete() {
        let st = [station(0, 10e9)];
        let s = schedule_downlink(&request(&[], &st, 3, 300.0)).unwrap();
        assert!(!s.complete);
        assert_eq!(s.final_state.remaining, vec![1.0; 3]);
        assert_eq!(s.epochs_used(), 5);
        assert_eq!(s.completion_time_s, None);
    }

    #[test]
    fn single_link_baseline() {
        let w = [window(0, 0, 0, 0.0, 600.0, 0.5e9), window(0, 1, 1, 0.0, 600.0, 0.25e9)];
        let st = [station(0, 10e9), station(1, 10e9)];
        let req = request(&w, &st, 1, 600.0);
        assert_eq!(best_single_link_epochs(&req).unwrap(), Some(2));
        let multi = schedule_downlink(&req).unwrap();
        assert_eq!(multi.epochs_used(), 2);
    }

    #[test]
    fn unknown_station_is_an_error() {
        let w = [window(0, 0, 7, 0.0, 60.0, 1e9)];
        let st = [station(0, 10e9)];
        assert_eq!(
            schedule_downlink(&request(&w, &st, 1, 60.0)).unwrap_err(),
            FlowError::UnknownStation(7)
        );
    }
}

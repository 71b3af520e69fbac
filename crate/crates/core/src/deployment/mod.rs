//! Microservice placement ("where to compute").
//!
//! Every microservice id gets exactly one host satellite, shared by all tasks
//! that use it. The objective is the weighted sum of task latencies as
//! evaluated by [`crate::msdag::latency_with`] on the instance snapshot.

mod exact;
mod greedy;
mod mdp;
mod policy;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::{Link, LinkKind, NodeId, SatelliteId, TopologySnapshot};
use crate::interorbit::Router;
use crate::msdag::{self, LatencyModel, Microservice, MsdagError, ServiceDag, TaskRequest, Unplaced};

pub use exact::solve_exact;
pub use greedy::solve_greedy;
pub use mdp::{DeploymentEnv, MdpState, MdpTransition};
pub use policy::{
    evaluate_policy, evaluate_random_policy, train_policy_gradient, EvaluationReport, LinearPolicy, PgConfig,
    TrainingReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeploymentError {
    #[error("size bound exceeded: {satellites} satellites x {microservices} microservices (exact solver limit {max_satellites} x {max_microservices}); use the greedy solver")]
    SizeBoundExceeded {
        satellites: usize,
        microservices: usize,
        max_satellites: usize,
        max_microservices: usize,
    },
    #[error("instance has no candidate satellites")]
    NoSatellites,
    #[error("task references unknown DAG {0}")]
    UnknownDag(String),
    #[error("satellite {0} is not part of the snapshot")]
    UnknownSatellite(SatelliteId),
    #[error("tasks form a cyclic dependency through shared microservices")]
    CyclicUnion,
    #[error("action {action} is infeasible; feasible actions: {feasible:?}")]
    InfeasibleAction { action: usize, feasible: Vec<usize> },
    #[error("episode already finished")]
    EpisodeDone,
    #[error(transparent)]
    Dag(#[from] MsdagError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteResources {
    pub satellite: SatelliteId,
    pub throughput_flops: f64,
    pub memory_bytes: f64,
    #[serde(default = "unlimited", skip_serializing_if = "is_unlimited")]
    pub energy_budget_j: f64,
}

fn unlimited() -> f64 {
    f64::INFINITY
}

fn is_unlimited(v: &f64) -> bool {
    *v == f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploymentOptions {
    /// Also require hosted flops x `energy_per_flop_j` to fit each satellite's budget.
    pub enforce_energy: bool,
    pub energy_per_flop_j: f64,
    pub edge_overhead_s: f64,
    pub exact_max_satellites: usize,
    pub exact_max_microservices: usize,
    /// Weight of the memory-usage penalty in MDP rewards.
    pub resource_weight: f64,
    pub dead_end_reward: f64,
}

impl Default for DeploymentOptions {
    fn default() -> Self {
        Self {
            enforce_energy: false,
            energy_per_flop_j: 1e-12,
            edge_overhead_s: 0.0,
            exact_max_satellites: 6,
            exact_max_microservices: 8,
            resource_weight: 0.0,
            dead_end_reward: -1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentInstance {
    pub tasks: Vec<(TaskRequest, ServiceDag)>,
    pub satellites: Vec<SatelliteResources>,
    pub snapshot: TopologySnapshot,
    pub options: DeploymentOptions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub assignment: BTreeMap<String, SatelliteId>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub plan: DeploymentPlan,
    /// Weighted total latency in seconds; `None` for infeasible plans.
    pub objective: Option<f64>,
}

impl Solution {
    fn infeasible() -> Self {
        Self {
            plan: DeploymentPlan::default(),
            objective: None,
        }
    }
}

/// Instance data precomputed once for repeated objective evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub(crate) instance: DeploymentInstance,
    pub(crate) router: Router,
    pub(crate) model: LatencyModel,
    /// Microservices in placement order (topological over all tasks).
    pub(crate) services: Vec<Microservice>,
    pub(crate) service_index: BTreeMap<String, usize>,
    /// DAG neighbours (either direction) per service.
    pub(crate) neighbours: Vec<Vec<usize>>,
    pub(crate) max_throughput: f64,
}

impl Prepared {
    pub(crate) fn new(instance: &DeploymentInstance) -> Result<Self, DeploymentError> {
        if instance.satellites.is_empty() {
            return Err(DeploymentError::NoSatellites);
        }
        for s in &instance.satellites {
            if !instance.snapshot.contains(s.satellite) {
                return Err(DeploymentError::UnknownSatellite(s.satellite));
            }
        }
        let dags: Vec<ServiceDag> = instance
            .tasks
            .iter()
            .map(|(_, d)| d.clone().validated())
            .collect::<Result<_, _>>()?;
        let catalog = msdag::microservice_catalog(&dags)?;

        // Kahn over the union of all task DAGs, ties by first appearance.
        let mut first_seen: Vec<String> = Vec::new();
        for d in &dags {
            for n in &d.nodes {
                if !first_seen.contains(&n.id) {
                    first_seen.push(n.id.clone());
                }
            }
        }
        let pos: BTreeMap<&str, usize> = first_seen.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let m = first_seen.len();
        let mut succ = vec![Vec::new(); m];
        let mut indeg = vec![0usize; m];
        let mut neighbours_by_pos = vec![Vec::new(); m];
        for d in &dags {
            for e in &d.edges {
                let (a, b) = (pos[e.from.as_str()], pos[e.to.as_str()]);
                if !succ[a].contains(&b) {
                    succ[a].push(b);
                    indeg[b] += 1;
                    neighbours_by_pos[a].push(b);
                    neighbours_by_pos[b].push(a);
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..m).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(m);
        while let Some(u) = ready.pop_first() {
            order.push(u);
            for &v in &succ[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.insert(v);
                }
            }
        }
        if order.len() != m {
            return Err(DeploymentError::CyclicUnion);
        }
        let rank: Vec<usize> = {
            let mut r = vec![0; m];
            for (i, &p) in order.iter().enumerate() {
                r[p] = i;
            }
            r
        };
        let services: Vec<Microservice> = order.iter().map(|&p| catalog[&first_seen[p]].clone()).collect();
        let service_index = services.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        let neighbours = order
            .iter()
            .map(|&p| neighbours_by_pos[p].iter().map(|&q| rank[q]).collect())
            .collect();

        let mut model = LatencyModel::uniform(
            instance
                .satellites
                .iter()
                .map(|s| s.throughput_flops)
                .fold(f64::INFINITY, f64::min),
        );
        model.edge_overhead_s = instance.options.edge_overhead_s;
        for s in &instance.satellites {
            model.throughput_flops.insert(s.satellite, s.throughput_flops);
        }
        let max_throughput = instance
            .satellites
            .iter()
            .map(|s| s.throughput_flops)
            .fold(0.0, f64::max);
        Ok(Self {
            instance: instance.clone(),
            router: Router::for_snapshot(&instance.snapshot),
            model,
            services,
            service_index,
            neighbours,
            max_throughput,
        })
    }

    pub(crate) fn satellite_count(&self) -> usize {
        self.instance.satellites.len()
    }

    /// Weighted latency sum for a (partial) assignment `service -> satellite
    /// slot`. Unplaced services are costed by `unplaced`; unreachable hosts
    /// give `+inf`.
    pub(crate) fn objective(&self, assign: &[Option<usize>], unplaced: Unplaced) -> f64 {
        let host = |id: &str| -> Option<SatelliteId> {
            assign[self.service_index[id]].map(|s| self.instance.satellites[s].satellite)
        };
        let mut total = 0.0;
        for (task, dag) in &self.instance.tasks {
            match msdag::latency_with(task, dag, &self.router, &self.model, &host, unplaced) {
                Ok(l) => total += task.weight * l.total_s,
                Err(_) => return f64::INFINITY,
            }
        }
        total
    }

    pub(crate) fn optimistic(&self) -> Unplaced {
        Unplaced::Optimistic(self.max_throughput)
    }

    pub(crate) fn fits(&self, service: usize, sat: usize, mem_used: &[f64], energy_used: &[f64]) -> bool {
        let ms = &self.services[service];
        let res = &self.instance.satellites[sat];
        if mem_used[sat] + ms.memory_bytes > res.memory_bytes {
            return false;
        }
        if self.instance.options.enforce_energy {
            let e = ms.flops * self.instance.options.energy_per_flop_j;
            if energy_used[sat] + e > res.energy_budget_j {
                return false;
            }
        }
        true
    }

    pub(crate) fn energy_of(&self, service: usize) -> f64 {
        self.services[service].flops * self.instance.options.energy_per_flop_j
    }

    pub(crate) fn plan_of(&self, assign: &[Option<usize>]) -> DeploymentPlan {
        DeploymentPlan {
            assignment: self
                .services
                .iter()
                .zip(assign)
                .filter_map(|(ms, a)| a.map(|s| (ms.id.clone(), self.instance.satellites[s].satellite)))
                .collect(),
            feasible: assign.iter().all(Option::is_some),
        }
    }
}

/// Objective of a complete plan; `None` if it leaves a service unplaced,
/// names a non-candidate host, or breaks a resource limit.
pub fn evaluate_plan(instance: &DeploymentInstance, plan: &DeploymentPlan) -> Result<Option<f64>, DeploymentError> {
    let p = Prepared::new(instance)?;
    let mut assign = vec![None; p.services.len()];
    let mut mem = vec![0.0; p.satellite_count()];
    let mut energy = vec![0.0; p.satellite_count()];
    for (i, ms) in p.services.iter().enumerate() {
        let Some(sat) = plan.assignment.get(&ms.id) else {
            return Ok(None);
        };
        let Some(slot) = instance.satellites.iter().position(|s| s.satellite == *sat) else {
            return Ok(None);
        };
        if !p.fits(i, slot, &mem, &energy) {
            return Ok(None);
        }
        mem[slot] += ms.memory_bytes;
        energy[slot] += p.energy_of(i);
        assign[i] = Some(slot);
    }
    let obj = p.objective(&assign, Unplaced::Reject);
    Ok(obj.is_finite().then_some(obj))
}

/// Number of distinct microservices across the instance's tasks.
pub fn microservice_count(instance: &DeploymentInstance) -> Result<usize, DeploymentError> {
    Ok(Prepared::new(instance)?.services.len())
}

/// A random small instance for benchmarks and oracle checks: `sats` satellites
/// on a ring with random chords, and one or two chain/fork tasks over
/// `microservices` distinct modules (some shared).
pub fn random_instance<R: Rng>(rng: &mut R, sats: usize, microservices: usize) -> DeploymentInstance {
    let sat = |i: usize| SatelliteId::new(0, i);
    let mut links = Vec::new();
    let linked = |a: usize, b: usize, links: &mut Vec<Link>, rng: &mut R| {
        links.push(Link {
            kind: LinkKind::IntraOrbitIsl,
            endpoints: (NodeId::Satellite(sat(a)), NodeId::Satellite(sat(b))),
            rate_bps: rng.gen_range(0.2e9..10e9),
            propagation_delay_s: rng.gen_range(0.001..0.02),
            available: true,
        });
    };
    if sats > 1 {
        for i in 0..sats {
            let j = (i + 1) % sats;
            if sats == 2 && i == 1 {
                break;
            }
            linked(i, j, &mut links, rng);
        }
        for i in 0..sats {
            for j in i + 2..sats {
                if rng.gen_bool(0.3) {
                    linked(i, j, &mut links, rng);
                }
            }
        }
    }
    let snapshot = TopologySnapshot {
        time_s: 0.0,
        num_orbits: 1,
        sats_per_orbit: sats,
        links,
        positions: vec![[0.0; 3]; sats],
        ground_ids: vec![],
    };
    let services: Vec<Microservice> = (0..microservices)
        .map(|i| Microservice {
            id: format!("ms{i}"),
            flops: rng.gen_range(1e9..5e10),
            memory_bytes: rng.gen_range(1.0..4.0),
            output_bits: rng.gen_range(1e6..1e9),
        })
        .collect();
    let mut tasks = Vec::new();
    if microservices > 0 {
        let two = microservices >= 3 && rng.gen_bool(0.6);
        let split = if two {
            rng.gen_range(1..microservices)
        } else {
            microservices
        };
        let mut groups: Vec<Vec<usize>> = vec![(0..split).collect()];
        if two {
            // second task reuses a prefix of the first task's modules
            let shared = rng.gen_range(0..=split.min(2));
            let mut g: Vec<usize> = (0..shared).collect();
            g.extend(split..microservices);
            groups.push(g);
        }
        for (t, g) in groups.into_iter().enumerate() {
            let nodes: Vec<Microservice> = g.iter().map(|&i| services[i].clone()).collect();
            let mut edges = Vec::new();
            for w in 1..nodes.len() {
                // chain, with an occasional fork joining at the next node
                let from = if w >= 2 && rng.gen_bool(0.3) { w - 2 } else { w - 1 };
                edges.push(msdag::DagEdge {
                    from: nodes[from].id.clone(),
                    to: nodes[w].id.clone(),
                    payload_bits: nodes[from].output_bits,
                });
            }
            // make sure every node except the last has a successor
            for w in 0..nodes.len().saturating_sub(1) {
                if !edges.iter().any(|e| e.from == nodes[w].id) {
                    edges.push(msdag::DagEdge {
                        from: nodes[w].id.clone(),
                        to: nodes[w + 1].id.clone(),
                        payload_bits: nodes[w].output_bits,
                    });
                }
            }
            let dag = ServiceDag {
                id: format!("task{t}"),
                nodes,
                edges,
            };
            let request = TaskRequest {
                dag: dag.id.clone(),
                source_satellite: sat(rng.gen_range(0..sats)),
                destination: None,
                release_time_s: 0.0,
                input_bits: rng.gen_range(1e6..1e9),
                weight: 1.0,
            };
            tasks.push((request, dag));
        }
    }
    let satellites = (0..sats)
        .map(|i| SatelliteResources {
            satellite: sat(i),
            throughput_flops: rng.gen_range(1e10..2e11),
            memory_bytes: rng.gen_range(3.0..9.0),
            energy_budget_j: f64::INFINITY,
        })
        .collect();
    DeploymentInstance {
        tasks,
        satellites,
        snapshot,
        options: DeploymentOptions::default(),
    }
}

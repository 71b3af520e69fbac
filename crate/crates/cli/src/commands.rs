use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use satedge::collective::{plan_all_reduce, Phase, RingSpec};
use satedge::constellation::SatelliteId;
use satedge::deployment::{
    evaluate_plan, solve_exact, solve_greedy, train_policy_gradient, DeploymentEnv, DeploymentPlan, PgConfig, Solution,
};
use satedge::interorbit::{build_weighted_graph, parallel_transfer_time, select_disjoint_paths, RoutePath};
use satedge::msdag::{latency_with, Unplaced};
use satedge::orchestration::{orchestrate, OrchestrationRequest, SteinerSolver};
use satedge::scenario::{parse_scenario, Scenario};
use satedge::sgl_flow::{best_single_link_epochs, schedule_downlink, Direction, TransferRequest};
use satedge::simkernel::{simulate_fine_tuning, AggregationMode, FederationConfig, PHASE_NAMES};

use crate::output::{Outputs, PlotRow};
use crate::{tag, Command, Common, DeploySolver, Mode, TreeSolver};

fn load(common: &Common) -> Result<(Scenario, Outputs)> {
    let scenario = parse_scenario(&common.scenario).map_err(tag("scenario"))?;
    let outputs = Outputs::new(&common.out_dir)?;
    Ok((scenario, outputs))
}

pub fn run(command: Command) -> Result<(String, Vec<PathBuf>)> {
    let (digest, out) = match command {
        Command::Simulate { common, mode } => simulate(&common, mode)?,
        Command::Downlink {
            common,
            compare_single_link,
        } => downlink(&common, compare_single_link)?,
        Command::Allreduce {
            common,
            orbit,
            time,
            payload_bits,
        } => allreduce(&common, orbit, time, payload_bits)?,
        Command::Routes {
            common,
            from_orbit,
            to_orbit,
            time,
            max_paths,
            payload_bits,
        } => routes(&common, from_orbit, to_orbit, time, max_paths, payload_bits)?,
        Command::Deploy { common, solver, seed } => deploy(&common, solver, seed)?,
        Command::Orchestrate {
            common,
            plan,
            request,
            solver,
        } => orchestrate_cmd(&common, &plan, &request, solver)?,
    };
    Ok((digest, out.written))
}

#[derive(Serialize)]
struct RoundRow {
    round: usize,
    start_s: f64,
    embedding_compute_s: f64,
    intra_orbit_gather_s: f64,
    sgl_down_s: f64,
    cloud_encode_s: f64,
    sgl_up_s: f64,
    local_train_s: f64,
    intra_orbit_aggregate_s: f64,
    inter_orbit_or_global_aggregate_s: f64,
    broadcast_s: f64,
    total_s: f64,
    energy_j: f64,
    isl_bits: f64,
    sgl_down_bits: f64,
    sgl_up_bits: f64,
    ground_bits: f64,
    satellite_flops: f64,
    cloud_flops: f64,
    complete: bool,
    failed_phase: String,
}

fn simulate(common: &Common, mode: Option<Mode>) -> Result<(String, Outputs)> {
    let (mut scenario, mut out) = load(common)?;
    let digest = scenario.digest();
    if let Some(m) = mode {
        scenario.federation.aggregation_mode = match m {
            Mode::Ground => AggregationMode::GroundCoordinated,
            Mode::Decentralized => AggregationMode::FullyDecentralized,
        };
    }
    let ctx = scenario.sim_context().map_err(tag("simkernel"))?;
    let (traces, report) = simulate_fine_tuning(&ctx, &scenario.workload).map_err(tag("simkernel"))?;
    let rows: Vec<RoundRow> = traces
        .iter()
        .map(|t| {
            let p = &t.phases;
            RoundRow {
                round: t.round,
                start_s: t.start_s,
                embedding_compute_s: p.embedding_compute,
                intra_orbit_gather_s: p.intra_orbit_gather,
                sgl_down_s: p.sgl_down,
                cloud_encode_s: p.cloud_encode,
                sgl_up_s: p.sgl_up,
                local_train_s: p.local_train,
                intra_orbit_aggregate_s: p.intra_orbit_aggregate,
                inter_orbit_or_global_aggregate_s: p.inter_orbit_or_global_aggregate,
                broadcast_s: p.broadcast,
                total_s: t.total_s,
                energy_j: t.energy_j,
                isl_bits: t.counters.isl_bits,
                sgl_down_bits: t.counters.sgl_down_bits,
                sgl_up_bits: t.counters.sgl_up_bits,
                ground_bits: t.counters.ground_bits,
                satellite_flops: t.counters.satellite_flops,
                cloud_flops: t.counters.cloud_flops,
                complete: t.complete,
                failed_phase: t.failed_phase.clone().unwrap_or_default(),
            }
        })
        .collect();
    out.csv("rounds.csv", &rows)?;

    #[derive(Serialize)]
    struct Aggregate<'a> {
        aggregation_mode: AggregationMode,
        report: &'a satedge::simkernel::FineTuningReport,
    }
    out.json(
        "aggregate.json",
        &Aggregate {
            aggregation_mode: scenario.federation.aggregation_mode,
            report: &report,
        },
    )?;
    if common.emit_plot_data {
        let mut plot = Vec::new();
        for t in &traces {
            for (name, v) in PHASE_NAMES.iter().zip(t.phases.as_array()) {
                plot.push(PlotRow {
                    series: "phase_latency_s".into(),
                    x: t.round as f64,
                    variable: (*name).into(),
                    value: v,
                });
            }
            plot.push(PlotRow {
                series: "round_energy_j".into(),
                x: t.round as f64,
                variable: "energy".into(),
                value: t.energy_j,
            });
        }
        out.csv("simulate_plot.csv", &plot)?;
    }
    Ok((digest, out))
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    start_s: f64,
    end_s: f64,
    orbit: usize,
    delivered_fraction: f64,
    flow_value: f64,
}

fn downlink(common: &Common, compare_single_link: bool) -> Result<(String, Outputs)> {
    let (scenario, mut out) = load(common)?;
    let digest = scenario.digest();
    let d = &scenario.downlink;
    let horizon = d.horizon_s.unwrap_or(scenario.federation.horizon_s);
    let mut sc = scenario.clone();
    sc.federation = FederationConfig {
        start_time_s: d.start_s,
        horizon_s: horizon,
        ..scenario.federation.clone()
    };
    let ctx = sc.sim_context().map_err(tag("constellation"))?;
    let model_bits = d.model_bits.unwrap_or(scenario.workload.head_bits() as f64);
    let req = TransferRequest {
        windows: &ctx.windows,
        stations: &ctx.stations,
        orbits: scenario.constellation.num_orbits,
        model_bits,
        start_s: d.start_s,
        horizon_end_s: d.start_s + horizon,
        epoch_s: d.epoch_s.unwrap_or(scenario.federation.epoch_seconds),
        direction: Direction::Downlink,
    };
    let sched = schedule_downlink(&req).map_err(tag("sgl_flow"))?;
    let single = if compare_single_link {
        Some(best_single_link_epochs(&req).map_err(tag("sgl_flow"))?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for e in &sched.epochs {
        for (o, &f) in e.delivered.iter().enumerate() {
            rows.push(EpochRow {
                epoch: e.index,
                start_s: e.start_s,
                end_s: e.end_s,
                orbit: o,
                delivered_fraction: f,
                flow_value: e.assignment.value,
            });
        }
    }
    out.csv("downlink_epochs.csv", &rows)?;

    #[derive(Serialize)]
    struct Summary {
        orbits: usize,
        model_bits: f64,
        contact_windows: usize,
        complete: bool,
        completion_time_s: Option<f64>,
        epochs_used: usize,
        remaining: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        best_single_link_epochs: Option<Option<usize>>,
    }
    out.json(
        "downlink.json",
        &Summary {
            orbits: req.orbits,
            model_bits,
            contact_windows: ctx.windows.len(),
            complete: sched.complete,
            completion_time_s: sched.completion_time_s,
            epochs_used: sched.epochs_used(),
            remaining: sched.final_state.remaining.clone(),
            best_single_link_epochs: single,
        },
    )?;
    if common.emit_plot_data {
        let plot: Vec<PlotRow> = rows
            .iter()
            .map(|r| PlotRow {
                series: "delivered_fraction".into(),
                x: r.epoch as f64,
                variable: format!("orbit_{}", r.orbit),
                value: r.delivered_fraction,
            })
            .collect();
        out.csv("downlink_plot.csv", &plot)?;
    }
    Ok((digest, out))
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    phase: &'static str,
    sender: usize,
    receiver: usize,
    block: usize,
    bits: u64,
    step_duration_s: f64,
}

fn allreduce(common: &Common, orbit: usize, time: f64, payload_bits: Option<u64>) -> Result<(String, Outputs)> {
    let (scenario, mut out) = load(common)?;
    let digest = scenario.digest();
    if orbit >= scenario.constellation.num_orbits {
        return Err(anyhow!("orbit {orbit} does not exist")).map_err(tag("collective"));
    }
    let snapshot = scenario
        .build_constellation()
        .snapshot(time, &scenario.constellation.link_config);
    let rates: Vec<f64> = snapshot
        .ring_rates(orbit)
        .into_iter()
        .enumerate()
        .map(|(slot, r)| r.ok_or_else(|| anyhow!("ring edge from slot {slot} is down")))
        .collect::<Result<_>>()
        .map_err(tag("collective"))?;
    let ring = RingSpec::new(rates).map_err(tag("collective"))?;
    let bits = payload_bits.unwrap_or(scenario.workload.head_bits());
    let result = plan_all_reduce(&ring, bits).map_err(tag("collective"))?;
    let durations = result.schedule.step_durations();
    let rows: Vec<StepRow> = result
        .schedule
        .steps
        .iter()
        .map(|t| StepRow {
            step: t.step,
            phase: match t.phase {
                Phase::ReduceScatter => "reduce_scatter",
                Phase::AllGather => "all_gather",
            },
            sender: t.sender,
            receiver: t.receiver,
            block: t.block,
            bits: t.bits,
            step_duration_s: durations[t.step],
        })
        .collect();
    out.csv("allreduce_steps.csv", &rows)?;

    let n = ring.node_count() as f64;
    let min_rate = ring.link_rates().iter().copied().fold(f64::INFINITY, f64::min);
    #[derive(Serialize)]
    struct Summary {
        orbit: usize,
        nodes: usize,
        payload_bits: u64,
        block_bits: u64,
        completion_time_s: f64,
        unpadded_bound_s: f64,
        bits_sent_per_node: Vec<u64>,
    }
    out.json(
        "allreduce.json",
        &Summary {
            orbit,
            nodes: ring.node_count(),
            payload_bits: bits,
            block_bits: bits.div_ceil(ring.node_count() as u64),
            completion_time_s: result.completion_time_s,
            unpadded_bound_s: 2.0 * (n - 1.0) / n * bits as f64 / min_rate,
            bits_sent_per_node: result.bits_sent_per_node.clone(),
        },
    )?;
    if common.emit_plot_data {
        let plot: Vec<PlotRow> = durations
            .iter()
            .enumerate()
            .map(|(k, &d)| PlotRow {
                series: "allreduce".into(),
                x: k as f64,
                variable: "step_duration_s".into(),
                value: d,
            })
            .collect();
        out.csv("allreduce_plot.csv", &plot)?;
    }
    Ok((digest, out))
}

#[derive(Serialize)]
struct PathRow {
    path: usize,
    hops: usize,
    bottleneck_bps: f64,
    propagation_delay_s: f64,
    weight: f64,
    nodes: String,
}

fn routes(
    common: &Common,
    from_orbit: usize,
    to_orbit: usize,
    time: f64,
    max_paths: Option<usize>,
    payload_bits: Option<u64>,
) -> Result<(String, Outputs)> {
    let (scenario, mut out) = load(common)?;
    let digest = scenario.digest();
    let p = scenario.constellation.num_orbits;
    if from_orbit >= p || to_orbit >= p {
        return Err(anyhow!("orbits must be below {p}")).map_err(tag("interorbit"));
    }
    let snapshot = scenario
        .build_constellation()
        .snapshot(time, &scenario.constellation.link_config);
    let graph = build_weighted_graph(&snapshot);
    let paths = select_disjoint_paths(&graph, from_orbit, to_orbit, max_paths).map_err(tag("interorbit"))?;
    let bits = payload_bits.unwrap_or(scenario.workload.head_bits()) as f64;
    let transfer = if paths.is_empty() {
        None
    } else {
        Some(parallel_transfer_time(&paths, bits).map_err(tag("interorbit"))?)
    };
    let rows: Vec<PathRow> = paths
        .paths
        .iter()
        .enumerate()
        .map(|(i, r)| PathRow {
            path: i,
            hops: r.hop_count(),
            bottleneck_bps: r.bottleneck_bps,
            propagation_delay_s: r.propagation_delay_s,
            weight: r.weight,
            nodes: r.nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "),
        })
        .collect();
    out.csv("routes.csv", &rows)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        from_orbit: usize,
        to_orbit: usize,
        time_s: f64,
        payload_bits: f64,
        paths: &'a [RoutePath],
        total_bottleneck_bps: f64,
        parallel_transfer_time_s: Option<f64>,
    }
    out.json(
        "routes.json",
        &Summary {
            from_orbit,
            to_orbit,
            time_s: time,
            payload_bits: bits,
            paths: &paths.paths,
            total_bottleneck_bps: paths.total_bottleneck_bps(),
            parallel_transfer_time_s: transfer,
        },
    )?;
    if common.emit_plot_data {
        let plot: Vec<PlotRow> = rows
            .iter()
            .map(|r| PlotRow {
                series: "disjoint_paths".into(),
                x: r.path as f64,
                variable: "bottleneck_bps".into(),
                value: r.bottleneck_bps,
            })
            .collect();
        out.csv("routes_plot.csv", &plot)?;
    }
    Ok((digest, out))
}

#[derive(Serialize)]
struct PlanFile {
    solver: &'static str,
    feasible: bool,
    assignment: BTreeMap<String, SatelliteId>,
    objective_s: Option<f64>,
    task_latency_s: Vec<Option<f64>>,
}

fn deploy(common: &Common, solver: DeploySolver, seed: Option<u64>) -> Result<(String, Outputs)> {
    let (scenario, mut out) = load(common)?;
    let digest = scenario.digest();
    let instance = scenario.deployment_instance();
    let (name, solution) = match solver {
        DeploySolver::Exact => ("exact", solve_exact(&instance).map_err(tag("deployment"))?),
        DeploySolver::Greedy => ("greedy", solve_greedy(&instance).map_err(tag("deployment"))?),
        DeploySolver::Pg => {
            let seed = seed
                .or(scenario.seed)
                .ok_or_else(|| anyhow!("the pg solver needs a seed (--seed or scenario `seed`)"))
                .map_err(tag("deployment"))?;
            let cfg = PgConfig {
                seed,
                ..scenario.deployment.policy_gradient.clone()
            };
            let (policy, report) =
                train_policy_gradient(std::slice::from_ref(&instance), &[], &cfg).map_err(tag("deployment"))?;
            log::info!(
                "policy {:?}, last-tenth mean return {}",
                policy.weights,
                report.mean_return_last_tenth
            );
            let env = DeploymentEnv::new(&instance).map_err(tag("deployment"))?;
            let (_, state) = policy.rollout(&env, seed).map_err(tag("deployment"))?;
            let plan = env.plan_of(&state);
            let objective = if plan.feasible {
                evaluate_plan(&instance, &plan).map_err(tag("deployment"))?
            } else {
                None
            };
            ("pg", Solution { plan, objective })
        }
    };
    let latencies = if solution.plan.feasible {
        let router = satedge::interorbit::Router::for_snapshot(&instance.snapshot);
        let mut model = satedge::msdag::LatencyModel::uniform(scenario.compute.satellite_flops);
        model.edge_overhead_s = instance.options.edge_overhead_s;
        for s in &instance.satellites {
            model.throughput_flops.insert(s.satellite, s.throughput_flops);
        }
        let host = |id: &str| solution.plan.assignment.get(id).copied();
        instance
            .tasks
            .iter()
            .map(|(t, d)| {
                latency_with(t, d, &router, &model, &host, Unplaced::Reject)
                    .ok()
                    .map(|l| l.total_s)
            })
            .collect()
    } else {
        Vec::new()
    };
    out.json(
        "plan.json",
        &PlanFile {
            solver: name,
            feasible: solution.plan.feasible,
            assignment: solution.plan.assignment.clone(),
            objective_s: solution.objective,
            task_latency_s: latencies,
        },
    )?;
    Ok((digest, out))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestFile {
    dag: String,
    ingress: SatelliteId,
    egress: SatelliteId,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn orchestrate_cmd(common: &Common, plan: &Path, request: &Path, solver: TreeSolver) -> Result<(String, Outputs)> {
    let (scenario, mut out) = load(common)?;
    let digest = scenario.digest();
    let plan: DeploymentPlan = read_json(plan).map_err(|e| tag("orchestration")(format!("{e:#}")))?;
    let request: RequestFile = read_json(request).map_err(|e| tag("orchestration")(format!("{e:#}")))?;
    let dag = scenario
        .dag(&request.dag)
        .ok_or_else(|| anyhow!("unknown dag id `{}`", request.dag))
        .map_err(tag("orchestration"))?;
    let snapshot = scenario
        .build_constellation()
        .snapshot(scenario.deployment.snapshot_time_s, &scenario.constellation.link_config);
    let result = orchestrate(
        &snapshot,
        &plan,
        dag,
        &OrchestrationRequest {
            ingress: request.ingress,
            egress: request.egress,
        },
        &scenario.routing_energy,
        match solver {
            TreeSolver::Heuristic => SteinerSolver::Heuristic,
            TreeSolver::Exact => SteinerSolver::Exact,
        },
    )
    .map_err(tag("orchestration"))?;
    out.json("tree.json", &result)?;
    Ok((digest, out))
}

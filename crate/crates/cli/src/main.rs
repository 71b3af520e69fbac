mod commands;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Deterministic planning and simulation for LEO satellite edge-AI networks.
#[derive(Debug, Parser)]
#[command(name = "satedge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Directory for output files; created if missing.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Also write tidy long-format CSV for plotting.
    #[arg(long)]
    pub emit_plot_data: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Ground,
    Decentralized,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DeploySolver {
    Exact,
    Greedy,
    Pg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TreeSolver {
    Heuristic,
    Exact,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run federated fine-tuning rounds; writes rounds.csv and aggregate.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Override the scenario's aggregation mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Schedule a multi-satellite, multi-station downlink of one payload per orbit.
    Downlink {
        #[command(flatten)]
        common: Common,
        /// Also compute the best single satellite-station schedule.
        #[arg(long)]
        compare_single_link: bool,
    },
    /// Plan a ring all-reduce over one orbit's intra-orbit links.
    Allreduce {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        orbit: usize,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Defaults to the workload's head size.
        #[arg(long)]
        payload_bits: Option<u64>,
    },
    /// Edge-disjoint inter-orbit paths between two orbits.
    Routes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        from_orbit: usize,
        #[arg(long, default_value_t = 1)]
        to_orbit: usize,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        max_paths: Option<usize>,
        /// Defaults to the workload's head size.
        #[arg(long)]
        payload_bits: Option<u64>,
    },
    /// Place the scenario's microservices on satellites; writes plan.json.
    Deploy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "greedy")]
        solver: DeploySolver,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Route one request through deployed microservices; writes tree.json.
    Orchestrate {
        #[command(flatten)]
        common: Common,
        /// Plan JSON as written by `deploy`.
        #[arg(long)]
        plan: PathBuf,
        /// Request JSON: {"dag": ..., "ingress": {...}, "egress": {...}}.
        #[arg(long)]
        request: PathBuf,
        #[arg(long, value_enum, default_value = "heuristic")]
        solver: TreeSolver,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Downlink { .. } => "downlink",
            Command::Allreduce { .. } => "allreduce",
            Command::Routes { .. } => "routes",
            Command::Deploy { .. } => "deploy",
            Command::Orchestrate { .. } => "orchestrate",
        }
    }
}

/// Error tagged with the module that raised it.
#[derive(Debug)]
pub struct ModuleError {
    pub module: &'static str,
    pub message: String,
}

impl fmt::Display for ModuleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ModuleError {}

pub fn tag<E: fmt::Display>(module: &'static str) -> impl FnOnce(E) -> anyhow::Error {
    move |e| {
        ModuleError {
            module,
            message: e.to_string(),
        }
        .into()
    }
}

#[derive(Serialize)]
struct RunReport {
    subcommand: &'static str,
    input_digest: String,
    outputs: Vec<PathBuf>,
    wall_clock_s: f64,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    module: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SATEDGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    let started = Instant::now();
    match commands::run(cli.command) {
        Ok((digest, outputs)) => {
            let report = RunReport {
                subcommand: name,
                input_digest: digest,
                outputs,
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let module = e
                .chain()
                .find_map(|c| c.downcast_ref::<ModuleError>())
                .map_or("cli", |m| m.module);
            let report = ErrorReport {
                error: ErrorBody {
                    module,
                    message: format!("{e:#}"),
                },
            };
            eprintln!("{}", serde_json::to_string(&report).expect("error serializes"));
            ExitCode::FAILURE
        }
    }
}

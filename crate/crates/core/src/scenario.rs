//! Scenario files: strict JSON parsing, cross-reference validation and a
//! content digest.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::constellation::{build_walker, Constellation, ConstellationSpec, GroundStation, LinkConfig, SatelliteId};
use crate::deployment::{DeploymentInstance, DeploymentOptions, PgConfig, SatelliteResources};
use crate::msdag::{validate_dag, ServiceDag, TaskRequest};
use crate::orchestration::EnergyModel;
use crate::simkernel::{ComputeConfig, EnergyConstants, FederationConfig, SimContext, SimError, WorkloadSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}, column {column}, at `{path}`: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationSection {
    pub num_orbits: usize,
    pub sats_per_orbit: usize,
    pub altitude_km: f64,
    pub inclination_deg: f64,
    #[serde(default)]
    pub phasing_factor: usize,
    #[serde(default)]
    pub epoch_s: f64,
    #[serde(default)]
    pub link_config: LinkConfig,
    #[serde(default)]
    pub ground_stations: Vec<GroundStation>,
}

impl ConstellationSection {
    pub fn spec(&self) -> ConstellationSpec {
        ConstellationSpec {
            num_orbits: self.num_orbits,
            sats_per_orbit: self.sats_per_orbit,
            altitude_km: self.altitude_km,
            inclination_deg: self.inclination_deg,
            phasing_factor: self.phasing_factor,
            epoch_s: self.epoch_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploymentSection {
    /// Time of the topology snapshot used for routing.
    pub snapshot_time_s: f64,
    /// Candidate hosts; `None` means every satellite with the default profile.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<SatelliteResources>>,
    pub default_memory_bytes: f64,
    pub options: DeploymentOptions,
    pub policy_gradient: PgConfig,
}

impl Default for DeploymentSection {
    fn default() -> Self {
        Self {
            snapshot_time_s: 0.0,
            candidates: None,
            default_memory_bytes: 4e9,
            options: DeploymentOptions::default(),
            policy_gradient: PgConfig {
                episodes: 300,
                ..PgConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownlinkSection {
    /// Per-orbit payload; defaults to the head size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_bits: Option<f64>,
    pub start_s: f64,
    /// Defaults to the federation horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<f64>,
    /// Defaults to the federation epoch length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub constellation: ConstellationSection,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub compute: ComputeConfig,
    #[serde(default)]
    pub energy: EnergyConstants,
    #[serde(default)]
    pub routing_energy: EnergyModel,
    #[serde(default)]
    pub dags: Vec<ServiceDag>,
    #[serde(default)]
    pub tasks: Vec<TaskRequest>,
    #[serde(default)]
    pub deployment: DeploymentSection,
    #[serde(default)]
    pub downlink: DownlinkSection,
}

/// Parses and validates scenario JSON.
pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ScenarioError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario_str(&text)
}

impl Scenario {
    /// Collects every cross-reference and range problem.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut issues = Vec::new();
        let spec = self.constellation.spec();
        if let Err(e) = spec.validate() {
            issues.push(format!("constellation: {e}"));
        }
        let mut station_ids = BTreeSet::new();
        for gs in &self.constellation.ground_stations {
            if let Err(e) = gs.validate() {
                issues.push(format!("ground station {}: {e}", gs.id));
            }
            if !station_ids.insert(gs.id) {
                issues.push(format!("duplicate ground station id {}", gs.id));
            }
        }
        if let Err(e) = self.workload.validate() {
            issues.push(format!("workload: {e}"));
        }
        if self.federation.rounds == 0 {
            issues.push("federation: rounds must be at least 1".into());
        }
        let contains = |s: SatelliteId| s.orbit < spec.num_orbits && s.slot < spec.sats_per_orbit;
        let mut dag_ids = BTreeSet::new();
        for dag in &self.dags {
            if !dag_ids.insert(dag.id.as_str()) {
                issues.push(format!("duplicate dag id {}", dag.id));
            }
            for v in validate_dag(dag).violations {
                issues.push(format!("dag {}: {v:?}", dag.id));
            }
        }
        for (i, task) in self.tasks.iter().enumerate() {
            if !dag_ids.contains(task.dag.as_str()) {
                issues.push(format!("task {i} references unknown dag id `{}`", task.dag));
            }
            if !contains(task.source_satellite) {
                issues.push(format!(
                    "task {i} source {} is not in the constellation",
                    task.source_satellite
                ));
            }
            if let Some(d) = task.destination {
                if !station_ids.contains(&d) {
                    issues.push(format!("task {i} destination ground station {d} does not exist"));
                }
            }
        }
        if let Some(c) = &self.deployment.candidates {
            for r in c {
                if !contains(r.satellite) {
                    issues.push(format!(
                        "deployment candidate {} is not in the constellation",
                        r.satellite
                    ));
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(issues))
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded. Formatting and key
    /// order of the source file do not affect it.
    pub fn digest(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn dag(&self, id: &str) -> Option<&ServiceDag> {
        self.dags.iter().find(|d| d.id == id)
    }

    pub fn build_constellation(&self) -> Constellation {
        build_walker(self.constellation.spec()).expect("validated scenario")
    }

    pub fn sim_context(&self) -> Result<SimContext, SimError> {
        SimContext::new(
            self.build_constellation(),
            self.constellation.link_config,
            self.constellation.ground_stations.clone(),
            self.federation.clone(),
            self.compute,
            self.energy,
        )
    }

    /// Placement instance over all tasks, on the snapshot (with ground
    /// stations) at `deployment.snapshot_time_s`.
    pub fn deployment_instance(&self) -> DeploymentInstance {
        let constellation = self.build_constellation();
        let snapshot = constellation.snapshot_with_ground(
            self.deployment.snapshot_time_s,
            &self.constellation.link_config,
            &self.constellation.ground_stations,
        );
        let satellites = self.deployment.candidates.clone().unwrap_or_else(|| {
            constellation
                .satellites()
                .map(|s| SatelliteResources {
                    satellite: s,
                    throughput_flops: self.compute.satellite_flops,
                    memory_bytes: self.deployment.default_memory_bytes,
                    energy_budget_j: f64::INFINITY,
                })
                .collect()
        });
        DeploymentInstance {
            tasks: self
                .tasks
                .iter()
                .map(|t| (t.clone(), self.dag(&t.dag).expect("validated scenario").clone()))
                .collect(),
            satellites,
            snapshot,
            options: self.deployment.options.clone(),
        }
    }
}

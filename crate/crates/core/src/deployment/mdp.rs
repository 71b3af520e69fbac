use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{DeploymentError, DeploymentInstance, DeploymentPlan, Prepared};
use crate::constellation::SatelliteId;
use crate::msdag::Unplaced;

/// Sequential placement environment. Services are placed in the fixed
/// topological order; an action is the index of a candidate satellite.
#[derive(Debug, Clone)]
pub struct DeploymentEnv {
    pub(crate) prepared: Prepared,
    snapshot_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MdpState {
    /// Candidate-satellite index per service, in placement order.
    pub placed: Vec<Option<usize>>,
    pub residual_memory: Vec<f64>,
    pub residual_energy: Vec<f64>,
    pub snapshot_digest: String,
    pub seed: u64,
    /// Partial objective with unplaced services free; zero before the first step.
    pub potential: f64,
    pub done: bool,
    pub dead_end: bool,
}

impl MdpState {
    pub fn step_index(&self) -> usize {
        self.placed.iter().take_while(|p| p.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MdpTransition {
    pub state: MdpState,
    pub microservice: String,
    pub satellite: SatelliteId,
    pub reward: f64,
    pub done: bool,
}

impl DeploymentEnv {
    pub fn new(instance: &DeploymentInstance) -> Result<Self, DeploymentError> {
        let prepared = Prepared::new(instance)?;
        let bytes = serde_json::to_vec(&instance.snapshot).expect("snapshot serializes");
        let snapshot_digest = format!("{:x}", Sha256::digest(bytes));
        Ok(Self {
            prepared,
            snapshot_digest,
        })
    }

    pub fn microservices(&self) -> Vec<&str> {
        self.prepared.services.iter().map(|m| m.id.as_str()).collect()
    }

    pub fn satellites(&self) -> Vec<SatelliteId> {
        self.prepared.instance.satellites.iter().map(|s| s.satellite).collect()
    }

    pub fn reset(&self, seed: u64) -> MdpState {
        let sats = &self.prepared.instance.satellites;
        let mut state = MdpState {
            placed: vec![None; self.prepared.services.len()],
            residual_memory: sats.iter().map(|s| s.memory_bytes).collect(),
            residual_energy: sats.iter().map(|s| s.energy_budget_j).collect(),
            snapshot_digest: self.snapshot_digest.clone(),
            seed,
            potential: 0.0,
            done: false,
            dead_end: false,
        };
        if state.placed.is_empty() {
            state.done = true;
        } else if self.feasible_actions(&state).is_empty() {
            state.done = true;
            state.dead_end = true;
        }
        state
    }

    /// Reward credited on reset when the very first service cannot be placed.
    pub fn initial_reward(&self, state: &MdpState) -> f64 {
        if state.dead_end && state.step_index() == 0 {
            self.prepared.instance.options.dead_end_reward
        } else {
            0.0
        }
    }

    pub fn current_microservice(&self, state: &MdpState) -> Option<&str> {
        if state.done {
            return None;
        }
        self.prepared.services.get(state.step_index()).map(|m| m.id.as_str())
    }

    pub fn feasible_actions(&self, state: &MdpState) -> Vec<usize> {
        let k = state.step_index();
        let Some(ms) = self.prepared.services.get(k) else {
            return Vec::new();
        };
        let opts = &self.prepared.instance.options;
        (0..self.prepared.satellite_count())
            .filter(|&s| {
                ms.memory_bytes <= state.residual_memory[s]
                    && (!opts.enforce_energy || self.prepared.energy_of(k) <= state.residual_energy[s])
            })
            .collect()
    }

    /// Partial objective of `placed`, unplaced services contributing nothing.
    pub(crate) fn potential(&self, placed: &[Option<usize>]) -> f64 {
        self.prepared.objective(placed, Unplaced::Optimistic(f64::INFINITY))
    }

    pub fn step(&self, state: &MdpState, action: usize) -> Result<MdpTransition, DeploymentError> {
        if state.done {
            return Err(DeploymentError::EpisodeDone);
        }
        let feasible = self.feasible_actions(state);
        if !feasible.contains(&action) {
            return Err(DeploymentError::InfeasibleAction { action, feasible });
        }
        let k = state.step_index();
        let ms = &self.prepared.services[k];
        let opts = &self.prepared.instance.options;
        let mut next = state.clone();
        next.placed[k] = Some(action);
        next.residual_memory[action] -= ms.memory_bytes;
        next.residual_energy[action] -= self.prepared.energy_of(k);
        let phi = self.potential(&next.placed);
        let capacity = self.prepared.instance.satellites[action].memory_bytes;
        let penalty = if opts.resource_weight != 0.0 && capacity > 0.0 {
            opts.resource_weight * ms.memory_bytes / capacity
        } else {
            0.0
        };
        let mut reward;
        if phi.is_finite() {
            reward = -(phi - state.potential) - penalty;
            next.potential = phi;
            if k + 1 == next.placed.len() {
                next.done = true;
            } else if self.feasible_actions(&next).is_empty() {
                next.done = true;
                next.dead_end = true;
                reward += opts.dead_end_reward;
            }
        } else {
            reward = opts.dead_end_reward;
            next.done = true;
            next.dead_end = true;
        }
        let done = next.done;
        Ok(MdpTransition {
            microservice: ms.id.clone(),
            satellite: self.prepared.instance.satellites[action].satellite,
            state: next,
            reward,
            done,
        })
    }

    /// Action sequence realising `plan`, or `None` if it names a
    /// non-candidate host or misses a service.
    pub fn actions_for(&self, plan: &DeploymentPlan) -> Option<Vec<usize>> {
        let sats = self.satellites();
        self.prepared
            .services
            .iter()
            .map(|m| {
                let host = plan.assignment.get(&m.id)?;
                sats.iter().position(|s| s == host)
            })
            .collect()
    }

    pub fn plan_of(&self, state: &MdpState) -> DeploymentPlan {
        self.prepared.plan_of(&state.placed)
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn replay(env: &DeploymentEnv, actions: &[usize]) -> (f64, MdpState) {
        let mut s = env.reset(0);
        let mut total = env.initial_reward(&s);
        for &a in actions {
            let t = env.step(&s, a).unwrap();
            total += t.reward;
            s = t.state;
        }
        (total, s)
    }

    #[test]
    fn replay_exact_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 4);
            let sol = solve_exact(&inst).unwrap();
            let Some(obj) = sol.objective else { continue };
            let env = DeploymentEnv::new(&inst).unwrap();
            let actions = env.actions_for(&sol.plan).unwrap();
            let (ret, s) = replay(&env, &actions);
            assert!(s.done && !s.dead_end);
            assert!((ret + obj).abs() <= 1e-9 * obj.max(1.0), "{ret} vs {obj}");
        }
    }

    #[test]
    fn last_step_done() {
        let dag = chain("d", vec![ms("a", 1e9, 1.0), ms("b", 2e9, 1.0)], 0.0);
        let inst = line_instance(&[1e9], 10.0, 1e9, 0.0, vec![(request("d", 0), dag)]);
        let env = DeploymentEnv::new(&inst).unwrap();
        let s0 = env.reset(0);
        let t1 = env.step(&s0, 0).unwrap();
        assert!(!t1.done);
        assert_eq!(t1.reward, -1.0);
        let t2 = env.step(&t1.state, 0).unwrap();
        assert!(t2.done);
        assert_eq!(t1.reward + t2.reward, -3.0);
        assert!(matches!(env.step(&t2.state, 0), Err(DeploymentError::EpisodeDone)));
    }

    #[test]
    fn infeasible_action_lists_feasible() {
        let dag = chain("d", vec![ms("a", 1e9, 5.0)], 0.0);
        let mut inst = line_instance(&[1e9, 1e9], 10.0, 1e9, 0.0, vec![(request("d", 0), dag)]);
        inst.satellites[0].memory_bytes = 1.0;
        let env = DeploymentEnv::new(&inst).unwrap();
        let err = env.step(&env.reset(0), 0).unwrap_err();
        assert_eq!(
            err,
            DeploymentError::InfeasibleAction {
                action: 0,
                feasible: vec![1]
            }
        );
    }

    #[test]
    fn dead_end_is_terminal() {
        let dag = chain("d", vec![ms("a", 1e9, 2.0), ms("b", 1e9, 2.0)], 0.0);
        let inst = line_instance(&[1e9], 3.0, 1e9, 0.0, vec![(request("d", 0), dag)]);
        let env = DeploymentEnv::new(&inst).unwrap();
        let t = env.step(&env.reset(0), 0).unwrap();
        assert!(t.done && t.state.dead_end);
        assert_eq!(t.reward, -1.0 - 1e6);
    }

    #[test]
    fn empty_episode() {
        let inst = line_instance(&[1e9], 3.0, 1e9, 0.0, vec![]);
        let env = DeploymentEnv::new(&inst).unwrap();
        let s = env.reset(5);
        assert!(s.done);
        assert_eq!(env.initial_reward(&s), 0.0);
    }

    #[test]
    fn deterministic_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inst = random_instance(&mut rng, 3, 4);
        let env = DeploymentEnv::new(&inst).unwrap();
        let run = || {
            let mut s = env.reset(9);
            let mut out = Vec::new();
            while !s.done {
                let a = *env.feasible_actions(&s).last().unwrap();
                let t = env.step(&s, a).unwrap();
                s = t.state.clone();
                out.push(t);
            }
            out
        };
        assert_eq!(run(), run());
    }
}

//! Linear softmax placement policy trained with REINFORCE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{solve_exact, DeploymentEnv, DeploymentError, DeploymentInstance, MdpState};

pub const FEATURE_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub weights: [f64; FEATURE_COUNT],
}

impl Default for LinearPolicy {
    /// All-zero weights: uniform over feasible actions.
    fn default() -> Self {
        Self {
            weights: [0.0; FEATURE_COUNT],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgConfig {
    pub episodes: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub mean_return: f64,
    /// Mean of (achieved cost - optimum) / optimum over instances the exact
    /// solver could bound and solve.
    pub mean_gap: Option<f64>,
    pub returns: Vec<f64>,
    pub gaps: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub episodes: usize,
    pub mean_return_first_tenth: f64,
    pub mean_return_last_tenth: f64,
    pub holdout: Option<EvaluationReport>,
}

/// Per-action features at `state`: normalised negative potential increase,
/// memory tightness, co-location with placed DAG neighbours, normalised
/// negative compute time.
fn features(env: &DeploymentEnv, state: &MdpState, actions: &[usize]) -> Vec<[f64; FEATURE_COUNT]> {
    let p = &env.prepared;
    let k = state.step_index();
    let ms = &p.services[k];
    let deltas: Vec<f64> = actions
        .iter()
        .map(|&a| {
            let mut placed = state.placed.clone();
            placed[k] = Some(a);
            env.potential(&placed) - state.potential
        })
        .collect();
    let dscale = deltas
        .iter()
        .filter(|d| d.is_finite())
        .fold(0.0f64, |m, d| m.max(d.abs()))
        .max(f64::MIN_POSITIVE);
    let compute: Vec<f64> = actions
        .iter()
        .map(|&a| ms.flops / p.instance.satellites[a].throughput_flops)
        .collect();
    let cscale = compute.iter().fold(0.0f64, |m, c| m.max(*c)).max(f64::MIN_POSITIVE);
    let neighbours = &p.neighbours[k];
    actions
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f0 = if deltas[i].is_finite() {
                -deltas[i] / dscale
            } else {
                -1.0
            };
            let f1 = if state.residual_memory[a] > 0.0 {
                -(ms.memory_bytes / state.residual_memory[a]).min(1.0)
            } else {
                0.0
            };
            let placed_nb: Vec<usize> = neighbours.iter().filter_map(|&n| state.placed[n]).collect();
            let f2 = if placed_nb.is_empty() {
                0.0
            } else {
                placed_nb.iter().filter(|&&h| h == a).count() as f64 / placed_nb.len() as f64
            };
            let f3 = -compute[i] / cscale;
            [f0, f1, f2, f3]
        })
        .collect()
}

fn softmax(policy: &LinearPolicy, feats: &[[f64; FEATURE_COUNT]]) -> Vec<f64> {
    let scores: Vec<f64> = feats
        .iter()
        .map(|f| f.iter().zip(&policy.weights).map(|(x, w)| x * w).sum())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

impl LinearPolicy {
    pub fn action_probabilities(&self, env: &DeploymentEnv, state: &MdpState) -> Vec<(usize, f64)> {
        let actions = env.feasible_actions(state);
        let probs = softmax(self, &features(env, state, &actions));
        actions.into_iter().zip(probs).collect()
    }

    /// Highest-probability action, ties to the lowest index.
    pub fn greedy_action(&self, env: &DeploymentEnv, state: &MdpState) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (a, p) in self.action_probabilities(env, state) {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((a, p));
            }
        }
        best.map(|(a, _)| a)
    }

    /// Greedy rollout; returns the total reward and the final state.
    pub fn rollout(&self, env: &DeploymentEnv, seed: u64) -> Result<(f64, MdpState), DeploymentError> {
        let mut s = env.reset(seed);
        let mut total = env.initial_reward(&s);
        while let Some(a) = (!s.done).then(|| self.greedy_action(env, &s)).flatten() {
            let t = env.step(&s, a)?;
            total += t.reward;
            s = t.state;
        }
        Ok((total, s))
    }
}

struct Episode {
    total: f64,
    grads: [f64; FEATURE_COUNT],
}

fn sample_episode(
    policy: &LinearPolicy,
    env: &DeploymentEnv,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, DeploymentError> {
    let mut s = env.reset(0);
    let mut total = env.initial_reward(&s);
    let mut grads = [0.0; FEATURE_COUNT];
    while !s.done {
        let actions = env.feasible_actions(&s);
        let feats = features(env, &s, &actions);
        let probs = softmax(policy, &feats);
        let u: f64 = rng.gen();
        let mut pick = probs.len() - 1;
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        // grad log pi = f(a) - E_pi[f]
        for j in 0..FEATURE_COUNT {
            let mean: f64 = feats.iter().zip(&probs).map(|(f, p)| f[j] * p).sum();
            grads[j] += feats[pick][j] - mean;
        }
        let t = env.step(&s, actions[pick])?;
        total += t.reward;
        s = t.state;
    }
    Ok(Episode { total, grads })
}

/// REINFORCE over `train` (round-robin) with a per-instance running-mean
/// baseline and scale-normalised advantages. Evaluates greedily on `holdout`
/// when it is non-empty.
pub fn train_policy_gradient(
    train: &[DeploymentInstance],
    holdout: &[DeploymentInstance],
    config: &PgConfig,
) -> Result<(LinearPolicy, TrainingReport), DeploymentError> {
    let envs: Vec<DeploymentEnv> = train.iter().map(DeploymentEnv::new).collect::<Result<_, _>>()?;
    let mut policy = LinearPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut baseline: Vec<Option<f64>> = vec![None; envs.len()];
    let mut returns = Vec::with_capacity(config.episodes);
    if !envs.is_empty() {
        for ep in 0..config.episodes {
            let i = ep % envs.len();
            let e = sample_episode(&policy, &envs[i], &mut rng)?;
            returns.push(e.total);
            let b = *baseline[i].get_or_insert(e.total);
            let adv = (e.total - b) / b.abs().max(1e-12);
            for (w, g) in policy.weights.iter_mut().zip(e.grads) {
                *w += config.learning_rate * adv.clamp(-1.0, 1.0) * g;
            }
            baseline[i] = Some(0.9 * b + 0.1 * e.total);
        }
    }
    let tenth = (returns.len() / 10).max(1).min(returns.len());
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let report = TrainingReport {
        episodes: config.episodes,
        mean_return_first_tenth: mean(&returns[..tenth]),
        mean_return_last_tenth: mean(&returns[returns.len() - tenth..]),
        holdout: if holdout.is_empty() {
            None
        } else {
            Some(evaluate_policy(&policy, holdout)?)
        },
    };
    Ok((policy, report))
}

fn optimum(instance: &DeploymentInstance) -> Option<f64> {
    solve_exact(instance).ok().and_then(|s| s.objective)
}

fn report(returns: Vec<f64>, optima: &[Option<f64>]) -> EvaluationReport {
    let gaps: Vec<Option<f64>> = returns
        .iter()
        .zip(optima)
        .map(|(r, o)| o.filter(|o| *o > 0.0).map(|o| (-r - o) / o))
        .collect();
    let known: Vec<f64> = gaps.iter().flatten().copied().collect();
    EvaluationReport {
        mean_return: returns.iter().sum::<f64>() / returns.len().max(1) as f64,
        mean_gap: (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64),
        returns,
        gaps,
    }
}

/// Greedy-rollout evaluation of `policy` on each instance.
pub fn evaluate_policy(
    policy: &LinearPolicy,
    instances: &[DeploymentInstance],
) -> Result<EvaluationReport, DeploymentError> {
    let mut returns = Vec::with_capacity(instances.len());
    for inst in instances {
        returns.push(policy.rollout(&DeploymentEnv::new(inst)?, 0)?.0);
    }
    let optima: Vec<Option<f64>> = instances.iter().map(optimum).collect();
    Ok(report(returns, &optima))
}

/// Uniform-random policy, averaging `samples` episodes per instance.
pub fn evaluate_random_policy(
    instances: &[DeploymentInstance],
    samples: usize,
    seed: u64,
) -> Result<EvaluationReport, DeploymentError> {
    let uniform = LinearPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(instances.len());
    for inst in instances {
        let env = DeploymentEnv::new(inst)?;
        let mut acc = 0.0;
        for _ in 0..samples.max(1) {
            acc += sample_episode(&uniform, &env, &mut rng)?.total;
        }
        returns.push(acc / samples.max(1) as f64);
    }
    let optima: Vec<Option<f64>> = instances.iter().map(optimum).collect();
    Ok(report(returns, &optima))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use super::*;

    fn bench(seed: u64, count: usize) -> Vec<DeploymentInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| random_instance(&mut rng, 3, 4)).collect()
    }

    #[test]
    fn reproducible() {
        let train = bench(1, 4);
        let cfg = PgConfig {
            episodes: 40,
            ..PgConfig::default()
        };
        let (a, _) = train_policy_gradient(&train, &[], &cfg).unwrap();
        let (b, _) = train_policy_gradient(&train, &[], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forced_trajectory() {
        let dag = chain("d", vec![ms("a", 1e9, 1.0), ms("b", 1e9, 1.0)], 0.0);
        let inst = line_instance(&[1e9], 10.0, 1e9, 0.0, vec![(request("d", 0), dag)]);
        let (policy, _) = train_policy_gradient(
            std::slice::from_ref(&inst),
            &[],
            &PgConfig {
                episodes: 5,
                ..PgConfig::default()
            },
        )
        .unwrap();
        let env = DeploymentEnv::new(&inst).unwrap();
        let (ret, s) = policy.rollout(&env, 0).unwrap();
        assert_eq!(s.placed, vec![Some(0), Some(0)]);
        assert_eq!(ret, -2.0);
    }

    #[test]
    fn zero_microservices() {
        let inst = line_instance(&[1e9], 10.0, 1e9, 0.0, vec![]);
        let (policy, _) = train_policy_gradient(std::slice::from_ref(&inst), &[], &PgConfig::default()).unwrap();
        let (ret, s) = policy.rollout(&DeploymentEnv::new(&inst).unwrap(), 0).unwrap();
        assert!(s.done);
        assert_eq!(ret, 0.0);
    }

    #[test]
    fn beats_random_on_benchmark() {
        let train = bench(100, 16);
        let holdout = bench(200, 12);
        let cfg = PgConfig {
            episodes: 800,
            ..PgConfig::default()
        };
        let (policy, rep) = train_policy_gradient(&train, &holdout, &cfg).unwrap();
        let random = evaluate_random_policy(&holdout, 20, 5).unwrap();
        let learned = rep.holdout.unwrap();
        assert!(
            learned.mean_return > random.mean_return,
            "{policy:?} {learned:?} {random:?}"
        );
        assert!(learned.mean_gap.unwrap() < random.mean_gap.unwrap());
    }
}

use super::{DeploymentError, DeploymentInstance, Prepared, Solution};
use crate::msdag::Unplaced;

/// Places services one at a time in topological order, each on the feasible
/// satellite that minimises the optimistic bound of the partial plan. Ties go
/// to the earliest candidate.
pub fn solve_greedy(instance: &DeploymentInstance) -> Result<Solution, DeploymentError> {
    let p = Prepared::new(instance)?;
    let m = p.services.len();
    let n = p.satellite_count();
    let bound = p.optimistic();
    let mut assign = vec![None; m];
    let mut mem = vec![0.0; n];
    let mut energy = vec![0.0; n];
    for svc in 0..m {
        let mut best: Option<(f64, usize)> = None;
        for sat in 0..n {
            if !p.fits(svc, sat, &mem, &energy) {
                continue;
            }
            assign[svc] = Some(sat);
            let key = if svc + 1 == m {
                p.objective(&assign, Unplaced::Reject)
            } else {
                p.objective(&assign, bound)
            };
            if best.is_none_or(|(k, _)| key < k) {
                best = Some((key, sat));
            }
        }
        let Some((key, sat)) = best else {
            return Ok(Solution::infeasible());
        };
        if !key.is_finite() {
            return Ok(Solution::infeasible());
        }
        assign[svc] = Some(sat);
        mem[sat] += p.services[svc].memory_bytes;
        energy[sat] += p.energy_of(svc);
    }
    let objective = p.objective(&assign, Unplaced::Reject);
    Ok(Solution {
        plan: p.plan_of(&assign),
        objective: objective.is_finite().then_some(objective),
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_never_beats_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let inst = random_instance(&mut rng, 3, 4);
            let e = solve_exact(&inst).unwrap();
            let g = solve_greedy(&inst).unwrap();
            if let (Some(eo), Some(go)) = (e.objective, g.objective) {
                assert!(eo <= go * (1.0 + 1e-12));
            }
            if g.plan.feasible {
                assert!(e.plan.feasible);
            }
        }
    }

    #[test]
    fn greedy_ties_lowest_index() {
        let dag = chain("d", vec![ms("a", 1e9, 1.0)], 0.0);
        let inst = line_instance(&[1e9, 1e9, 1e9], 10.0, 1e9, 0.0, vec![(request("d", 1), dag)]);
        let g = solve_greedy(&inst).unwrap();
        assert_eq!(g.plan.assignment["a"], crate::constellation::SatelliteId::new(0, 0));
    }

    #[test]
    fn handles_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 12, 16);
        let g = solve_greedy(&inst).unwrap();
        assert!(solve_exact(&inst).is_err());
        if g.plan.feasible {
            assert_eq!(g.plan.assignment.len(), 16);
        }
    }
}

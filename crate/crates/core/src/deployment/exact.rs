use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{DeploymentError, DeploymentInstance, Prepared, Solution};
use crate::msdag::Unplaced;

struct Node {
    key: f64,
    seq: u64,
    assign: Vec<Option<usize>>,
    depth: usize,
    mem: Vec<f64>,
    energy: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // min-heap on key, then FIFO
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.total_cmp(&self.key).then(other.seq.cmp(&self.seq))
    }
}

/// Optimal placement by best-first branch and bound.
///
/// Partial assignments are keyed by a lower bound in which unplaced services
/// run at the fastest candidate throughput with free transfers; complete
/// assignments are keyed by their exact objective, so the first complete
/// assignment popped is optimal.
pub fn solve_exact(instance: &DeploymentInstance) -> Result<Solution, DeploymentError> {
    let opts = &instance.options;
    let p = Prepared::new(instance)?;
    let m = p.services.len();
    let n = p.satellite_count();
    if n > opts.exact_max_satellites || m > opts.exact_max_microservices {
        return Err(DeploymentError::SizeBoundExceeded {
            satellites: n,
            microservices: m,
            max_satellites: opts.exact_max_satellites,
            max_microservices: opts.exact_max_microservices,
        });
    }
    let bound = p.optimistic();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let root_assign = vec![None; m];
    let root_key = if m == 0 {
        p.objective(&root_assign, Unplaced::Reject)
    } else {
        p.objective(&root_assign, bound)
    };
    heap.push(Node {
        key: root_key,
        seq,
        assign: root_assign,
        depth: 0,
        mem: vec![0.0; n],
        energy: vec![0.0; n],
    });
    while let Some(node) = heap.pop() {
        if !node.key.is_finite() {
            break;
        }
        if node.depth == m {
            return Ok(Solution {
                plan: p.plan_of(&node.assign),
                objective: Some(node.key),
            });
        }
        let svc = node.depth;
        for sat in 0..n {
            if !p.fits(svc, sat, &node.mem, &node.energy) {
                continue;
            }
            let mut assign = node.assign.clone();
            assign[svc] = Some(sat);
            let depth = node.depth + 1;
            let key = if depth == m {
                p.objective(&assign, Unplaced::Reject)
            } else {
                p.objective(&assign, bound)
            };
            if !key.is_finite() {
                continue;
            }
            let mut mem = node.mem.clone();
            mem[sat] += p.services[svc].memory_bytes;
            let mut energy = node.energy.clone();
            energy[sat] += p.energy_of(svc);
            seq += 1;
            heap.push(Node {
                key,
                seq,
                assign,
                depth,
                mem,
                energy,
            });
        }
    }
    Ok(Solution::infeasible())
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use crate::constellation::SatelliteId;

    #[test]
    fn prefers_fast_nearby_host() {
        // one service; the fast satellite is one cheap hop away
        let dag = chain("d", vec![ms("a", 1e10, 1.0)], 0.0);
        let mut req = request("d", 0);
        req.input_bits = 1e6;
        let inst = line_instance(&[1e9, 1e11], 10.0, 1e9, 0.001, vec![(req, dag)]);
        let sol = solve_exact(&inst).unwrap();
        assert_eq!(sol.plan.assignment["a"], SatelliteId::new(0, 1));
        // 1e6/1e9 + 0.001 + 1e10/1e11
        assert!((sol.objective.unwrap() - 0.102).abs() < 1e-12);
    }

    #[test]
    fn memory_forces_split() {
        let dag = chain("d", vec![ms("a", 1e9, 2.0), ms("b", 1e9, 2.0)], 1e9);
        let inst = line_instance(&[1e9, 1e9], 3.0, 1e9, 0.0, vec![(request("d", 0), dag)]);
        let sol = solve_exact(&inst).unwrap();
        assert!(sol.plan.feasible);
        assert_ne!(sol.plan.assignment["a"], sol.plan.assignment["b"]);
        // compute 1 + 1, transfer 1e9/1e9
        assert!((sol.objective.unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_memory_reported() {
        let dag = chain("d", vec![ms("a", 1e9, 5.0)], 0.0);
        let inst = line_instance(&[1e9, 1e9], 3.0, 1e9, 0.0, vec![(request("d", 0), dag)]);
        let sol = solve_exact(&inst).unwrap();
        assert!(!sol.plan.feasible);
        assert_eq!(sol.objective, None);
    }

    #[test]
    fn energy_budget_enforced() {
        let dag = chain("d", vec![ms("a", 1e12, 1.0)], 0.0);
        let mut inst = line_instance(&[1e12, 1e9], 3.0, 1e9, 0.0, vec![(request("d", 0), dag)]);
        inst.options.enforce_energy = true;
        inst.satellites[0].energy_budget_j = 0.5;
        let sol = solve_exact(&inst).unwrap();
        assert_eq!(sol.plan.assignment["a"], SatelliteId::new(0, 1));
    }

    #[test]
    fn size_bound() {
        let nodes: Vec<_> = (0..9).map(|i| ms(&format!("m{i}"), 1.0, 0.0)).collect();
        let dag = chain("d", nodes, 0.0);
        let inst = line_instance(&[1.0; 2], 1.0, 1.0, 0.0, vec![(request("d", 0), dag)]);
        let err = solve_exact(&inst).unwrap_err();
        assert!(err.to_string().contains("size bound exceeded"));
    }

    #[test]
    fn empty_instance() {
        let inst = line_instance(&[1.0], 1.0, 1.0, 0.0, vec![]);
        let sol = solve_exact(&inst).unwrap();
        assert!(sol.plan.feasible);
        assert_eq!(sol.objective, Some(0.0));
    }
}

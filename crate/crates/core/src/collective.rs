//! Ring collectives over an orbit's intra-orbit ISLs.
//!
//! Node `i` only ever sends to node `(i + 1) % n`. Steps are lock-step: a step
//! lasts as long as its slowest transfer, and the next step starts when every
//! transfer of the current one has finished.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectiveError {
    #[error("a ring needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("ring edge {edge} has non-positive rate {rate}")]
    BadRate { edge: usize, rate: f64 },
    #[error("payload of {payload} bits cannot be split into {nodes} nonempty blocks")]
    PayloadTooSmall { payload: u64, nodes: usize },
    #[error("expected {expected} per-node payloads, got {got}")]
    PayloadCount { expected: usize, got: usize },
    #[error("malformed schedule: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    /// Rate of the directed edge `i -> i + 1 (mod n)`.
    link_rates_bps: Vec<f64>,
}

impl RingSpec {
    pub fn new(link_rates_bps: Vec<f64>) -> Result<Self, CollectiveError> {
        if link_rates_bps.len() < 2 {
            return Err(CollectiveError::TooFewNodes(link_rates_bps.len()));
        }
        if let Some((edge, &rate)) = link_rates_bps
            .iter()
            .enumerate()
            .find(|(_, r)| !(**r > 0.0) || !r.is_finite())
        {
            return Err(CollectiveError::BadRate { edge, rate });
        }
        Ok(Self { link_rates_bps })
    }

    pub fn uniform(node_count: usize, rate_bps: f64) -> Result<Self, CollectiveError> {
        Self::new(vec![rate_bps; node_count])
    }

    pub fn node_count(&self) -> usize {
        self.link_rates_bps.len()
    }

    pub fn link_rates(&self) -> &[f64] {
        &self.link_rates_bps
    }

    pub fn with_rate(mut self, edge: usize, rate_bps: f64) -> Result<Self, CollectiveError> {
        self.link_rates_bps[edge] = rate_bps;
        Self::new(self.link_rates_bps)
    }

    fn min_rate(&self) -> f64 {
        self.link_rates_bps.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ReduceScatter,
    AllGather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub step: usize,
    pub phase: Phase,
    pub sender: usize,
    pub receiver: usize,
    pub block: usize,
    pub bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSchedule {
    pub node_count: usize,
    pub block_count: usize,
    pub step_count: usize,
    pub link_rates_bps: Vec<f64>,
    pub steps: Vec<Transfer>,
}

impl RingSchedule {
    /// Duration of every step under the lock-step model.
    pub fn step_durations(&self) -> Vec<f64> {
        let mut durations = vec![0.0f64; self.step_count];
        for t in &self.steps {
            let d = t.bits as f64 / self.link_rates_bps[t.sender];
            durations[t.step] = durations[t.step].max(d);
        }
        durations
    }

    pub fn bits_sent_per_node(&self) -> Vec<u64> {
        let mut sent = vec![0u64; self.node_count];
        for t in &self.steps {
            sent[t.sender] += t.bits;
        }
        sent
    }

    fn validate(&self) -> Result<(), CollectiveError> {
        let bad = |m: String| Err(CollectiveError::Malformed(m));
        if self.link_rates_bps.len() != self.node_count {
            return bad(format!(
                "{} link rates for {} nodes",
                self.link_rates_bps.len(),
                self.node_count
            ));
        }
        let mut last_step = 0;
        let mut sending = vec![usize::MAX; self.node_count];
        let mut receiving = vec![usize::MAX; self.node_count];
        for t in &self.steps {
            if t.step < last_step {
                return bad(format!("step {} listed after step {}", t.step, last_step));
            }
            last_step = t.step;
            if t.step >= self.step_count {
                return bad(format!("step {} beyond step_count {}", t.step, self.step_count));
            }
            if t.sender >= self.node_count || t.receiver != (t.sender + 1) % self.node_count {
                return bad(format!("transfer {} -> {} is not a ring edge", t.sender, t.receiver));
            }
            if t.block >= self.block_count {
                return bad(format!("block {} out of range", t.block));
            }
            if sending[t.sender] == t.step {
                return bad(format!("node {} sends twice in step {}", t.sender, t.step));
            }
            if receiving[t.receiver] == t.step {
                return bad(format!("node {} receives twice in step {}", t.receiver, t.step));
            }
            sending[t.sender] = t.step;
            receiving[t.receiver] = t.step;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveResult {
    pub completion_time_s: f64,
    pub bits_sent_per_node: Vec<u64>,
    pub schedule: RingSchedule,
}

/// Reduce-scatter followed by all-gather over `payload_bits` held by every node.
///
/// The payload is cut into `n` blocks of `ceil(payload / n)` bits (the last one
/// padded). After reduce-scatter step `k`, node `i` has forwarded its partial
/// sum of block `(i - k) mod n`; node `i` ends the phase owning the fully reduced
/// block `(i + 1) mod n`.
pub fn plan_all_reduce(ring: &RingSpec, payload_bits: u64) -> Result<CollectiveResult, CollectiveError> {
    let n = ring.node_count();
    if payload_bits < n as u64 {
        return Err(CollectiveError::PayloadTooSmall {
            payload: payload_bits,
            nodes: n,
        });
    }
    let block_bits = payload_bits.div_ceil(n as u64);
    let mut steps = Vec::with_capacity(2 * n * (n - 1));
    for k in 0..n - 1 {
        for i in 0..n {
            steps.push(Transfer {
                step: k,
                phase: Phase::ReduceScatter,
                sender: i,
                receiver: (i + 1) % n,
                block: (i + n - k) % n,
                bits: block_bits,
            });
        }
    }
    for k in 0..n - 1 {
        for i in 0..n {
            steps.push(Transfer {
                step: n - 1 + k,
                phase: Phase::AllGather,
                sender: i,
                receiver: (i + 1) % n,
                block: (i + 1 + n - k) % n,
                bits: block_bits,
            });
        }
    }
    let schedule = RingSchedule {
        node_count: n,
        block_count: n,
        step_count: 2 * (n - 1),
        link_rates_bps: ring.link_rates().to_vec(),
        steps,
    };
    // Every step keeps all n ring edges busy with equal blocks.
    let completion_time_s = 2.0 * (n - 1) as f64 * block_bits as f64 / ring.min_rate();
    Ok(CollectiveResult {
        completion_time_s,
        bits_sent_per_node: schedule.bits_sent_per_node(),
        schedule,
    })
}

/// Ring all-gather where node `i` starts with `per_node_bits[i]` bits (block `i`).
pub fn plan_all_gather(ring: &RingSpec, per_node_bits: &[u64]) -> Result<CollectiveResult, CollectiveError> {
    let n = ring.node_count();
    if per_node_bits.len() != n {
        return Err(CollectiveError::PayloadCount {
            expected: n,
            got: per_node_bits.len(),
        });
    }
    let mut steps = Vec::with_capacity(n * (n - 1));
    let mut completion_time_s = 0.0;
    for k in 0..n - 1 {
        let mut step_time = 0.0f64;
        for i in 0..n {
            let block = (i + n - k) % n;
            let bits = per_node_bits[block];
            step_time = step_time.max(bits as f64 / ring.link_rates()[i]);
            steps.push(Transfer {
                step: k,
                phase: Phase::AllGather,
                sender: i,
                receiver: (i + 1) % n,
                block,
                bits,
            });
        }
        completion_time_s += step_time;
    }
    let schedule = RingSchedule {
        node_count: n,
        block_count: n,
        step_count: n - 1,
        link_rates_bps: ring.link_rates().to_vec(),
        steps,
    };
    Ok(CollectiveResult {
        completion_time_s,
        bits_sent_per_node: schedule.bits_sent_per_node(),
        schedule,
    })
}

/// Per-node block buffers; `None` marks a block the node does not hold yet.
pub type NodeBlocks<T> = Vec<Vec<Option<Vec<T>>>>;

/// Replays a schedule on concrete data.
///
/// Reduce-scatter transfers add the sender's block into the receiver's copy;
/// all-gather transfers overwrite it. All transfers of a step read the state
/// from before that step.
pub fn execute<T>(schedule: &RingSchedule, mut contents: NodeBlocks<T>) -> Result<(NodeBlocks<T>, f64), CollectiveError>
where
    T: Clone + std::ops::Add<Output = T>,
{
    schedule.validate()?;
    if contents.len() != schedule.node_count || contents.iter().any(|blocks| blocks.len() != schedule.block_count) {
        return Err(CollectiveError::Malformed(format!(
            "contents must be {} nodes x {} blocks",
            schedule.node_count, schedule.block_count
        )));
    }
    let mut elapsed = 0.0;
    let mut idx = 0;
    while idx < schedule.steps.len() {
        let step = schedule.steps[idx].step;
        let end = schedule.steps[idx..]
            .iter()
            .position(|t| t.step != step)
            .map_or(schedule.steps.len(), |p| idx + p);
        let batch = &schedule.steps[idx..end];
        let mut in_flight = Vec::with_capacity(batch.len());
        let mut step_time = 0.0f64;
        for t in batch {
            let data = contents[t.sender][t.block].clone().ok_or_else(|| {
                CollectiveError::Malformed(format!(
                    "node {} does not hold block {} at step {}",
                    t.sender, t.block, t.step
                ))
            })?;
            step_time = step_time.max(t.bits as f64 / schedule.link_rates_bps[t.sender]);
            in_flight.push((t, data));
        }
        for (t, data) in in_flight {
            let slot = &mut contents[t.receiver][t.block];
            *slot = match (t.phase, slot.take()) {
                (Phase::ReduceScatter, Some(mine)) => {
                    if mine.len() != data.len() {
                        return Err(CollectiveError::Malformed(format!("block {} length mismatch", t.block)));
                    }
                    Some(mine.into_iter().zip(data).map(|(a, b)| a + b).collect())
                }
                (Phase::ReduceScatter, None) => {
                    return Err(CollectiveError::Malformed(format!(
                        "node {} cannot reduce into missing block {}",
                        t.receiver, t.block
                    )))
                }
                (Phase::AllGather, _) => Some(data),
            };
        }
        elapsed += step_time;
        idx = end;
    }
    Ok((contents, elapsed))
}

/// Splits `data` into `n` equal blocks, padding the tail with `pad`.
pub fn split_blocks<T: Clone>(data: &[T], n: usize, pad: T) -> Vec<Vec<T>> {
    let block = data.len().div_ceil(n).max(1);
    (0..n)
        .map(|b| {
            (0..block)
                .map(|j| data.get(b * block + j).cloned().unwrap_or_else(|| pad.clone()))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_all_reduce() {
        let ring = RingSpec::uniform(2, 1e9).unwrap();
        let r = plan_all_reduce(&ring, 1_000_000_000).unwrap();
        assert_eq!(r.schedule.step_count, 2);
        assert!((r.completion_time_s - 1.0).abs() < 1e-12);
        assert_eq!(r.bits_sent_per_node, vec![1_000_000_000, 1_000_000_000]);
    }

    #[test]
    fn four_node_closed_form() {
        let d = 4_000_000u64;
        let r = plan_all_reduce(&RingSpec::uniform(4, 2e6).unwrap(), d).unwrap();
        assert!((r.completion_time_s - 1.5 * d as f64 / 2e6).abs() < 1e-12);
        let step_sum: f64 = r.schedule.step_durations().iter().sum();
        assert!((step_sum - r.completion_time_s).abs() < 1e-12);
    }

    #[test]
    fn halved_link_doubles_time() {
        let ring = RingSpec::uniform(5, 1e9).unwrap();
        let base = plan_all_reduce(&ring, 5_000_000).unwrap().completion_time_s;
        let slow = plan_all_reduce(&ring.with_rate(3, 0.5e9).unwrap(), 5_000_000)
            .unwrap()
            .completion_time_s;
        assert!((slow - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn payload_smaller_than_ring_rejected() {
        let ring = RingSpec::uniform(8, 1e9).unwrap();
        assert_eq!(
            plan_all_reduce(&ring, 7),
            Err(CollectiveError::PayloadTooSmall { payload: 7, nodes: 8 })
        );
    }

    #[test]
    fn bad_rings_rejected() {
        assert_eq!(RingSpec::new(vec![1.0]), Err(CollectiveError::TooFewNodes(1)));
        assert!(matches!(
            RingSpec::new(vec![1.0, 0.0]),
            Err(CollectiveError::BadRate { edge: 1, .. })
        ));
    }

    #[test]
    fn all_gather_of_empty_payloads() {
        let r = plan_all_gather(&RingSpec::uniform(3, 1e9).unwrap(), &[0, 0, 0]).unwrap();
        assert_eq!(r.completion_time_s, 0.0);
        assert_eq!(r.schedule.step_count, 2);
        assert!(r.schedule.steps.iter().all(|t| t.bits == 0));
    }

    #[test]
    fn all_gather_single_transfer() {
        let r = plan_all_gather(&RingSpec::uniform(2, 4.0).unwrap(), &[10, 0]).unwrap();
        assert!((r.completion_time_s - 2.5).abs() < 1e-12);
    }

    #[test]
    fn all_gather_equal_payloads_match_rotation_formula() {
        let a = 300u64;
        let r = plan_all_gather(&RingSpec::uniform(3, 100.0).unwrap(), &[a, a, a]).unwrap();
        assert!((r.completion_time_s - (3 * a - a) as f64 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn empty_schedule_is_identity() {
        let schedule = RingSchedule {
            node_count: 2,
            block_count: 1,
            step_count: 0,
            link_rates_bps: vec![1.0, 1.0],
            steps: vec![],
        };
        let contents: NodeBlocks<i64> = vec![vec![Some(vec![1, 2])], vec![None]];
        let (out, t) = execute(&schedule, contents.clone()).unwrap();
        assert_eq!(out, contents);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn all_reduce_sums_elementwise() {
        let n = 5;
        let data: Vec<Vec<i64>> = (0..n)
            .map(|i| (0..23).map(|j| (i * 31 + j * 7) as i64 - 40).collect())
            .collect();
        let r = plan_all_reduce(&RingSpec::uniform(n, 1e3).unwrap(), 23).unwrap();
        let contents = data
            .iter()
            .map(|v| split_blocks(v, n, 0).into_iter().map(Some).collect())
            .collect();
        let (out, elapsed) = execute(&r.schedule, contents).unwrap();
        assert!((elapsed - r.completion_time_s).abs() < 1e-12);
        let expected: Vec<i64> = (0..23).map(|j| data.iter().map(|v| v[j]).sum()).collect();
        for node in out {
            let flat: Vec<i64> = node.into_iter().flat_map(|b| b.unwrap()).take(23).collect();
            assert_eq!(flat, expected);
        }
    }

    #[test]
    fn all_gather_concatenates() {
        let payloads = [vec![1i64, 2, 3], vec![], vec![9, 8]];
        let bits: Vec<u64> = payloads.iter().map(|p| p.len() as u64 * 64).collect();
        let r = plan_all_gather(&RingSpec::new(vec![64.0, 128.0, 32.0]).unwrap(), &bits).unwrap();
        let contents = (0..3)
            .map(|i| (0..3).map(|b| (b == i).then(|| payloads[b].clone())).collect())
            .collect();
        let (out, elapsed) = execute(&r.schedule, contents).unwrap();
        assert!((elapsed - r.completion_time_s).abs() < 1e-12);
        let expected: Vec<i64> = payloads.concat();
        for node in out {
            let flat: Vec<i64> = node.into_iter().flat_map(|b| b.unwrap()).collect();
            assert_eq!(flat, expected);
        }
    }

    #[test]
    fn execute_rejects_double_send() {
        let mut r = plan_all_reduce(&RingSpec::uniform(3, 1.0).unwrap(), 3).unwrap();
        r.schedule.steps[1].sender = 0;
        r.schedule.steps[1].receiver = 1;
        let contents: NodeBlocks<i64> = vec![vec![Some(vec![0]); 3]; 3];
        assert!(matches!(
            execute(&r.schedule, contents),
            Err(CollectiveError::Malformed(_))
        ));
    }

    #[test]
    fn execute_rejects_missing_block() {
        let r = plan_all_gather(&RingSpec::uniform(3, 1.0).unwrap(), &[1, 1, 1]).unwrap();
        let contents: NodeBlocks<i64> = vec![vec![None; 3]; 3];
        assert!(execute(&r.schedule, contents).is_err());
    }
}

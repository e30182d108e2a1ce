//! Ring allreduce: every rank combines a vector elementwise with all other
//! ranks and every rank ends with the full result.
//!
//! The ring algorithm runs in 2(N-1) steps. During reduce-scatter, rank r
//! sends chunk (r-s) mod N to its successor in step s while folding the
//! chunk arriving from its predecessor into its accumulator; after N-1
//! steps, rank r holds the fully combined chunk (r+1) mod N. Allgather then
//! circulates the finished chunks the same way without combining.
//!
//! Each step's send and receive are started together and awaited in
//! sequence, so the two transfers overlap on the wire exactly as the
//! textbook schedule requires.

use serde::{Deserialize, Serialize};

use crate::net::{LinkConfig, Network, NodeId, Packet};
use crate::task::{OpError, OperationHandle};

/// Elementwise combiners. Sum wraps on overflow so every evaluation order
/// over the same multiset of inputs produces the same bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReduceOp {
    Sum,
    Max,
}

impl ReduceOp {
    pub fn combine(self, a: i64, b: i64) -> i64 {
        match self {
            ReduceOp::Sum => a.wrapping_add(b),
            ReduceOp::Max => a.max(b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Max => "max",
        }
    }
}

/// Participants of one collective: the node of each rank, in ring order,
/// and the length of the vector being reduced.
#[derive(Debug, Clone)]
pub struct World {
    pub ranks: Vec<NodeId>,
    pub vector_len: usize,
}

impl World {
    pub fn size(&self) -> usize {
        self.ranks.len()
    }

    /// Element range of chunk `idx`. The vector splits into `size()` chunks
    /// of near-equal length; the first `len % size` chunks take the extra
    /// element.
    pub fn chunk_range(&self, idx: usize) -> std::ops::Range<usize> {
        let n = self.size();
        assert!(idx < n, "chunk {idx} of a {n}-rank world");
        let base = self.vector_len / n;
        let extra = self.vector_len % n;
        let start = idx * base + idx.min(extra);
        let len = base + usize::from(idx < extra);
        start..start + len
    }
}

/// Reference combiner: folds the rank vectors elementwise in rank order.
/// The ring result must match this exactly.
pub fn naive_allreduce(inputs: &[Vec<i64>], op: ReduceOp) -> Vec<i64> {
    let mut out = inputs[0].clone();
    for v in &inputs[1..] {
        assert_eq!(v.len(), out.len(), "rank vectors differ in length");
        for (o, x) in out.iter_mut().zip(v) {
            *o = op.combine(*o, *x);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ChunkMsg {
    step: u32,
    idx: u32,
    vals: Vec<i64>,
}

/// Fixed per-packet overhead ahead of the 8-byte elements.
const CHUNK_HEADER_BYTES: u64 = 64;

pub(crate) fn chunk_packet(src: NodeId, dst: NodeId, step: usize, idx: usize, vals: Vec<i64>) -> Packet {
    let size_bytes = CHUNK_HEADER_BYTES + 8 * vals.len() as u64;
    let msg = ChunkMsg {
        step: step as u32,
        idx: idx as u32,
        vals,
    };
    Packet {
        src,
        dst,
        size_bytes,
        priority: 0,
        kind: "chunk".to_string(),
        payload: serde_json::to_vec(&msg).expect("chunk message serializes"),
    }
}

pub(crate) fn open_chunk(packet: &Packet, step: usize, idx: usize) -> Result<Vec<i64>, OpError> {
    let msg: ChunkMsg = serde_json::from_slice(&packet.payload)
        .map_err(|e| OpError::failed(format!("undecodable chunk payload: {e}")))?;
    if msg.step as usize != step || msg.idx as usize != idx {
        return Err(OpError::failed(format!(
            "expected chunk {idx} of step {step}, got chunk {} of step {}",
            msg.idx, msg.step
        )));
    }
    Ok(msg.vals)
}

/// Runs one rank of the collective. `local` is this rank's input vector;
/// the returned operation yields the combined vector once the ring
/// completes. Every rank in `world` must run for any of them to finish,
/// and consecutive ranks must be adjacent in `net`.
pub fn ring_allreduce(
    net: &Network,
    world: &World,
    rank_index: usize,
    local: Vec<i64>,
    op: ReduceOp,
) -> OperationHandle<Vec<i64>> {
    let n = world.size();
    assert!(n >= 1, "empty world");
    assert!(rank_index < n, "rank {rank_index} of a {n}-rank world");
    assert_eq!(local.len(), world.vector_len, "input length mismatch");
    let net = net.clone();
    let world = world.clone();
    if n == 1 {
        return net.sim().spawn(async move { Ok(local) });
    }
    let me = world.ranks[rank_index];
    let next = world.ranks[(rank_index + 1) % n];
    let prev = world.ranks[(rank_index + n - 1) % n];
    let sim = net.sim().clone();
    sim.spawn(async move {
        let mut acc = local;
        for step in 0..2 * (n - 1) {
            let (send_idx, recv_idx) = if step < n - 1 {
                let s = step;
                ((rank_index + n - s) % n, (rank_index + 2 * n - s - 1) % n)
            } else {
                let s = step - (n - 1);
                ((rank_index + 1 + n - s) % n, (rank_index + n - s) % n)
            };
            let outgoing = acc[world.chunk_range(send_idx)].to_vec();
            let arrival = net.recv_from(me, prev);
            let handoff = net.send(me, next, chunk_packet(me, next, step, send_idx, outgoing));
            handoff.await?;
            let packet = arrival.await?;
            let vals = open_chunk(&packet, step, recv_idx)?;
            let slot = &mut acc[world.chunk_range(recv_idx)];
            assert_eq!(vals.len(), slot.len(), "chunk length mismatch");
            if step < n - 1 {
                for (o, x) in slot.iter_mut().zip(&vals) {
                    *o = op.combine(*o, *x);
                }
            } else {
                slot.copy_from_slice(&vals);
            }
        }
        Ok(acc)
    })
}

/// Ticks one ring step takes when every chunk has `vector_len / size`
/// elements and every hop shares `config`. Only exact for worlds whose
/// vector length divides evenly.
pub fn ring_step_ticks(world: &World, config: LinkConfig) -> u64 {
    assert_eq!(
        world.vector_len % world.size(),
        0,
        "closed form requires equal chunks"
    );
    let chunk = (world.vector_len / world.size()) as u64;
    let ser = crate::net::serialization_ticks(CHUNK_HEADER_BYTES + 8 * chunk, config.bandwidth_bps);
    (ser + config.latency).ticks()
}

/// Completion time of the whole collective on a uniform ring: 2(N-1) steps
/// of serialization plus propagation.
pub fn ring_total_ticks(world: &World, config: LinkConfig) -> u64 {
    2 * (world.size() as u64 - 1) * ring_step_ticks(world, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::TopologySpec;
    use crate::task::Sim;
    use crate::time::{Duration, SimTime};
    use proptest::prelude::*;

    fn ring_net(sim: &Sim, n: u32, config: LinkConfig) -> Network {
        Network::new(sim, &TopologySpec::ring(n, config)).unwrap()
    }

    fn fast_link() -> LinkConfig {
        LinkConfig::new(Duration::from_ticks(500), 1_000_000_000)
    }

    fn run_world(
        n: usize,
        inputs: &[Vec<i64>],
        op: ReduceOp,
    ) -> (Vec<Vec<i64>>, SimTime) {
        let sim = Sim::new();
        let net = ring_net(&sim, n as u32, fast_link());
        let world = World {
            ranks: (0..n as u32).map(NodeId).collect(),
            vector_len: inputs[0].len(),
        };
        let handles: Vec<_> = (0..n)
            .map(|r| ring_allreduce(&net, &world, r, inputs[r].clone(), op))
            .collect();
        sim.run_to_completion(1_000_000).unwrap();
        let results = handles
            .into_iter()
            .map(|h| h.take_result().unwrap().unwrap())
            .collect();
        (results, sim.now())
    }

    #[test]
    fn oracle_folds_elementwise_in_rank_order() {
        let inputs = vec![vec![1, -2, 30], vec![4, 5, -6], vec![7, 8, 9]];
        assert_eq!(naive_allreduce(&inputs, ReduceOp::Sum), vec![12, 11, 33]);
        assert_eq!(naive_allreduce(&inputs, ReduceOp::Max), vec![7, 8, 30]);
    }

    #[test]
    fn sum_wraps_instead_of_overflowing() {
        let inputs = vec![vec![i64::MAX], vec![1]];
        assert_eq!(naive_allreduce(&inputs, ReduceOp::Sum), vec![i64::MIN]);
    }

    #[test]
    fn chunks_partition_the_vector() {
        let world = World {
            ranks: (0..3).map(NodeId).collect(),
            vector_len: 10,
        };
        assert_eq!(world.chunk_range(0), 0..4);
        assert_eq!(world.chunk_range(1), 4..7);
        assert_eq!(world.chunk_range(2), 7..10);
    }

    #[test]
    fn four_ranks_match_the_oracle_exactly() {
        let inputs: Vec<Vec<i64>> = (0..4)
            .map(|r| (0..8).map(|i| (r * 100 + i) as i64 - 250).collect())
            .collect();
        let want = naive_allreduce(&inputs, ReduceOp::Sum);
        let (results, _) = run_world(4, &inputs, ReduceOp::Sum);
        for r in results {
            assert_eq!(r, want);
        }
    }

    #[test]
    fn uneven_chunks_still_agree_with_the_oracle() {
        let inputs: Vec<Vec<i64>> = (0..3)
            .map(|r| (0..7).map(|i| ((r * 31 + i * 17) % 13) as i64 - 6).collect())
            .collect();
        let want = naive_allreduce(&inputs, ReduceOp::Max);
        let (results, _) = run_world(3, &inputs, ReduceOp::Max);
        for r in results {
            assert_eq!(r, want);
        }
    }

    #[test]
    fn two_ranks_share_one_full_duplex_link() {
        let inputs = vec![vec![1, 2, 3, 4], vec![10, 20, 30, 40]];
        let (results, _) = run_world(2, &inputs, ReduceOp::Sum);
        assert_eq!(results[0], vec![11, 22, 33, 44]);
        assert_eq!(results[1], vec![11, 22, 33, 44]);
    }

    #[test]
    fn completion_time_matches_the_closed_form() {
        // N=4, L=8: chunk = 2 elements = 80 bytes wire, 640 ticks at 1 Gb/s,
        // plus 500 latency = 1140 per step; 6 steps = 6840.
        let inputs: Vec<Vec<i64>> = (0..4).map(|r| vec![r as i64; 8]).collect();
        let world = World {
            ranks: (0..4).map(NodeId).collect(),
            vector_len: 8,
        };
        assert_eq!(ring_step_ticks(&world, fast_link()), 1_140);
        assert_eq!(ring_total_ticks(&world, fast_link()), 6_840);
        let (_, finished) = run_world(4, &inputs, ReduceOp::Sum);
        assert_eq!(finished, SimTime::from_ticks(6_840));
    }

    #[test]
    fn single_rank_returns_its_input_without_traffic() {
        let sim = Sim::new();
        let net = Network::new(
            &sim,
            &TopologySpec::line(2, fast_link()),
        )
        .unwrap();
        let world = World {
            ranks: vec![NodeId(0)],
            vector_len: 3,
        };
        let h = ring_allreduce(&net, &world, 0, vec![5, 6, 7], ReduceOp::Max);
        sim.run_to_completion(100).unwrap();
        assert_eq!(h.take_result().unwrap().unwrap(), vec![5, 6, 7]);
        assert_eq!(sim.stats().events_scheduled, 0);
    }

    #[test]
    fn the_protocol_body_never_reaches_for_callback_registrars() {
        let source = include_str!("allreduce.rs");
        let body = source.split("#[cfg(test)]").next().unwrap();
        for registrar in ["send_with", "recv_with", "from_callback", "wrap_immediate"] {
            assert!(
                !body.contains(registrar),
                "protocol body uses {registrar}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_worlds_match_the_oracle(
            n in 2usize..6,
            len in 0usize..24,
            seed in 0u64..1_000,
            max_not_sum in proptest::bool::ANY,
        ) {
            let op = if max_not_sum { ReduceOp::Max } else { ReduceOp::Sum };
            let inputs: Vec<Vec<i64>> = (0..n)
                .map(|r| {
                    (0..len)
                        .map(|i| {
                            let x = seed
                                .wrapping_mul(6364136223846793005)
                                .wrapping_add((r * 1000 + i) as u64);
                            (x >> 16) as i64 - (1 << 47)
                        })
                        .collect()
                })
                .collect();
            let want = naive_allreduce(&inputs, op);
            let (results, _) = run_world(n, &inputs, op);
            for r in results {
                prop_assert_eq!(&r, &want);
            }
        }
    }
}

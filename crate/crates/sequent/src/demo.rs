//! Paired reference programs: each job is written twice, once as a
//! sequential task and once as a hand-rolled callback machine, over the
//! same network helpers. The pairs exist to be compared: both members must
//! produce the same packets, the same kernel events, and the same finish
//! times, differing only in how the local control flow is spelled.

use std::cell::RefCell;
use std::rc::Rc;

use crate::interop::from_callback;
use crate::net::{IfaceId, LinkConfig, Network, NodeId, Packet, TopologySpec};
use crate::protocols::allreduce::{chunk_packet, open_chunk, ReduceOp, World};
use crate::task::{OperationHandle, Sim};
use crate::time::SimTime;
use crate::trace::{TraceDivergence, TraceFilter, TraceKind, TraceReport, TraceStream};

/// The fetch-and-send job: node 0 asks node 1 for a payload, forwards the
/// reply to node 2, and waits for node 2's acknowledgement.
pub const APP: NodeId = NodeId(0);
pub const SOURCE: NodeId = NodeId(1);
pub const SINK: NodeId = NodeId(2);

/// Star with the app in the middle: link 0 to the source, link 1 to the
/// sink.
pub fn fetch_topology(config: LinkConfig) -> TopologySpec {
    TopologySpec::star(3, config)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchReport {
    pub payload_bytes: u64,
    pub finished_at: SimTime,
}

fn request_packet() -> Packet {
    Packet {
        src: APP,
        dst: SOURCE,
        size_bytes: 64,
        priority: 0,
        kind: "request".to_string(),
        payload: Vec::new(),
    }
}

fn payload_packet(src: NodeId, dst: NodeId, kind: &str, bytes: u64) -> Packet {
    Packet {
        src,
        dst,
        size_bytes: bytes.max(1),
        priority: 0,
        kind: kind.to_string(),
        payload: Vec::new(),
    }
}

/// The source's half of the job, callback style on purpose: both app
/// variants talk to this same helper. One request gets one data reply.
pub fn install_source(net: &Network, bytes: u64) {
    let reply_on = net.clone();
    net.recv_with(SOURCE, IfaceId(0), move |request| {
        reply_on.send_with(
            SOURCE,
            IfaceId(0),
            payload_packet(SOURCE, request.src, "data", bytes),
            || {},
        );
    });
}

/// The sink's half: one data packet gets one acknowledgement.
pub fn install_sink(net: &Network) {
    let reply_on = net.clone();
    net.recv_with(SINK, IfaceId(0), move |data| {
        reply_on.send_with(
            SINK,
            IfaceId(0),
            payload_packet(SINK, data.src, "ack", 64),
            || {},
        );
    });
}

/// Sequential app: the whole job reads top to bottom, one operation per
/// line, suspending wherever the network takes time.
pub fn fetch_and_send_sequential(net: &Network, bytes: u64) -> OperationHandle<FetchReport> {
    let net = net.clone();
    let sim = net.sim().clone();
    let clock = sim.clone();
    sim.spawn(async move {
        net.send(APP, SOURCE, request_packet()).await?;
        let data = net.recv_from(APP, SOURCE).await?;
        net.send(APP, SINK, payload_packet(APP, SINK, "forward", data.size_bytes))
            .await?;
        let ack = net.recv_from(APP, SINK).await?;
        debug_assert_eq!(ack.kind, "ack");
        Ok(FetchReport {
            payload_bytes: bytes,
            finished_at: clock.now(),
        })
    })
}

/// Callback app: the same job inverted into nested continuations. Every
/// hop of control flow that the sequential version gets from one `await`
/// here needs a closure, and the job's state rides in captures.
pub fn fetch_and_send_callback(net: &Network, bytes: u64) -> OperationHandle<FetchReport> {
    let net = net.clone();
    let sim = net.sim().clone();
    let clock = sim.clone();
    from_callback(&sim, move |done| {
        let to_source = net.iface_to(APP, SOURCE).unwrap();
        let to_sink = net.iface_to(APP, SINK).unwrap();
        net.send_with(APP, to_source, request_packet(), || {});
        let after_data = net.clone();
        net.recv_with(APP, to_source, move |data| {
            after_data.send_with(
                APP,
                to_sink,
                payload_packet(APP, SINK, "forward", data.size_bytes),
                || {},
            );
            let finish = after_data.clone();
            finish.recv_with(APP, to_sink, move |ack| {
                debug_assert_eq!(ack.kind, "ack");
                done.complete(FetchReport {
                    payload_bytes: bytes,
                    finished_at: clock.now(),
                });
            });
        });
    })
}

/// Everything observed from running both app variants on fresh, identically
/// configured simulations.
#[derive(Debug, Clone)]
pub struct FetchWitness {
    pub sequential: FetchReport,
    pub callback: FetchReport,
    pub trace_lines: u64,
    pub events_executed: u64,
}

fn fetch_trace_filter() -> TraceFilter {
    TraceFilter::all().without(TraceKind::TaskState)
}

fn run_fetch_style<F>(config: LinkConfig, bytes: u64, app: F) -> (FetchReport, TraceReport, u64)
where
    F: FnOnce(&Network, u64) -> OperationHandle<FetchReport>,
{
    let sim = Sim::new();
    let net = Network::new(&sim, &fetch_topology(config)).unwrap();
    sim.set_trace(TraceStream::memory(fetch_trace_filter()));
    install_source(&net, bytes);
    install_sink(&net);
    let job = app(&net, bytes);
    sim.run_to_completion(10_000).expect("fetch job runs clean");
    let report = job
        .take_result()
        .expect("fetch job finishes")
        .expect("fetch job succeeds");
    let trace = sim.take_trace().unwrap();
    (report, trace, sim.stats().events_executed)
}

/// Runs both app variants and compares their kernel traces line by line
/// (task lifecycle records excluded; the callback variant has no task to
/// speak of). Identical traces prove the rewrite changed only the shape of
/// the source.
pub fn check_fetch_equivalence(
    config: LinkConfig,
    bytes: u64,
) -> Result<FetchWitness, TraceDivergence> {
    let (sequential, seq_trace, seq_events) =
        run_fetch_style(config, bytes, fetch_and_send_sequential);
    let (callback, cb_trace, cb_events) = run_fetch_style(config, bytes, fetch_and_send_callback);
    let seq_lines = seq_trace.records.unwrap().iter().map(|r| r.line()).collect::<Vec<_>>();
    let cb_lines = cb_trace.records.unwrap().iter().map(|r| r.line()).collect::<Vec<_>>();
    let lines = crate::trace::diff_lines(seq_lines, cb_lines)?;
    debug_assert_eq!(seq_events, cb_events);
    Ok(FetchWitness {
        sequential,
        callback,
        trace_lines: lines,
        events_executed: seq_events,
    })
}

/// The ring collective rewritten as a callback machine: same wire schedule
/// as [`ring_allreduce`](crate::protocols::allreduce::ring_allreduce), but
/// the step counter, accumulator, and the send/receive rendezvous flags all
/// live in a shared mutable state block, and "loop" means re-arming both
/// callbacks from inside the completion path.
pub fn ring_allreduce_callback(
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
    let sim = net.sim().clone();
    if n == 1 {
        return sim.spawn(async move { Ok(local) });
    }
    let me = world.ranks[rank_index];
    let next = world.ranks[(rank_index + 1) % n];
    let prev = world.ranks[(rank_index + n - 1) % n];
    let net = net.clone();
    let world = world.clone();

    struct Machine {
        acc: Vec<i64>,
        step: usize,
        sent: bool,
        got: Option<Vec<i64>>,
    }

    from_callback(&sim, move |done| {
        let machine = Rc::new(RefCell::new(Machine {
            acc: local,
            step: 0,
            sent: false,
            got: None,
        }));
        let to_next = net.iface_to(me, next).unwrap();
        let from_prev = net.iface_to(me, prev).unwrap();
        let done = Rc::new(RefCell::new(Some(done)));

        struct Ring {
            net: Network,
            world: World,
            rank_index: usize,
            op: ReduceOp,
            me: NodeId,
            next: NodeId,
            to_next: IfaceId,
            from_prev: IfaceId,
        }
        let ring = Rc::new(Ring {
            net,
            world,
            rank_index,
            op,
            me,
            next,
            to_next,
            from_prev,
        });

        fn indices(ring: &Ring, step: usize) -> (usize, usize) {
            let n = ring.world.size();
            let r = ring.rank_index;
            if step < n - 1 {
                ((r + n - step) % n, (r + 2 * n - step - 1) % n)
            } else {
                let s = step - (n - 1);
                ((r + 1 + n - s) % n, (r + n - s) % n)
            }
        }

        type DoneCell = Rc<RefCell<Option<crate::interop::Completer<Vec<i64>>>>>;

        fn arm(ring: &Rc<Ring>, machine: &Rc<RefCell<Machine>>, done: &DoneCell) {
            let step = machine.borrow().step;
            let (send_idx, _) = indices(ring, step);
            let outgoing = {
                let m = machine.borrow();
                m.acc[ring.world.chunk_range(send_idx)].to_vec()
            };
            let packet = chunk_packet(ring.me, ring.next, step, send_idx, outgoing);
            {
                let (ring2, machine2, done2) = (ring.clone(), machine.clone(), done.clone());
                ring.net.send_with(ring.me, ring.to_next, packet, move || {
                    machine2.borrow_mut().sent = true;
                    settle(&ring2, &machine2, &done2);
                });
            }
            let (ring2, machine2, done2) = (ring.clone(), machine.clone(), done.clone());
            ring.net.recv_with(ring.me, ring.from_prev, move |packet| {
                let step = machine2.borrow().step;
                let (_, recv_idx) = indices(&ring2, step);
                let vals = open_chunk(&packet, step, recv_idx).expect("well-formed chunk");
                machine2.borrow_mut().got = Some(vals);
                settle(&ring2, &machine2, &done2);
            });
        }

        fn settle(ring: &Rc<Ring>, machine: &Rc<RefCell<Machine>>, done: &DoneCell) {
            let finished = {
                let mut m = machine.borrow_mut();
                if !(m.sent && m.got.is_some()) {
                    return;
                }
                let step = m.step;
                let (_, recv_idx) = indices(ring, step);
                let vals = m.got.take().unwrap();
                let range = ring.world.chunk_range(recv_idx);
                let reduce = step < ring.world.size() - 1;
                let slot = &mut m.acc[range];
                assert_eq!(vals.len(), slot.len(), "chunk length mismatch");
                if reduce {
                    for (o, x) in slot.iter_mut().zip(&vals) {
                        *o = ring.op.combine(*o, *x);
                    }
                } else {
                    slot.copy_from_slice(&vals);
                }
                m.sent = false;
                m.step += 1;
                m.step == 2 * (ring.world.size() - 1)
            };
            if finished {
                let acc = std::mem::take(&mut machine.borrow_mut().acc);
                done.borrow_mut().take().expect("single completion").complete(acc);
            } else {
                arm(ring, machine, done);
            }
        }

        arm(&ring, &machine, &done);
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::allreduce::{naive_allreduce, ring_allreduce};
    use crate::time::Duration;

    fn link() -> LinkConfig {
        LinkConfig::new(Duration::from_ticks(500), 1_000_000_000)
    }

    #[test]
    fn both_fetch_styles_tell_the_same_story() {
        let witness = check_fetch_equivalence(link(), 4_096).expect("traces agree");
        assert_eq!(witness.sequential, witness.callback);
        // Four packets, each one serialization event and one delivery
        // event.
        assert_eq!(witness.events_executed, 8);
        // Every event contributes a schedule and an execute record, plus
        // one tx and one rx per packet.
        assert_eq!(witness.trace_lines, 8 * 2 + 4 * 2);
    }

    #[test]
    fn fetch_finish_time_is_exact() {
        // request: 64B at 1 Gb/s = 512 ticks ser + 500 latency = 1012.
        // data 4096B: 32768 + 500 -> arrives 34280. forward same: 67548.
        // ack 64B: 512 + 500 -> 68560.
        let (report, _, _) = run_fetch_style(link(), 4_096, fetch_and_send_sequential);
        assert_eq!(report.finished_at, SimTime::from_ticks(68_560));
        assert_eq!(report.payload_bytes, 4_096);
    }

    #[test]
    fn callback_collective_matches_the_sequential_one_exactly() {
        let n = 4;
        let inputs: Vec<Vec<i64>> = (0..n)
            .map(|r| (0..8).map(|i| (r * 37 + i * 11) as i64 - 60).collect())
            .collect();
        let run = |callback: bool| {
            let sim = Sim::new();
            let net = Network::new(
                &sim,
                &TopologySpec::ring(n as u32, link()),
            )
            .unwrap();
            let world = World {
                ranks: (0..n as u32).map(NodeId).collect(),
                vector_len: 8,
            };
            let handles: Vec<_> = (0..n)
                .map(|r| {
                    if callback {
                        ring_allreduce_callback(&net, &world, r, inputs[r].clone(), ReduceOp::Sum)
                    } else {
                        ring_allreduce(&net, &world, r, inputs[r].clone(), ReduceOp::Sum)
                    }
                })
                .collect();
            sim.run_to_completion(100_000).unwrap();
            let results: Vec<Vec<i64>> = handles
                .into_iter()
                .map(|h| h.take_result().unwrap().unwrap())
                .collect();
            (results, sim.now(), sim.stats().events_executed)
        };
        let (seq_results, seq_time, seq_events) = run(false);
        let (cb_results, cb_time, cb_events) = run(true);
        let want = naive_allreduce(&inputs, ReduceOp::Sum);
        for r in seq_results.iter().chain(cb_results.iter()) {
            assert_eq!(r, &want);
        }
        assert_eq!(seq_time, cb_time, "styles finish at different times");
        assert_eq!(seq_events, cb_events, "styles cost different event counts");
    }

    #[test]
    fn callback_collective_handles_uneven_chunks() {
        let sim = Sim::new();
        let net = Network::new(&sim, &TopologySpec::ring(3, link())).unwrap();
        let world = World {
            ranks: (0..3).map(NodeId).collect(),
            vector_len: 7,
        };
        let inputs: Vec<Vec<i64>> = (0..3)
            .map(|r| (0..7).map(|i| (r * 13 + i) as i64).collect())
            .collect();
        let handles: Vec<_> = (0..3)
            .map(|r| ring_allreduce_callback(&net, &world, r, inputs[r].clone(), ReduceOp::Max))
            .collect();
        sim.run_to_completion(100_000).unwrap();
        let want = naive_allreduce(&inputs, ReduceOp::Max);
        for h in handles {
            assert_eq!(h.take_result().unwrap().unwrap(), want);
        }
    }
}

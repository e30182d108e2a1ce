//! Turns a [`Scenario`](crate::scenario::Scenario) into a finished run:
//! builds the simulation and topology, spawns the protocol actors, drives
//! the clock, and folds the outcome into one JSON summary. Equal scenarios
//! produce byte-equal summaries; the trace digest is part of that promise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::demo::check_fetch_equivalence;
use crate::kernel::{RunOutcome, SimError, SimStats};
use crate::net::{IfaceId, Network, NodeId};
use crate::protocols::allreduce::{naive_allreduce, ring_allreduce, World};
use crate::protocols::pfc::{run_sink, run_switch, windowed_sender, PfcConfig};
use crate::protocols::rip::{quiesced_at, run_rip, RipNode, RipTimers};
use crate::scenario::{ProtocolKind, Scenario, ScenarioError};
use crate::task::Sim;
use crate::time::{Duration, SimTime};
use crate::trace::{TraceDivergence, TraceReport, TraceStream};

/// Everything a run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    /// Stable JSON summary: scenario identity, clock, counters, metrics.
    pub summary: serde_json::Value,
    /// Recorded trace, when the scenario asked for one.
    pub trace: Option<TraceReport>,
    pub outcome: RunOutcome,
    /// First disagreement between the paired fetch-and-send styles.
    pub divergence: Option<TraceDivergence>,
}

pub fn outcome_name(outcome: RunOutcome) -> &'static str {
    match outcome {
        RunOutcome::QueueDrained => "queue-drained",
        RunOutcome::ReachedLimit => "reached-limit",
        RunOutcome::BudgetExhausted => "budget-exhausted",
    }
}

pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    sc.validate()?;
    match sc.protocol {
        ProtocolKind::Allreduce => run_allreduce(sc),
        ProtocolKind::HpccPfc => run_pfc(sc),
        ProtocolKind::Rip => run_rip_scenario(sc),
        ProtocolKind::FetchAndSend => run_fetch(sc),
    }
}

fn setup(sc: &Scenario) -> Result<(Sim, Network), ScenarioError> {
    let sim = Sim::new();
    if let Some(filter) = sc.trace_filter()? {
        sim.set_trace(TraceStream::memory(filter));
    }
    let net = Network::new(&sim, &sc.topology.to_spec()?)?;
    Ok((sim, net))
}

fn drive(sim: &Sim, sc: &Scenario) -> Result<RunOutcome, ScenarioError> {
    let limit = sc.run_limit.map(SimTime::from_ticks);
    let report = sim
        .run(limit, Some(sc.event_budget))
        .map_err(sim_failed)?;
    Ok(report.outcome)
}

fn sim_failed(e: SimError) -> ScenarioError {
    ScenarioError::Invalid(e.to_string())
}

fn finish(
    sc: &Scenario,
    sim: &Sim,
    outcome: RunOutcome,
    metrics: serde_json::Value,
    divergence: Option<TraceDivergence>,
) -> RunOutput {
    let trace = sim.take_trace();
    let stats = sim.stats();
    RunOutput {
        summary: summarize(sc, &stats, outcome, metrics, trace.as_ref()),
        trace,
        outcome,
        divergence,
    }
}

fn summarize(
    sc: &Scenario,
    stats: &SimStats,
    outcome: RunOutcome,
    metrics: serde_json::Value,
    trace: Option<&TraceReport>,
) -> serde_json::Value {
    let mut summary = json!({
        "scenario": sc.name,
        "protocol": sc.protocol.name(),
        "seed": sc.seed,
        "outcome": outcome_name(outcome),
        "final_time": stats.final_time.ticks(),
        "events_executed": stats.events_executed,
        "events_scheduled": stats.events_scheduled,
        "metrics": metrics,
    });
    if let Some(t) = trace {
        summary["trace"] = json!({ "lines": t.lines, "digest": t.digest });
    }
    summary
}

fn digest_vector(values: &[i64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let out = hasher.finalize();
    let mut hex = String::with_capacity(out.len() * 2);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn run_allreduce(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let section = sc.allreduce.as_ref().expect("validated");
    let (sim, net) = setup(sc)?;
    let n = sc.topology.nodes as usize;
    let world = World {
        ranks: (0..sc.topology.nodes).map(NodeId).collect(),
        vector_len: section.vector_len,
    };
    if n > 1 {
        for i in 0..n {
            let next = (i + 1) % n;
            if net.link_between(world.ranks[i], world.ranks[next]).is_none() {
                return Err(ScenarioError::Invalid(format!(
                    "the collective walks a ring, but node {i} has no link to node {next}"
                )));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let inputs: Vec<Vec<i64>> = (0..n)
        .map(|_| {
            (0..section.vector_len)
                .map(|_| rng.gen_range(-1_000_000..=1_000_000))
                .collect()
        })
        .collect();
    let expected = naive_allreduce(&inputs, section.op);

    let handles: Vec<_> = (0..n)
        .map(|r| ring_allreduce(&net, &world, r, inputs[r].clone(), section.op))
        .collect();
    let outcome = drive(&sim, sc)?;

    let mut finished = true;
    let mut results = Vec::new();
    for (rank, h) in handles.iter().enumerate() {
        match h.take_result() {
            Some(Ok(v)) => results.push(v),
            Some(Err(e)) => {
                return Err(ScenarioError::Invalid(format!("rank {rank} failed: {e}")))
            }
            None => finished = false,
        }
    }
    let matches_oracle = finished && results.iter().all(|v| *v == expected);
    let metrics = json!({
        "ranks": n,
        "vector_len": section.vector_len,
        "op": section.op.name(),
        "finished": finished,
        "matches_oracle": matches_oracle,
        "result_digest": if matches_oracle { json!(digest_vector(&expected)) } else { json!(null) },
    });
    Ok(finish(sc, &sim, outcome, metrics, None))
}

fn run_pfc(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let p = sc.pfc.as_ref().expect("validated");
    let (sim, net) = setup(sc)?;
    let config = PfcConfig {
        xoff: p.xoff,
        xon: p.xon,
        pause_quanta: Duration::from_ticks(p.pause_quanta),
        mtu: p.mtu,
        initial_window: p.initial_window,
        high_mark: p.high_mark,
        low_mark: p.low_mark,
    };

    let switch = run_switch(&net, NodeId(p.switch), config);
    let sink = run_sink(&net, NodeId(p.sink));
    let senders: Vec<_> = p
        .senders
        .iter()
        .map(|s| {
            windowed_sender(
                &net,
                config,
                NodeId(*s),
                NodeId(p.sink),
                p.data_priority,
                p.packet_count,
            )
        })
        .collect();

    let outcome = drive(&sim, sc)?;

    let mut all_delivered = true;
    let mut per_sender = Vec::new();
    for (node, h) in p.senders.iter().zip(&senders) {
        match h.take_result() {
            Some(Ok(r)) => per_sender.push(json!({
                "node": node,
                "packets_sent": r.packets_sent,
                "completed_at": r.completed_at.ticks(),
                "final_window": r.final_window,
                "min_window": r.min_window,
                "max_window": r.max_window,
                "max_telemetry": r.max_telemetry,
                "pause_frames_seen": r.pause_frames_seen,
            })),
            Some(Err(e)) => {
                return Err(ScenarioError::Invalid(format!("sender {node} failed: {e}")))
            }
            None => {
                all_delivered = false;
                per_sender.push(json!({ "node": node, "unfinished": true }));
            }
        }
    }
    let metrics = json!({
        "senders": per_sender,
        "all_delivered": all_delivered,
        "pause_frames_sent": switch.pause_frames_sent(),
        "pause_refreshes": switch.guard.refreshes_seen(),
        "packets_dropped": net.packets_dropped(),
    });
    sink.abort();
    switch.shutdown();
    Ok(finish(sc, &sim, outcome, metrics, None))
}

fn run_rip_scenario(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let r = sc.rip.as_ref().expect("validated");
    let (sim, net) = setup(sc)?;
    let timers = RipTimers {
        update_period: Duration::from_ticks(r.update_period),
        route_timeout: Duration::from_ticks(r.route_timeout),
        gc_timeout: Duration::from_ticks(r.gc_timeout),
    };
    let daemons: Vec<RipNode> = (0..sc.topology.nodes)
        .map(|i| run_rip(&net, NodeId(i), timers))
        .collect();

    let phase = |until: u64| {
        sim.run(Some(SimTime::from_ticks(until)), Some(sc.event_budget))
            .map_err(sim_failed)
            .map(|rep| rep.outcome)
    };

    let mut outcome = phase(r.converge_ticks)?;
    let converged_at = quiesced_at(&daemons);
    let converged_match = routes_match_shortest_paths(&net, &daemons);

    let mut link_cut = json!(null);
    if outcome != RunOutcome::BudgetExhausted {
        if let Some([a, b]) = r.fail_link {
            let link = net.link_between(NodeId(a), NodeId(b)).ok_or_else(|| {
                ScenarioError::Invalid(format!("fail_link: no link joins node {a} and node {b}"))
            })?;
            net.set_link_up(link, false);
            link_cut = json!([a, b]);
            outcome = phase(r.converge_ticks + r.settle_ticks)?;
        }
    }

    let final_match = routes_match_shortest_paths(&net, &daemons);
    let tables: BTreeMap<String, serde_json::Value> = daemons
        .iter()
        .map(|d| {
            let rows: BTreeMap<String, serde_json::Value> = d
                .table()
                .iter()
                .map(|(dest, (next, metric))| {
                    let next = match next {
                        Some(n) => json!(n.0),
                        None => json!(null),
                    };
                    (dest.to_string(), json!({ "next": next, "metric": metric }))
                })
                .collect();
            (d.node().0.to_string(), json!(rows))
        })
        .collect();
    let total_changes: u64 = daemons.iter().map(RipNode::change_count).sum();
    for d in &daemons {
        d.shutdown();
    }

    let metrics = json!({
        "converged_at": converged_at.ticks(),
        "converged_routes_match": converged_match,
        "link_cut": link_cut,
        "quiesced_at": quiesced_at(&daemons).ticks(),
        "final_routes_match": final_match,
        "total_changes": total_changes,
        "tables": tables,
    });
    Ok(finish(sc, &sim, outcome, metrics, None))
}

/// Compares every daemon's forwarding view against hop counts walked on the
/// live topology. Unreachable or over-horizon destinations must be absent
/// or tombstoned, which `metric_to` reports as `None`.
fn routes_match_shortest_paths(net: &Network, daemons: &[RipNode]) -> bool {
    for dst in daemons.iter().map(RipNode::node) {
        let tree = net.static_routes(dst);
        for d in daemons {
            let me = d.node();
            if me == dst {
                continue;
            }
            let expected = tree
                .get(&me)
                .map(|_| walk_hops(net, &tree, me, dst))
                .filter(|hops| *hops < crate::protocols::rip::INFINITY_METRIC);
            if d.metric_to(dst) != expected {
                return false;
            }
        }
    }
    true
}

fn walk_hops(net: &Network, tree: &BTreeMap<NodeId, IfaceId>, from: NodeId, dst: NodeId) -> u32 {
    let mut cur = from;
    let mut hops = 0;
    while cur != dst {
        cur = net.peer_of(cur, tree[&cur]);
        hops += 1;
    }
    hops
}

fn run_fetch(sc: &Scenario) -> Result<RunOutput, ScenarioError> {
    let f = sc.fetch_and_send.as_ref().expect("validated");
    let spec = sc.topology.to_spec()?;
    let config = spec.links[0].config;
    let (metrics, divergence) = match check_fetch_equivalence(config, f.payload_bytes) {
        Ok(w) => (
            json!({
                "equivalent": true,
                "payload_bytes": w.sequential.payload_bytes,
                "finished_at": w.sequential.finished_at.ticks(),
                "trace_lines": w.trace_lines,
                "events_executed": w.events_executed,
            }),
            None,
        ),
        Err(d) => (
            json!({
                "equivalent": false,
                "diverged_at_line": d.index,
                "sequential": d.left,
                "callback": d.right,
            }),
            Some(d),
        ),
    };
    let final_time = metrics
        .get("finished_at")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    let events = metrics
        .get("events_executed")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    let summary = json!({
        "scenario": sc.name,
        "protocol": sc.protocol.name(),
        "seed": sc.seed,
        "outcome": outcome_name(RunOutcome::QueueDrained),
        "final_time": final_time,
        "events_executed": events,
        "events_scheduled": events,
        "metrics": metrics,
    });
    Ok(RunOutput {
        summary,
        trace: None,
        outcome: RunOutcome::QueueDrained,
        divergence,
    })
}

//! Distance-vector routing: every node advertises its table to its
//! neighbors, adopts shorter paths by Bellman-Ford relaxation, and ages
//! routes out when their provider falls silent.
//!
//! Each node runs three groups of tasks over one shared table:
//!
//! * an advertiser that sends the full table out every interface at start
//!   and then once per update period, applying split horizon with poisoned
//!   reverse (routes are advertised back to their provider with an infinite
//!   metric);
//! * one receiver per interface that applies arriving advertisements:
//!   a provider's word about its own routes is always accepted, anyone
//!   else's only when it shortens the path;
//! * a sweeper that expires routes whose provider has not refreshed them
//!   within the route timeout, advertises the loss, and garbage-collects
//!   the tombstone after a further delay.
//!
//! Any table change queues one triggered update for the current instant, so
//! good news spreads at link speed rather than once per period. Metrics
//! saturate at [`INFINITY_METRIC`]; a route at that metric is unreachable.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::net::{IfaceId, Network, NodeId, Packet};
use crate::task::{OperationHandle, Sim};
use crate::time::{Duration, SimTime};
use crate::trace::TraceKind;

/// Metric meaning "unreachable". Sixteen hops bounds counting-to-infinity.
pub const INFINITY_METRIC: u32 = 16;

/// Band advertisements ride on; above bulk data, below flow control.
const RIP_PRIORITY: u8 = 6;

const ENTRY_WIRE_BYTES: u64 = 16;
const FRAME_HEADER_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy)]
pub struct RipTimers {
    /// Gap between full-table advertisements.
    pub update_period: Duration,
    /// Silence after which a learned route expires.
    pub route_timeout: Duration,
    /// How long an expired route lingers (still advertised as unreachable)
    /// before removal.
    pub gc_timeout: Duration,
}

impl RipTimers {
    fn validate(&self) {
        assert!(!self.update_period.is_zero(), "zero update period");
        assert!(
            self.route_timeout > self.update_period,
            "route timeout must exceed the update period"
        );
        assert!(!self.gc_timeout.is_zero(), "zero gc timeout");
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RipEntryMsg {
    pub dest: u32,
    pub metric: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RipMsg {
    pub entries: Vec<RipEntryMsg>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RouteEntry {
    /// None marks the node's own entry.
    next_hop: Option<NodeId>,
    metric: u32,
    last_refresh: SimTime,
    /// Set once the route has expired; removal happens when the clock
    /// passes it.
    gc_at: Option<SimTime>,
}

struct RipState {
    table: BTreeMap<u32, RouteEntry>,
    /// Last instant the forwarding view (metrics and next hops below
    /// infinity) changed. Garbage collection does not move it.
    last_changed: SimTime,
    changes: u64,
}

struct RipCore {
    sim: Sim,
    net: Network,
    node: NodeId,
    timers: RipTimers,
    state: RefCell<RipState>,
    last_triggered: Cell<Option<SimTime>>,
}

/// Builds the advertisement sent toward `peer` from a table snapshot:
/// routes learned from `peer` are poisoned to the infinite metric, all
/// others go out as held.
fn build_advertisement(
    table: &BTreeMap<u32, RouteEntry>,
    peer: NodeId,
) -> Vec<RipEntryMsg> {
    table
        .iter()
        .map(|(dest, e)| RipEntryMsg {
            dest: *dest,
            metric: if e.next_hop == Some(peer) {
                INFINITY_METRIC
            } else {
                e.metric
            },
        })
        .collect()
}

impl RipCore {
    fn advertise_all(self: &Rc<Self>) {
        let frames: Vec<(IfaceId, NodeId, Vec<RipEntryMsg>)> = {
            let state = self.state.borrow();
            self.net
                .neighbors(self.node)
                .into_iter()
                .map(|(iface, peer)| (iface, peer, build_advertisement(&state.table, peer)))
                .collect()
        };
        for (iface, peer, entries) in frames {
            let size_bytes = FRAME_HEADER_BYTES + ENTRY_WIRE_BYTES * entries.len() as u64;
            let payload =
                serde_json::to_vec(&RipMsg { entries }).expect("advertisement serializes");
            drop(self.net.send_on(
                self.node,
                iface,
                Packet {
                    src: self.node,
                    dst: peer,
                    size_bytes,
                    priority: RIP_PRIORITY,
                    kind: "rip".to_string(),
                    payload,
                },
            ));
        }
    }

    /// Queues one extra advertisement for this instant. Repeat calls within
    /// the instant collapse into it.
    fn trigger_update(self: &Rc<Self>) {
        let now = self.sim.now();
        if self.last_triggered.get() == Some(now) {
            return;
        }
        self.last_triggered.set(Some(now));
        let core = self.clone();
        self.sim.schedule(Duration::ZERO, move || core.advertise_all());
    }

    fn note_change(&self, dest: u32, next: Option<NodeId>, metric: u32, change: &'static str) {
        self.sim.emit(TraceKind::RouteUpdate, || {
            vec![
                ("node", self.node.to_string()),
                ("dest", dest.to_string()),
                (
                    "next",
                    next.map_or_else(|| "-".to_string(), |n| n.to_string()),
                ),
                ("metric", metric.to_string()),
                ("change", change.to_string()),
            ]
        });
    }

    /// Applies one advertisement received from the neighbor `from`.
    fn process(self: &Rc<Self>, from: NodeId, entries: &[RipEntryMsg]) {
        let now = self.sim.now();
        let mut changed = false;
        {
            let mut state = self.state.borrow_mut();
            for e in entries {
                if e.dest == self.node.0 {
                    continue;
                }
                let offered = e.metric.saturating_add(1).min(INFINITY_METRIC);
                match state.table.get_mut(&e.dest) {
                    Some(route) if route.next_hop == Some(from) => {
                        route.last_refresh = now;
                        if offered == route.metric {
                            if offered < INFINITY_METRIC {
                                route.gc_at = None;
                            }
                            continue;
                        }
                        route.metric = offered;
                        if offered == INFINITY_METRIC {
                            route.gc_at = Some(now + self.timers.gc_timeout);
                        } else {
                            route.gc_at = None;
                        }
                        changed = true;
                        self.note_change(e.dest, Some(from), offered, "metric");
                    }
                    Some(route) => {
                        if offered < route.metric {
                            route.next_hop = Some(from);
                            route.metric = offered;
                            route.last_refresh = now;
                            route.gc_at = None;
                            changed = true;
                            self.note_change(e.dest, Some(from), offered, "adopt");
                        }
                    }
                    None => {
                        if offered < INFINITY_METRIC {
                            state.table.insert(
                                e.dest,
                                RouteEntry {
                                    next_hop: Some(from),
                                    metric: offered,
                                    last_refresh: now,
                                    gc_at: None,
                                },
                            );
                            changed = true;
                            self.note_change(e.dest, Some(from), offered, "adopt");
                        }
                    }
                }
            }
            if changed {
                state.last_changed = now;
                state.changes += 1;
            }
        }
        if changed {
            self.trigger_update();
        }
    }

    /// Expires silent routes and removes tombstones whose lingering period
    /// has passed.
    fn sweep(self: &Rc<Self>) {
        let now = self.sim.now();
        let mut expired = Vec::new();
        let mut removed = Vec::new();
        {
            let mut state = self.state.borrow_mut();
            for (dest, route) in state.table.iter_mut() {
                if route.next_hop.is_none() {
                    continue;
                }
                match route.gc_at {
                    None => {
                        if now.since(route.last_refresh) >= self.timers.route_timeout {
                            route.metric = INFINITY_METRIC;
                            route.gc_at = Some(now + self.timers.gc_timeout);
                            expired.push((*dest, route.next_hop));
                        }
                    }
                    Some(at) => {
                        if now >= at {
                            removed.push(*dest);
                        }
                    }
                }
            }
            for dest in &removed {
                state.table.remove(dest);
            }
            if !expired.is_empty() {
                state.last_changed = now;
                state.changes += 1;
            }
        }
        for (dest, next) in &expired {
            self.note_change(*dest, *next, INFINITY_METRIC, "expire");
        }
        for dest in &removed {
            self.note_change(*dest, None, INFINITY_METRIC, "remove");
        }
        if !expired.is_empty() {
            self.trigger_update();
        }
    }
}

/// One node's running routing daemon.
pub struct RipNode {
    core: Rc<RipCore>,
    tasks: Vec<OperationHandle<()>>,
}

impl RipNode {
    pub fn node(&self) -> NodeId {
        self.core.node
    }

    /// Snapshot of the full table, including expired tombstones at the
    /// infinite metric.
    pub fn table(&self) -> BTreeMap<u32, (Option<NodeId>, u32)> {
        self.core
            .state
            .borrow()
            .table
            .iter()
            .map(|(d, e)| (*d, (e.next_hop, e.metric)))
            .collect()
    }

    /// Usable next hop and metric toward `dest`, if any.
    pub fn route_for(&self, dest: NodeId) -> Option<(NodeId, u32)> {
        let state = self.core.state.borrow();
        let e = state.table.get(&dest.0)?;
        match (e.next_hop, e.metric) {
            (Some(hop), m) if m < INFINITY_METRIC => Some((hop, m)),
            _ => None,
        }
    }

    /// Hop count toward `dest`; zero for the node itself.
    pub fn metric_to(&self, dest: NodeId) -> Option<u32> {
        let state = self.core.state.borrow();
        let e = state.table.get(&dest.0)?;
        (e.metric < INFINITY_METRIC).then_some(e.metric)
    }

    /// Last instant the forwarding view changed.
    pub fn last_changed(&self) -> SimTime {
        self.core.state.borrow().last_changed
    }

    /// Forwarding view changes so far.
    pub fn change_count(&self) -> u64 {
        self.core.state.borrow().changes
    }

    pub fn shutdown(&self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Instant the group stopped changing: the latest forwarding change on any
/// node.
pub fn quiesced_at(nodes: &[RipNode]) -> SimTime {
    nodes
        .iter()
        .map(RipNode::last_changed)
        .max()
        .unwrap_or(SimTime::ZERO)
}

/// Starts the daemon on `node`: installs the self route and spawns the
/// advertiser, one receiver per interface, and the sweeper.
pub fn run_rip(net: &Network, node: NodeId, timers: RipTimers) -> RipNode {
    timers.validate();
    let sim = net.sim().clone();
    let mut table = BTreeMap::new();
    table.insert(
        node.0,
        RouteEntry {
            next_hop: None,
            metric: 0,
            last_refresh: sim.now(),
            gc_at: None,
        },
    );
    let core = Rc::new(RipCore {
        sim: sim.clone(),
        net: net.clone(),
        node,
        timers,
        state: RefCell::new(RipState {
            table,
            last_changed: sim.now(),
            changes: 0,
        }),
        last_triggered: Cell::new(None),
    });

    let mut tasks = Vec::new();

    let c = core.clone();
    tasks.push(sim.spawn(async move {
        loop {
            c.advertise_all();
            c.sim.sleep(c.timers.update_period).await?;
        }
    }));

    for (iface, peer) in net.neighbors(node) {
        let c = core.clone();
        tasks.push(sim.spawn(async move {
            loop {
                let packet = match c.net.recv(node, iface).await {
                    Ok(p) => p,
                    Err(_) => return Ok(()),
                };
                if packet.kind != "rip" {
                    continue;
                }
                let Ok(msg) = serde_json::from_slice::<RipMsg>(&packet.payload) else {
                    continue;
                };
                c.process(peer, &msg.entries);
            }
        }));
    }

    let c = core.clone();
    tasks.push(sim.spawn(async move {
        loop {
            c.sim.sleep(c.timers.update_period).await?;
            c.sweep();
        }
    }));

    RipNode { core, tasks }
}

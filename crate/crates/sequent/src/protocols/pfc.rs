//! Priority flow control over a store-and-forward fabric, with a
//! telemetry-driven sending window.
//!
//! Switches watch their egress queues. When a band's backlog reaches the
//! xoff mark, the switch broadcasts a pause frame for that priority to every
//! other interface; upstream transmitters hold the band for the frame's
//! quanta and refresh the hold on every repeat frame. When the backlog
//! drains to the xon mark the switch broadcasts a zero-quanta frame that
//! lifts the hold early. Pause frames ride the highest priority band, which
//! is never paused, so control keeps flowing under congestion.
//!
//! Data packets carry in-band telemetry: each switch stamps the deepest
//! egress backlog the packet has seen; sinks echo the stamp on their
//! acknowledgements. Senders run a windowed loop that halves the window
//! when telemetry crosses a high mark and grows it by one packet when
//! telemetry stays under a low mark.
//!
//! The refresh path is where callback implementations historically leak
//! timers: a pause that arrives while an older hold is still pending must
//! replace it, not race it. Here every hold is one abortable sleep, and a
//! refresh aborts the previous sleep before starting its own, so at most
//! one hold per (interface, priority) can ever be live.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::net::{IfaceId, Network, NodeId, Packet};
use crate::task::{OperationHandle, Sim, TaskId};
use crate::time::{Duration, SimTime};

/// Band reserved for pause frames and acknowledgements. Watchers skip it,
/// so it can never be paused by this protocol.
pub const CONTROL_PRIORITY: u8 = 7;

/// Wire size of pause frames and acknowledgements.
const CONTROL_FRAME_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy)]
pub struct PfcConfig {
    /// Egress depth at which a band's upstream is paused.
    pub xoff: usize,
    /// Egress depth at which a paused band's upstream is released.
    pub xon: usize,
    /// How long one pause frame holds the band.
    pub pause_quanta: Duration,
    /// Data packet wire size; also the window adjustment step.
    pub mtu: u64,
    /// Sender window at flow start, in bytes.
    pub initial_window: u64,
    /// Telemetry depth above which the window halves.
    pub high_mark: u64,
    /// Telemetry depth below which the window grows by one packet.
    pub low_mark: u64,
}

impl PfcConfig {
    fn validate(&self) {
        assert!(self.xon < self.xoff, "xon must sit below xoff");
        assert!(!self.pause_quanta.is_zero(), "zero pause quanta");
        assert!(self.mtu >= 1, "zero mtu");
        assert!(self.initial_window >= self.mtu, "window below one packet");
        assert!(self.low_mark <= self.high_mark, "low mark above high mark");
    }
}

/// Pause frame body: which band, and for how long. Zero quanta lifts the
/// hold immediately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PauseMsg {
    pub priority: u8,
    pub quanta_ticks: u64,
}

/// Data packet body. `telemetry` is the deepest egress backlog stamped by
/// any switch along the path so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataMsg {
    pub seq: u64,
    pub telemetry: u64,
}

/// Acknowledgement body: the sequence it acknowledges and the telemetry
/// echoed from the data packet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AckMsg {
    pub seq: u64,
    pub telemetry: u64,
}

pub fn pause_frame(src: NodeId, dst: NodeId, priority: u8, quanta: Duration) -> Packet {
    Packet {
        src,
        dst,
        size_bytes: CONTROL_FRAME_BYTES,
        priority: CONTROL_PRIORITY,
        kind: "pfc".to_string(),
        payload: serde_json::to_vec(&PauseMsg {
            priority,
            quanta_ticks: quanta.ticks(),
        })
        .expect("pause frame serializes"),
    }
}

/// Applies incoming pause frames to local egress bands, one abortable hold
/// per (interface, priority). A refresh replaces the live hold; a
/// zero-quanta frame releases it.
pub struct PfcGuard {
    sim: Sim,
    net: Network,
    node: NodeId,
    holds: Rc<RefCell<BTreeMap<(u32, u8), OperationHandle<()>>>>,
    refreshes: Rc<RefCell<u64>>,
}

impl PfcGuard {
    pub fn new(net: &Network, node: NodeId) -> PfcGuard {
        PfcGuard {
            sim: net.sim().clone(),
            net: net.clone(),
            node,
            holds: Rc::new(RefCell::new(BTreeMap::new())),
            refreshes: Rc::new(RefCell::new(0)),
        }
    }

    /// Handles one pause frame that arrived on `iface`.
    pub fn handle_frame(&self, iface: IfaceId, msg: &PauseMsg) {
        let key = (iface.0, msg.priority);
        let stale = self.holds.borrow_mut().remove(&key);
        if let Some(h) = stale {
            h.abort();
            *self.refreshes.borrow_mut() += 1;
        }
        let quanta = Duration::from_ticks(msg.quanta_ticks);
        self.net
            .pause_priority(self.node, iface, msg.priority, quanta);
        if quanta.is_zero() {
            return;
        }
        let timer = self.sim.sleep(quanta);
        let ticker = timer.retain();
        let holds = self.holds.clone();
        let janitor: OperationHandle<()> = self.sim.spawn(async move {
            if ticker.await.is_ok() {
                holds.borrow_mut().remove(&key);
            }
            Ok(())
        });
        drop(janitor);
        self.holds.borrow_mut().insert(key, timer);
    }

    /// Whether a hold is currently live for the band.
    pub fn is_paused(&self, iface: IfaceId, priority: u8) -> bool {
        self.holds.borrow().contains_key(&(iface.0, priority))
    }

    pub fn live_holds(&self) -> usize {
        self.holds.borrow().len()
    }

    /// Pause frames that replaced an earlier live hold.
    pub fn refreshes_seen(&self) -> u64 {
        *self.refreshes.borrow()
    }
}

/// Running switch: per-interface forwarder tasks plus the egress watchers
/// that emit pause and release frames.
pub struct PfcSwitch {
    pub guard: Rc<PfcGuard>,
    forwarders: Vec<OperationHandle<()>>,
    pause_frames_sent: Rc<RefCell<u64>>,
}

impl PfcSwitch {
    /// Tasks still running the switch; abort them to take it offline.
    pub fn forwarders(&self) -> &[OperationHandle<()>] {
        &self.forwarders
    }

    pub fn shutdown(self) {
        for f in &self.forwarders {
            f.abort();
        }
    }

    pub fn pause_frames_sent(&self) -> u64 {
        *self.pause_frames_sent.borrow()
    }

    pub fn forwarder_ids(&self) -> Vec<TaskId> {
        self.forwarders.iter().map(|f| f.id()).collect()
    }
}

/// Starts a switch on `node`: one forwarder task per interface and one
/// backlog watcher per egress band. Data packets route toward their
/// destination along shortest hops and pick up telemetry; pause frames are
/// consumed; acknowledgements forward untouched.
pub fn run_switch(net: &Network, node: NodeId, config: PfcConfig) -> PfcSwitch {
    config.validate();
    let sim = net.sim().clone();
    let guard = Rc::new(PfcGuard::new(net, node));
    let pause_frames_sent = Rc::new(RefCell::new(0u64));
    let route_cache: Rc<RefCell<BTreeMap<u32, IfaceId>>> = Rc::new(RefCell::new(BTreeMap::new()));
    let iface_total = net.iface_count(node);

    for iface in 0..iface_total {
        let last_depth: Rc<RefCell<[usize; 8]>> = Rc::new(RefCell::new([0; 8]));
        let told_off: Rc<RefCell<[bool; 8]>> = Rc::new(RefCell::new([false; 8]));
        let netw = net.clone();
        let sent = pause_frames_sent.clone();
        net.watch_queue(node, IfaceId(iface), move |prio, depth| {
            if prio == CONTROL_PRIORITY {
                return;
            }
            let was = std::mem::replace(&mut last_depth.borrow_mut()[prio as usize], depth);
            let rising = depth > was;
            let quanta = if rising && depth >= config.xoff {
                told_off.borrow_mut()[prio as usize] = true;
                config.pause_quanta
            } else if !rising && depth <= config.xon && told_off.borrow()[prio as usize] {
                told_off.borrow_mut()[prio as usize] = false;
                Duration::ZERO
            } else {
                return;
            };
            for (other, peer) in netw.neighbors(node) {
                if other.0 == iface {
                    continue;
                }
                *sent.borrow_mut() += 1;
                drop(netw.send_on(node, other, pause_frame(node, peer, prio, quanta)));
            }
        });
    }

    let mut forwarders = Vec::new();
    for iface in 0..iface_total {
        let netw = net.clone();
        let g = guard.clone();
        let routes = route_cache.clone();
        forwarders.push(sim.spawn(async move {
            loop {
                let packet = match netw.recv(node, IfaceId(iface)).await {
                    Ok(p) => p,
                    Err(_) => return Ok(()),
                };
                if packet.kind == "pfc" {
                    if let Ok(msg) = serde_json::from_slice::<PauseMsg>(&packet.payload) {
                        g.handle_frame(IfaceId(iface), &msg);
                    }
                    continue;
                }
                if packet.dst == node {
                    continue;
                }
                let out = {
                    let cached = routes.borrow().get(&packet.dst.0).copied();
                    match cached {
                        Some(i) => Some(i),
                        None => {
                            let found = netw.static_routes(packet.dst).get(&node).copied();
                            if let Some(i) = found {
                                routes.borrow_mut().insert(packet.dst.0, i);
                            }
                            found
                        }
                    }
                };
                let Some(out) = out else { continue };
                let packet = stamp_telemetry(&netw, node, out, packet);
                drop(netw.send_on(node, out, packet));
            }
        }));
    }

    PfcSwitch {
        guard,
        forwarders,
        pause_frames_sent,
    }
}

fn stamp_telemetry(net: &Network, node: NodeId, out: IfaceId, mut packet: Packet) -> Packet {
    if packet.kind != "data" {
        return packet;
    }
    if let Ok(mut msg) = serde_json::from_slice::<DataMsg>(&packet.payload) {
        let depth = net.queue_depth(node, out, packet.priority) as u64;
        msg.telemetry = msg.telemetry.max(depth);
        packet.payload = serde_json::to_vec(&msg).expect("data message serializes");
    }
    packet
}

/// Window after one acknowledgement: telemetry above the high mark halves
/// it (never below one packet), telemetry below the low mark grows it by
/// one packet, anything between holds it.
pub fn adjust_window(window: u64, config: &PfcConfig, telemetry: u64) -> u64 {
    if telemetry > config.high_mark {
        (window / 2).max(config.mtu)
    } else if telemetry < config.low_mark {
        window + config.mtu
    } else {
        window
    }
}

/// What one finished flow looked like from the sender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenderReport {
    pub packets_sent: u64,
    pub completed_at: SimTime,
    pub final_window: u64,
    pub min_window: u64,
    pub max_window: u64,
    pub max_telemetry: u64,
    pub pause_frames_seen: u64,
}

/// Runs one windowed flow of `packet_count` data packets from `src` to
/// `dst`. The task keeps `window / mtu` packets unacknowledged, adjusts the
/// window from echoed telemetry, and applies pause frames that arrive
/// interleaved with acknowledgements.
pub fn windowed_sender(
    net: &Network,
    config: PfcConfig,
    src: NodeId,
    dst: NodeId,
    data_priority: u8,
    packet_count: u64,
) -> OperationHandle<SenderReport> {
    config.validate();
    assert!(
        data_priority != CONTROL_PRIORITY,
        "data may not ride the control band"
    );
    let net = net.clone();
    let sim = net.sim().clone();
    let guard = PfcGuard::new(&net, src);
    let iface = *net
        .static_routes(dst)
        .get(&src)
        .unwrap_or_else(|| panic!("node {src} has no path to node {dst}"));
    let clock = sim.clone();
    sim.spawn(async move {
        let sim = clock;
        let mut window = config.initial_window;
        let mut report = SenderReport {
            packets_sent: 0,
            completed_at: SimTime::ZERO,
            final_window: window,
            min_window: window,
            max_window: window,
            max_telemetry: 0,
            pause_frames_seen: 0,
        };
        let mut next_seq = 0u64;
        let mut acked = 0u64;
        let mut inflight = 0u64;
        while acked < packet_count {
            while next_seq < packet_count && inflight + config.mtu <= window {
                let msg = DataMsg {
                    seq: next_seq,
                    telemetry: 0,
                };
                drop(net.send_on(
                    src,
                    iface,
                    Packet {
                        src,
                        dst,
                        size_bytes: config.mtu,
                        priority: data_priority,
                        kind: "data".to_string(),
                        payload: serde_json::to_vec(&msg).expect("data message serializes"),
                    },
                ));
                report.packets_sent += 1;
                next_seq += 1;
                inflight += config.mtu;
            }
            let packet = net.recv(src, iface).await?;
            if packet.kind == "pfc" {
                if let Ok(msg) = serde_json::from_slice::<PauseMsg>(&packet.payload) {
                    report.pause_frames_seen += 1;
                    guard.handle_frame(iface, &msg);
                }
                continue;
            }
            if packet.kind != "ack" {
                continue;
            }
            let ack: AckMsg = match serde_json::from_slice(&packet.payload) {
                Ok(a) => a,
                Err(_) => continue,
            };
            acked += 1;
            inflight = inflight.saturating_sub(config.mtu);
            report.max_telemetry = report.max_telemetry.max(ack.telemetry);
            window = adjust_window(window, &config, ack.telemetry);
            report.min_window = report.min_window.min(window);
            report.max_window = report.max_window.max(window);
        }
        report.final_window = window;
        report.completed_at = sim.now();
        Ok(report)
    })
}

/// Runs a sink on `node`: every data packet is acknowledged back to its
/// source on the control band, echoing the packet's telemetry stamp.
pub fn run_sink(net: &Network, node: NodeId) -> OperationHandle<()> {
    let net = net.clone();
    let sim = net.sim().clone();
    sim.spawn(async move {
        loop {
            let packet = match net.recv(node, IfaceId(0)).await {
                Ok(p) => p,
                Err(_) => return Ok(()),
            };
            if packet.kind != "data" {
                continue;
            }
            let Ok(msg) = serde_json::from_slice::<DataMsg>(&packet.payload) else {
                continue;
            };
            drop(net.send_on(
                node,
                IfaceId(0),
                Packet {
                    src: node,
                    dst: packet.src,
                    size_bytes: CONTROL_FRAME_BYTES,
                    priority: CONTROL_PRIORITY,
                    kind: "ack".to_string(),
                    payload: serde_json::to_vec(&AckMsg {
                        seq: msg.seq,
                        telemetry: msg.telemetry,
                    })
                    .expect("ack serializes"),
                },
            ));
        }
    })
}

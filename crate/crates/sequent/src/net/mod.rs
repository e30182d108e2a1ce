//! Packet network model: nodes joined by full-duplex links, per-interface
//! egress queues with eight strict priority levels, store-and-forward
//! serialization, and propagation delay.
//!
//! A [`Network`] is built over a [`Sim`] from a [`TopologySpec`]. Every link
//! contributes one interface to each endpoint; interfaces are numbered per
//! node in link-declaration order, so a topology file pins the interface map.
//!
//! Transmission on an interface is a two-stage affair. A packet first holds
//! the transmitter for its serialization time (`size_bytes * 8 / bandwidth`),
//! then propagates for the link latency. The transmitter picks the highest
//! non-paused priority with traffic and serves each band FIFO. Receive is
//! symmetric: arrivals either wake a waiting receiver or park in a per-
//! interface buffer until one shows up.
//!
//! ```
//! use sequent::{LinkConfig, Network, Sim, TopologySpec, Duration, NodeId};
//!
//! let sim = Sim::new();
//! let spec = TopologySpec::line(2, LinkConfig::new(Duration::from_ticks(500), 1_000_000_000));
//! let net = Network::new(&sim, &spec).unwrap();
//!
//! let n = net.clone();
//! let done = sim.spawn(async move {
//!     n.send(NodeId(0), NodeId(1), n.packet(0, "ping", b"hi".to_vec())).await?;
//!     let got = n.recv(NodeId(1), n.iface_to(NodeId(1), NodeId(0)).unwrap()).await?;
//!     Ok(got.kind)
//! });
//! sim.run_to_completion(10_000).unwrap();
//! assert_eq!(done.take_result().unwrap().unwrap(), "ping");
//! ```

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interop::from_callback;
use crate::kernel::EventId;
use crate::task::{OpResult, OperationHandle, Sim};
use crate::time::{Duration, SimTime};
use crate::trace::TraceKind;

/// Number of strict priority bands per interface. Priority 7 is served first.
pub const PRIORITY_LEVELS: usize = 8;

/// Index of a node in the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

/// Index of an interface local to one node. Interface numbers restart at 0
/// on every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IfaceId(pub u32);

/// Index of a link in topology declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for IfaceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for LinkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A unit of traffic. `kind` names the protocol message for traces and
/// dispatch; `payload` carries the serialized message body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub src: NodeId,
    pub dst: NodeId,
    /// Wire size used for serialization timing. Must be at least 1.
    pub size_bytes: u64,
    /// Strict priority band, 0 (lowest) through 7 (highest).
    pub priority: u8,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub payload: Vec<u8>,
}

/// Latency and bandwidth of one full-duplex link. Both directions share the
/// configuration but serialize independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub latency: Duration,
    /// Bits per second of each direction.
    pub bandwidth_bps: u64,
}

impl LinkConfig {
    pub fn new(latency: Duration, bandwidth_bps: u64) -> LinkConfig {
        LinkConfig {
            latency,
            bandwidth_bps,
        }
    }
}

/// One link in a topology declaration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(flatten)]
    pub config: LinkConfig,
}

/// Declarative topology: a node count and the links joining them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySpec {
    pub nodes: u32,
    pub links: Vec<LinkSpec>,
}

impl TopologySpec {
    /// Chain of `n` nodes: 0-1, 1-2, ... with one shared link config.
    pub fn line(n: u32, config: LinkConfig) -> TopologySpec {
        let links = (1..n)
            .map(|i| LinkSpec {
                a: NodeId(i - 1),
                b: NodeId(i),
                config,
            })
            .collect();
        TopologySpec { nodes: n, links }
    }

    /// Cycle of `n` nodes: the line plus a closing link n-1 to 0.
    pub fn ring(n: u32, config: LinkConfig) -> TopologySpec {
        let mut spec = TopologySpec::line(n, config);
        if n > 2 {
            spec.links.push(LinkSpec {
                a: NodeId(n - 1),
                b: NodeId(0),
                config,
            });
        }
        spec
    }

    /// Hub node 0 with spokes 1..n sharing one link config.
    pub fn star(n: u32, config: LinkConfig) -> TopologySpec {
        let links = (1..n)
            .map(|i| LinkSpec {
                a: NodeId(0),
                b: NodeId(i),
                config,
            })
            .collect();
        TopologySpec { nodes: n, links }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology declares no nodes")]
    NoNodes,
    #[error("link {link} endpoint {node} is outside 0..{nodes}")]
    NodeOutOfRange { link: usize, node: u32, nodes: u32 },
    #[error("link {link} joins node {node} to itself")]
    SelfLink { link: usize, node: u32 },
    #[error("link {link} has zero latency")]
    ZeroLatency { link: usize },
    #[error("link {link} has zero bandwidth")]
    ZeroBandwidth { link: usize },
}

type SendCallback = Box<dyn FnOnce()>;
type RecvCallback = Box<dyn FnOnce(Packet)>;
type QueueWatcher = Rc<RefCell<dyn FnMut(u8, usize)>>;

struct IfaceState {
    link: LinkId,
    /// Receiving endpoint of this interface's transmissions.
    peer: (u32, u32),
    /// Egress queues indexed by priority. Each entry pairs the packet with
    /// the completion to invoke once serialization ends.
    queues: [VecDeque<(Packet, SendCallback)>; PRIORITY_LEVELS],
    /// Instant at which each paused band may transmit again.
    paused_until: [SimTime; PRIORITY_LEVELS],
    /// Timer that restarts a paused band; rescheduled when a fresh pause
    /// replaces an active one.
    pause_kick: [Option<EventId>; PRIORITY_LEVELS],
    tx_busy: bool,
    /// Total ticks this transmitter has spent serializing, credited at
    /// transmission start.
    busy_ticks: u64,
    rx_buffer: VecDeque<Packet>,
    rx_sinks: VecDeque<RecvCallback>,
    watchers: Vec<QueueWatcher>,
}

struct LinkState {
    config: LinkConfig,
    up: bool,
    a: (u32, u32),
    b: (u32, u32),
}

struct NetInner {
    nodes: u32,
    links: Vec<LinkState>,
    ifaces: BTreeMap<(u32, u32), IfaceState>,
    iface_count: Vec<u32>,
    /// First declared link between each (node, peer) pair wins.
    adjacency: BTreeMap<(u32, u32), u32>,
    packets_dropped: u64,
    created_at: SimTime,
    high_water: BTreeMap<(u32, u32, u8), u64>,
}

/// Handle to the simulated network. Clones share state.
#[derive(Clone)]
pub struct Network {
    sim: Sim,
    inner: Rc<RefCell<NetInner>>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Network")
            .field("nodes", &inner.nodes)
            .field("links", &inner.links.len())
            .finish()
    }
}

/// Serialization time of `size_bytes` at `bandwidth_bps`, rounded up to a
/// whole tick. One tick is one nanosecond.
pub fn serialization_ticks(size_bytes: u64, bandwidth_bps: u64) -> Duration {
    assert!(bandwidth_bps > 0, "zero-bandwidth link");
    let bits = size_bytes as u128 * 8 * 1_000_000_000;
    let bw = bandwidth_bps as u128;
    let ticks = (bits + bw - 1) / bw;
    Duration::from_ticks(u64::try_from(ticks).expect("serialization time overflows the tick clock"))
}

impl Network {
    pub fn new(sim: &Sim, spec: &TopologySpec) -> Result<Network, TopologyError> {
        if spec.nodes == 0 {
            return Err(TopologyError::NoNodes);
        }
        for (i, l) in spec.links.iter().enumerate() {
            for node in [l.a.0, l.b.0] {
                if node >= spec.nodes {
                    return Err(TopologyError::NodeOutOfRange {
                        link: i,
                        node,
                        nodes: spec.nodes,
                    });
                }
            }
            if l.a == l.b {
                return Err(TopologyError::SelfLink { link: i, node: l.a.0 });
            }
            if l.config.latency == Duration::ZERO {
                return Err(TopologyError::ZeroLatency { link: i });
            }
            if l.config.bandwidth_bps == 0 {
                return Err(TopologyError::ZeroBandwidth { link: i });
            }
        }

        let mut inner = NetInner {
            nodes: spec.nodes,
            links: Vec::with_capacity(spec.links.len()),
            ifaces: BTreeMap::new(),
            iface_count: vec![0; spec.nodes as usize],
            adjacency: BTreeMap::new(),
            packets_dropped: 0,
            created_at: sim.now(),
            high_water: BTreeMap::new(),
        };

        for (i, l) in spec.links.iter().enumerate() {
            let ia = inner.iface_count[l.a.0 as usize];
            let ib = inner.iface_count[l.b.0 as usize];
            inner.iface_count[l.a.0 as usize] += 1;
            inner.iface_count[l.b.0 as usize] += 1;
            let ea = (l.a.0, ia);
            let eb = (l.b.0, ib);
            inner.links.push(LinkState {
                config: l.config,
                up: true,
                a: ea,
                b: eb,
            });
            inner.ifaces.insert(ea, IfaceState::new(LinkId(i as u32), eb));
            inner.ifaces.insert(eb, IfaceState::new(LinkId(i as u32), ea));
            inner.adjacency.entry((l.a.0, l.b.0)).or_insert(ia);
            inner.adjacency.entry((l.b.0, l.a.0)).or_insert(ib);
        }

        Ok(Network {
            sim: sim.clone(),
            inner: Rc::new(RefCell::new(inner)),
        })
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn node_count(&self) -> u32 {
        self.inner.borrow().nodes
    }

    pub fn link_count(&self) -> u32 {
        self.inner.borrow().links.len() as u32
    }

    /// Number of interfaces on `node`.
    pub fn iface_count(&self, node: NodeId) -> u32 {
        self.inner.borrow().iface_count[node.0 as usize]
    }

    /// Interface on `node` facing `peer` over the first link declared
    /// between them, if any.
    pub fn iface_to(&self, node: NodeId, peer: NodeId) -> Option<IfaceId> {
        self.inner
            .borrow()
            .adjacency
            .get(&(node.0, peer.0))
            .copied()
            .map(IfaceId)
    }

    /// Neighbors of `node` as (interface, peer) pairs sorted by interface.
    pub fn neighbors(&self, node: NodeId) -> Vec<(IfaceId, NodeId)> {
        let inner = self.inner.borrow();
        let count = inner.iface_count[node.0 as usize];
        (0..count)
            .map(|i| {
                let st = &inner.ifaces[&(node.0, i)];
                (IfaceId(i), NodeId(st.peer.0))
            })
            .collect()
    }

    /// Node on the far end of `iface`.
    pub fn peer_of(&self, node: NodeId, iface: IfaceId) -> NodeId {
        NodeId(self.inner.borrow().ifaces[&(node.0, iface.0)].peer.0)
    }

    /// Link reached through `iface`.
    pub fn link_of(&self, node: NodeId, iface: IfaceId) -> LinkId {
        self.inner.borrow().ifaces[&(node.0, iface.0)].link
    }

    /// First declared link between two nodes, if any.
    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        let inner = self.inner.borrow();
        let iface = *inner.adjacency.get(&(a.0, b.0))?;
        Some(inner.ifaces[&(a.0, iface)].link)
    }

    /// Convenience packet constructor with size derived from the payload
    /// plus a 64-byte header floor.
    pub fn packet(&self, priority: u8, kind: &str, payload: Vec<u8>) -> Packet {
        Packet {
            src: NodeId(0),
            dst: NodeId(0),
            size_bytes: (payload.len() as u64).max(64),
            priority,
            kind: kind.to_string(),
            payload,
        }
    }

    /// Queues `packet` on the interface facing `to` and completes when
    /// serialization ends. Panics when the nodes are not adjacent.
    pub fn send(&self, from: NodeId, to: NodeId, mut packet: Packet) -> OperationHandle<()> {
        let iface = self
            .iface_to(from, to)
            .unwrap_or_else(|| panic!("node {from} has no link to node {to}"));
        packet.src = from;
        packet.dst = to;
        self.send_on(from, iface, packet)
    }

    /// Queues `packet` on an explicit egress interface; the operation
    /// completes when the last bit leaves the transmitter.
    pub fn send_on(&self, node: NodeId, iface: IfaceId, packet: Packet) -> OperationHandle<()> {
        let net = self.clone();
        from_callback(&self.sim, move |done| {
            net.send_with(node, iface, packet, move || done.complete(()));
        })
    }

    /// Callback form of [`send_on`](Network::send_on): `on_sent` fires when
    /// serialization of this packet finishes.
    pub fn send_with<F>(&self, node: NodeId, iface: IfaceId, packet: Packet, on_sent: F)
    where
        F: FnOnce() + 'static,
    {
        assert!(packet.size_bytes >= 1, "packet with zero wire size");
        assert!(
            (packet.priority as usize) < PRIORITY_LEVELS,
            "priority {} out of range",
            packet.priority
        );
        let key = (node.0, iface.0);
        let priority = {
            let mut inner = self.inner.borrow_mut();
            let prio = packet.priority;
            let st = inner
                .ifaces
                .get_mut(&key)
                .unwrap_or_else(|| panic!("node {node} has no interface {iface}"));
            st.queues[prio as usize].push_back((packet, Box::new(on_sent)));
            let depth = st.queues[prio as usize].len();
            let mark = inner.high_water.entry((key.0, key.1, prio)).or_insert(0);
            *mark = (*mark).max(depth as u64);
            prio
        };
        self.notify_watchers(key, priority);
        self.try_start_tx(key);
    }

    /// Waits for the next packet arriving on (`node`, `iface`). Arrivals are
    /// handed out in order; a buffered packet completes the operation on the
    /// spot.
    pub fn recv(&self, node: NodeId, iface: IfaceId) -> OperationHandle<Packet> {
        let net = self.clone();
        from_callback(&self.sim, move |got| {
            net.recv_with(node, iface, move |p| got.complete(p));
        })
    }

    /// Callback form of [`recv`](Network::recv). The sink joins the same
    /// FIFO as pending `recv` operations.
    pub fn recv_with<F>(&self, node: NodeId, iface: IfaceId, sink: F)
    where
        F: FnOnce(Packet) + 'static,
    {
        let key = (node.0, iface.0);
        let buffered = {
            let mut inner = self.inner.borrow_mut();
            let st = inner
                .ifaces
                .get_mut(&key)
                .unwrap_or_else(|| panic!("node {node} has no interface {iface}"));
            st.rx_buffer.pop_front()
        };
        match buffered {
            Some(p) => sink(p),
            None => {
                let mut inner = self.inner.borrow_mut();
                let st = inner.ifaces.get_mut(&key).unwrap();
                st.rx_sinks.push_back(Box::new(sink));
            }
        }
    }

    /// Holds egress of one priority band until `now + hold`. A fresh pause
    /// replaces the current one even when it ends sooner; a zero hold
    /// resumes the band immediately.
    pub fn pause_priority(&self, node: NodeId, iface: IfaceId, priority: u8, hold: Duration) {
        assert!((priority as usize) < PRIORITY_LEVELS);
        let key = (node.0, iface.0);
        let now = self.sim.now();
        let resume_at = now + hold;
        let stale = {
            let mut inner = self.inner.borrow_mut();
            let st = inner
                .ifaces
                .get_mut(&key)
                .unwrap_or_else(|| panic!("node {node} has no interface {iface}"));
            st.paused_until[priority as usize] = resume_at;
            st.pause_kick[priority as usize].take()
        };
        if let Some(ev) = stale {
            self.sim.cancel(ev);
        }
        if hold == Duration::ZERO {
            self.emit_pause_state(node, iface, priority, TraceKind::Resume);
            self.try_start_tx(key);
            return;
        }
        self.emit_pause_state(node, iface, priority, TraceKind::Pause);
        let net = self.clone();
        let ev = self.sim.schedule(hold, move || {
            net.inner.borrow_mut().ifaces.get_mut(&key).unwrap().pause_kick[priority as usize] =
                None;
            net.emit_pause_state(node, iface, priority, TraceKind::Resume);
            net.try_start_tx(key);
        });
        self.inner.borrow_mut().ifaces.get_mut(&key).unwrap().pause_kick[priority as usize] =
            Some(ev);
    }

    /// Instant at which `priority` on (`node`, `iface`) resumes; in the past
    /// or present when the band is live.
    pub fn paused_until(&self, node: NodeId, iface: IfaceId, priority: u8) -> SimTime {
        self.inner.borrow().ifaces[&(node.0, iface.0)].paused_until[priority as usize]
    }

    /// Packets waiting in one egress band (excludes the packet currently
    /// serializing).
    pub fn queue_depth(&self, node: NodeId, iface: IfaceId, priority: u8) -> usize {
        self.inner.borrow().ifaces[&(node.0, iface.0)].queues[priority as usize].len()
    }

    /// Registers a depth watcher on one egress interface. It runs with
    /// (priority, new depth) after every enqueue and every dequeue.
    pub fn watch_queue<F>(&self, node: NodeId, iface: IfaceId, watcher: F)
    where
        F: FnMut(u8, usize) + 'static,
    {
        self.inner
            .borrow_mut()
            .ifaces
            .get_mut(&(node.0, iface.0))
            .unwrap_or_else(|| panic!("node {node} has no interface {iface}"))
            .watchers
            .push(Rc::new(RefCell::new(watcher)));
    }

    /// Maximum depth one egress band has reached since construction.
    pub fn queue_high_water(&self, node: NodeId, iface: IfaceId, priority: u8) -> u64 {
        self.inner
            .borrow()
            .high_water
            .get(&(node.0, iface.0, priority))
            .copied()
            .unwrap_or(0)
    }

    /// Marks a link up or down. Packets in flight toward a downed link are
    /// dropped at delivery time; new transmissions still serialize and drop
    /// on arrival, matching a cut somewhere along the cable.
    pub fn set_link_up(&self, link: LinkId, up: bool) {
        self.inner.borrow_mut().links[link.0 as usize].up = up;
    }

    pub fn link_is_up(&self, link: LinkId) -> bool {
        self.inner.borrow().links[link.0 as usize].up
    }

    /// Packets dropped on downed links so far.
    pub fn packets_dropped(&self) -> u64 {
        self.inner.borrow().packets_dropped
    }

    /// Fraction of wall time one link has spent serializing, taking the
    /// busier direction. Busy time is credited when a transmission starts,
    /// so a snapshot mid-packet counts the full packet.
    pub fn link_utilization(&self, link: LinkId) -> f64 {
        let inner = self.inner.borrow();
        let l = &inner.links[link.0 as usize];
        let elapsed = self.sim.now().ticks().saturating_sub(inner.created_at.ticks());
        if elapsed == 0 {
            return 0.0;
        }
        let busy = inner.ifaces[&l.a]
            .busy_ticks
            .max(inner.ifaces[&l.b].busy_ticks);
        busy as f64 / elapsed as f64
    }

    /// Shortest-hop next-hop interface from every node toward `dst`,
    /// breaking ties toward the lowest-numbered interface. Nodes with no
    /// path (and `dst` itself) are absent.
    pub fn static_routes(&self, dst: NodeId) -> BTreeMap<NodeId, IfaceId> {
        let inner = self.inner.borrow();
        let n = inner.nodes as usize;
        let mut dist = vec![u32::MAX; n];
        let mut out = BTreeMap::new();
        let mut frontier = VecDeque::new();
        dist[dst.0 as usize] = 0;
        frontier.push_back(dst.0);
        while let Some(cur) = frontier.pop_front() {
            let d = dist[cur as usize];
            for i in 0..inner.iface_count[cur as usize] {
                let st = &inner.ifaces[&(cur, i)];
                if !inner.links[st.link.0 as usize].up {
                    continue;
                }
                let (peer, peer_iface) = st.peer;
                if dist[peer as usize] > d + 1 {
                    dist[peer as usize] = d + 1;
                    out.insert(NodeId(peer), IfaceId(peer_iface));
                    frontier.push_back(peer);
                }
            }
        }
        out
    }

    /// Starts the transmitter on (`node`, `iface`) when it is idle and an
    /// unpaused band has traffic.
    fn try_start_tx(&self, key: (u32, u32)) {
        let now = self.sim.now();
        let (packet, on_sent, ser, latency, served) = {
            let mut inner = self.inner.borrow_mut();
            let st = inner.ifaces.get_mut(&key).unwrap();
            if st.tx_busy {
                return;
            }
            let mut picked = None;
            for prio in (0..PRIORITY_LEVELS).rev() {
                if st.paused_until[prio] > now {
                    continue;
                }
                if !st.queues[prio].is_empty() {
                    picked = Some(prio);
                    break;
                }
            }
            let Some(prio) = picked else { return };
            let (packet, on_sent) = st.queues[prio].pop_front().unwrap();
            let link = st.link;
            let bw = inner.links[link.0 as usize].config.bandwidth_bps;
            let latency = inner.links[link.0 as usize].config.latency;
            let ser = serialization_ticks(packet.size_bytes, bw);
            let st = inner.ifaces.get_mut(&key).unwrap();
            st.tx_busy = true;
            st.busy_ticks += ser.ticks();
            (packet, on_sent, ser, latency, prio as u8)
        };
        self.sim.emit(TraceKind::Tx, || {
            vec![
                ("node", key.0.to_string()),
                ("iface", key.1.to_string()),
                ("ptype", packet.kind.clone()),
                ("src", packet.src.to_string()),
                ("dst", packet.dst.to_string()),
                ("prio", packet.priority.to_string()),
                ("bytes", packet.size_bytes.to_string()),
            ]
        });
        self.notify_watchers(key, served);
        let net = self.clone();
        self.sim.schedule(ser, move || {
            net.finish_tx(key, packet, latency, on_sent);
        });
    }

    /// Serialization finished: free the transmitter, launch propagation,
    /// start the next packet, then report completion to the sender.
    fn finish_tx(&self, key: (u32, u32), packet: Packet, latency: Duration, on_sent: SendCallback) {
        let peer = {
            let mut inner = self.inner.borrow_mut();
            let st = inner.ifaces.get_mut(&key).unwrap();
            st.tx_busy = false;
            st.peer
        };
        let net = self.clone();
        self.sim.schedule(latency, move || {
            net.deliver(peer, packet);
        });
        self.try_start_tx(key);
        on_sent();
    }

    /// Arrival at the far interface. A downed link eats the packet here;
    /// otherwise the packet goes to the oldest waiting receiver or into the
    /// buffer.
    fn deliver(&self, key: (u32, u32), packet: Packet) {
        let verdict = {
            let mut inner = self.inner.borrow_mut();
            let st = inner.ifaces.get_mut(&key).unwrap();
            let link = st.link;
            if !inner.links[link.0 as usize].up {
                inner.packets_dropped += 1;
                None
            } else {
                let st = inner.ifaces.get_mut(&key).unwrap();
                Some(st.rx_sinks.pop_front())
            }
        };
        match verdict {
            None => {
                self.sim.emit(TraceKind::Drop, || {
                    vec![
                        ("node", key.0.to_string()),
                        ("iface", key.1.to_string()),
                        ("ptype", packet.kind.clone()),
                        ("src", packet.src.to_string()),
                        ("dst", packet.dst.to_string()),
                    ]
                });
            }
            Some(sink) => {
                self.sim.emit(TraceKind::Rx, || {
                    vec![
                        ("node", key.0.to_string()),
                        ("iface", key.1.to_string()),
                        ("ptype", packet.kind.clone()),
                        ("src", packet.src.to_string()),
                        ("dst", packet.dst.to_string()),
                        ("prio", packet.priority.to_string()),
                        ("bytes", packet.size_bytes.to_string()),
                    ]
                });
                match sink {
                    Some(s) => s(packet),
                    None => {
                        let mut inner = self.inner.borrow_mut();
                        inner.ifaces.get_mut(&key).unwrap().rx_buffer.push_back(packet);
                    }
                }
            }
        }
    }

    /// Reports the changed band's depth to every watcher on the interface.
    /// Watchers are cloned out so they may call back into the network.
    fn notify_watchers(&self, key: (u32, u32), priority: u8) {
        let (watchers, depth) = {
            let inner = self.inner.borrow();
            let st = &inner.ifaces[&key];
            if st.watchers.is_empty() {
                return;
            }
            (st.watchers.clone(), st.queues[priority as usize].len())
        };
        for w in watchers {
            (w.borrow_mut())(priority, depth);
        }
    }

    fn emit_pause_state(&self, node: NodeId, iface: IfaceId, priority: u8, kind: TraceKind) {
        self.sim.emit(kind, || {
            vec![
                ("node", node.to_string()),
                ("iface", iface.to_string()),
                ("prio", priority.to_string()),
            ]
        });
    }
}

impl IfaceState {
    fn new(link: LinkId, peer: (u32, u32)) -> IfaceState {
        IfaceState {
            link,
            peer,
            queues: std::array::from_fn(|_| VecDeque::new()),
            paused_until: [SimTime::ZERO; PRIORITY_LEVELS],
            pause_kick: [None; PRIORITY_LEVELS],
            tx_busy: false,
            busy_ticks: 0,
            rx_buffer: VecDeque::new(),
            rx_sinks: VecDeque::new(),
            watchers: Vec::new(),
        }
    }
}

/// Awaitable receive bound to a known peer: resolves `recv` arguments from
/// the adjacency map.
impl Network {
    pub fn recv_from(&self, node: NodeId, peer: NodeId) -> OperationHandle<Packet> {
        let iface = self
            .iface_to(node, peer)
            .unwrap_or_else(|| panic!("node {node} has no link to node {peer}"));
        self.recv(node, iface)
    }

    /// Sends and waits for the paired arrival in one call. Handy in tests.
    pub fn transfer(
        &self,
        from: NodeId,
        to: NodeId,
        packet: Packet,
    ) -> OperationHandle<Packet> {
        let net = self.clone();
        self.sim.spawn(async move {
            let rx = net.recv_from(to, from);
            net.send(from, to, packet).await?;
            rx.await
        })
    }
}

pub type TransferResult = OpResult<Packet>;

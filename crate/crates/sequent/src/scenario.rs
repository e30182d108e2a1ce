//! Declarative run descriptions, loaded from TOML. A scenario names a
//! protocol, a topology, and the knobs both need; the runner turns it into
//! a finished simulation with metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{LinkConfig, LinkSpec, NodeId, TopologyError, TopologySpec};
use crate::protocols::allreduce::ReduceOp;
use crate::time::Duration;
use crate::trace::{TraceFilter, TraceKind};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("topology is invalid: {0}")]
    Topology(#[from] TopologyError),
    #[error("protocol `{0}` needs its `[{0}]` section")]
    MissingSection(&'static str),
    #[error("`{0}` is not a trace kind")]
    UnknownTraceKind(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Allreduce,
    HpccPfc,
    Rip,
    FetchAndSend,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Allreduce => "allreduce",
            ProtocolKind::HpccPfc => "hpcc-pfc",
            ProtocolKind::Rip => "rip",
            ProtocolKind::FetchAndSend => "fetch-and-send",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    Line,
    Ring,
    Star,
    Custom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkScenario {
    pub a: u32,
    pub b: u32,
    pub latency: u64,
    pub bandwidth_bps: u64,
}

/// Topology description. The shaped kinds take one shared link
/// configuration; `custom` lists every link.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyScenario {
    pub kind: TopologyKind,
    pub nodes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_bps: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkScenario>,
}

impl TopologyScenario {
    pub fn to_spec(&self) -> Result<TopologySpec, ScenarioError> {
        match self.kind {
            TopologyKind::Custom => {
                if self.links.is_empty() {
                    return Err(ScenarioError::Invalid(
                        "custom topology lists no links".to_string(),
                    ));
                }
                Ok(TopologySpec {
                    nodes: self.nodes,
                    links: self
                        .links
                        .iter()
                        .map(|l| LinkSpec {
                            a: NodeId(l.a),
                            b: NodeId(l.b),
                            config: LinkConfig::new(
                                Duration::from_ticks(l.latency),
                                l.bandwidth_bps,
                            ),
                        })
                        .collect(),
                })
            }
            shaped => {
                let (Some(latency), Some(bw)) = (self.latency, self.bandwidth_bps) else {
                    return Err(ScenarioError::Invalid(
                        "shaped topologies need `latency` and `bandwidth_bps`".to_string(),
                    ));
                };
                let config = LinkConfig::new(Duration::from_ticks(latency), bw);
                Ok(match shaped {
                    TopologyKind::Line => TopologySpec::line(self.nodes, config),
                    TopologyKind::Ring => TopologySpec::ring(self.nodes, config),
                    TopologyKind::Star => TopologySpec::star(self.nodes, config),
                    TopologyKind::Custom => unreachable!(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllreduceScenario {
    pub vector_len: usize,
    pub op: ReduceOp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfcScenario {
    pub switch: u32,
    pub sink: u32,
    pub senders: Vec<u32>,
    pub packet_count: u64,
    #[serde(default)]
    pub data_priority: u8,
    pub xoff: usize,
    pub xon: usize,
    pub pause_quanta: u64,
    pub mtu: u64,
    pub initial_window: u64,
    pub high_mark: u64,
    pub low_mark: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RipScenario {
    pub update_period: u64,
    pub route_timeout: u64,
    pub gc_timeout: u64,
    /// Ticks the daemons get to converge before any failure.
    pub converge_ticks: u64,
    /// Link to cut after convergence, as a node pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_link: Option<[u32; 2]>,
    /// Extra ticks after the cut.
    #[serde(default)]
    pub settle_ticks: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FetchScenario {
    pub payload_bytes: u64,
}

fn default_event_budget() -> u64 {
    1_000_000
}

/// One complete run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub protocol: ProtocolKind,
    #[serde(default)]
    pub seed: u64,
    /// Tick at which the run stops even with work left.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_limit: Option<u64>,
    #[serde(default = "default_event_budget")]
    pub event_budget: u64,
    /// Trace kinds to record, by name. Empty means no trace.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<String>,
    pub topology: TopologyScenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allreduce: Option<AllreduceScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pfc: Option<PfcScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rip: Option<RipScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "fetch-and-send")]
    pub fetch_and_send: Option<FetchScenario>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Cross-field checks that the type system cannot express.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.trace_filter()?;
        self.topology.to_spec()?;
        if self.event_budget == 0 {
            return Err(ScenarioError::Invalid(
                "event budget must be positive".to_string(),
            ));
        }
        let nodes = self.topology.nodes;
        let in_range = |n: u32, what: &str| {
            if n >= nodes {
                Err(ScenarioError::Invalid(format!(
                    "{what} {n} is outside the {nodes}-node topology"
                )))
            } else {
                Ok(())
            }
        };
        match self.protocol {
            ProtocolKind::Allreduce => {
                if self.allreduce.is_none() {
                    return Err(ScenarioError::MissingSection("allreduce"));
                }
                if nodes < 1 {
                    return Err(ScenarioError::Invalid("allreduce needs a node".to_string()));
                }
            }
            ProtocolKind::HpccPfc => {
                let Some(pfc) = &self.pfc else {
                    return Err(ScenarioError::MissingSection("pfc"));
                };
                in_range(pfc.switch, "switch")?;
                in_range(pfc.sink, "sink")?;
                if pfc.senders.is_empty() {
                    return Err(ScenarioError::Invalid("no senders".to_string()));
                }
                for s in &pfc.senders {
                    in_range(*s, "sender")?;
                }
                if pfc.xon >= pfc.xoff {
                    return Err(ScenarioError::Invalid(
                        "xon must sit below xoff".to_string(),
                    ));
                }
                if pfc.data_priority > 6 {
                    return Err(ScenarioError::Invalid(
                        "priority 7 carries control frames; data must use 0..=6".to_string(),
                    ));
                }
            }
            ProtocolKind::Rip => {
                let Some(rip) = &self.rip else {
                    return Err(ScenarioError::MissingSection("rip"));
                };
                if rip.route_timeout <= rip.update_period {
                    return Err(ScenarioError::Invalid(
                        "route timeout must exceed the update period".to_string(),
                    ));
                }
                if let Some([a, b]) = rip.fail_link {
                    in_range(a, "fail_link end")?;
                    in_range(b, "fail_link end")?;
                }
            }
            ProtocolKind::FetchAndSend => {
                if self.fetch_and_send.is_none() {
                    return Err(ScenarioError::MissingSection("fetch-and-send"));
                }
                if nodes != 3 {
                    return Err(ScenarioError::Invalid(
                        "fetch-and-send runs on exactly 3 nodes".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Filter matching the `trace` list; `None` when the list is empty.
    pub fn trace_filter(&self) -> Result<Option<TraceFilter>, ScenarioError> {
        if self.trace.is_empty() {
            return Ok(None);
        }
        let mut kinds = Vec::new();
        for name in &self.trace {
            match TraceKind::parse(name) {
                Some(k) => kinds.push(k),
                None => return Err(ScenarioError::UnknownTraceKind(name.clone())),
            }
        }
        Ok(Some(TraceFilter::of(&kinds)))
    }
}

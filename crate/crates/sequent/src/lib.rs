//! Deterministic discrete-event simulation where blocking operations are
//! written as ordinary sequential code.
//!
//! The crate layers three ideas:
//!
//! 1. An event [`Kernel`](kernel::Kernel) with a virtual clock. Events fire
//!    in (time, schedule-order) order, so a run is a pure function of its
//!    inputs.
//! 2. A task runtime ([`Sim`](task::Sim)) that suspends and resumes
//!    sequential task bodies on top of kernel events. Waiting for an
//!    operation costs zero extra events, which keeps sequential code and
//!    hand-written callback code trace-identical.
//! 3. A network model ([`net`]) and protocol case studies
//!    ([`protocols`]) exercising the runtime: ring allreduce, a
//!    priority-flow-control switch fabric, and distance-vector routing.
//!
//! Start with [`task::Sim::new`], spawn tasks, then drive the clock with
//! [`task::Sim::run_until`].
//!
//! ```
//! use sequent::{Duration, Sim, SimTime};
//!
//! let sim = Sim::new();
//! let inner = sim.clone();
//! let op = sim.spawn(async move {
//!     inner.sleep(Duration::from_ticks(30)).await?;
//!     Ok(inner.now().ticks())
//! });
//! sim.run_until(SimTime::from_ticks(100)).unwrap();
//! assert_eq!(op.take_result().unwrap().unwrap(), 30);
//! ```

pub mod combinators;
pub mod demo;
pub mod interop;
pub mod kernel;
pub mod net;
pub mod protocols;
pub mod runner;
pub mod scenario;
pub mod task;
pub mod time;
pub mod trace;

pub use combinators::{all, any, chain, with_timeout, Chain, RaceOutcome, TimeoutOutcome};
pub use interop::{from_callback, to_callback, wrap_immediate, Completer, RipWitness, Ripped};
pub use kernel::{EventId, Kernel, RunOutcome, RunReport, SimError, SimStats};
pub use net::{
    serialization_ticks, IfaceId, LinkConfig, LinkId, LinkSpec, Network, NodeId, Packet,
    TopologyError, TopologySpec,
};
pub use runner::{run_scenario, RunOutput};
pub use scenario::{Scenario, ScenarioError};
pub use task::{OpError, OpResult, OperationHandle, Sim, TaskId, TaskState};
pub use time::{Duration, SimTime};
pub use trace::{TraceFilter, TraceKind, TraceRecord, TraceReport, TraceStream};

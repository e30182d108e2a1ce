//! Protocol case studies built on the task runtime and the packet network:
//! a ring allreduce collective, a priority-flow-control fabric with a
//! telemetry-driven window, and a distance-vector routing daemon.
//!
//! Each protocol is written as plain sequential task bodies: operations that
//! block simulated time are awaited in order, and concurrency appears only
//! where the protocol genuinely overlaps work.

pub mod allreduce;
pub mod pfc;
pub mod rip;

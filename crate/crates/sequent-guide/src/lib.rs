//! The guide's code, kept honest. Each module's documentation is one
//! chapter of the book under `book/src`, included verbatim, so every Rust
//! block the book shows compiles and runs here as a doc-test. A chapter
//! that drifts from the library fails `cargo test` instead of lying in
//! print.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/virtual-time.md")]
pub mod virtual_time {}

#[doc = include_str!("../../../book/src/tasks.md")]
pub mod tasks {}

#[doc = include_str!("../../../book/src/combinators.md")]
pub mod combinators {}

#[doc = include_str!("../../../book/src/interop.md")]
pub mod interop {}

#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}

#[doc = include_str!("../../../book/src/tracing.md")]
pub mod tracing {}

#[doc = include_str!("../../../book/src/case-studies/allreduce.md")]
pub mod allreduce {}

#[doc = include_str!("../../../book/src/case-studies/pfc.md")]
pub mod pfc {}

#[doc = include_str!("../../../book/src/case-studies/rip.md")]
pub mod rip {}

#[doc = include_str!("../../../book/src/scenarios.md")]
pub mod scenarios {}

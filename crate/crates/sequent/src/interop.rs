//! Crossing between callback-style and sequential-style code.
//!
//! Simulations rarely convert all at once. These adapters let the two
//! styles call each other with no change in behavior:
//!
//! * [`from_callback`] turns a callback registration into an operation a
//!   task can await. Completion costs no kernel event; the awaiting task
//!   resumes inside whatever event delivered the callback.
//! * [`to_callback`] turns an operation into a pair of callbacks for code
//!   that has not been converted yet. Delivery is one zero-delay event, so
//!   the callback runs at the same instant but outside the completing
//!   event's stack.
//! * [`wrap_immediate`] lifts a plain synchronous computation into an
//!   operation, costing nothing.
//! * [`Ripped`] holds one logical step split into a prologue, a delay, and
//!   an epilogue, runnable in either style; its two runs produce identical
//!   kernel traces, which is the refactoring safety net: convert a piece,
//!   check the traces still match, move on.
//!
//! ```
//! use sequent::{from_callback, Duration, Sim, SimTime};
//!
//! let sim = Sim::new();
//! // A legacy API that takes (value, callback) and calls it later.
//! let inner = sim.clone();
//! let op = from_callback(&sim, move |done| {
//!     inner.schedule(Duration::from_ticks(15), move || done.complete(99));
//! });
//! sim.run_until(SimTime::from_ticks(15)).unwrap();
//! assert_eq!(op.take_result(), Some(Ok(99)));
//! ```

use crate::task::{FrameCore, OpError, OperationHandle, OpResult, ResultSlot, Sim, TaskId, TaskState};
use crate::time::{Duration, SimTime};
use crate::trace::{diff_lines, TraceDivergence, TraceFilter, TraceKind, TraceStream};
use std::cell::RefCell;
use std::rc::Rc;

/// One-shot delivery side of [`from_callback`]. Clones share the shot:
/// exactly one [`complete`](Completer::complete) or [`fail`]
/// (Completer::fail) may happen across all of them, a second panics.
/// Delivery to an operation that was aborted in the meantime is dropped
/// silently.
pub struct Completer<T> {
    cell: ResultSlot<T>,
    sim: Sim,
    frame: Rc<RefCell<FrameCore>>,
}

impl<T> Clone for Completer<T> {
    fn clone(&self) -> Self {
        Completer {
            cell: self.cell.clone(),
            sim: self.sim.clone(),
            frame: self.frame.clone(),
        }
    }
}

impl<T> Completer<T> {
    pub fn complete(&self, value: T) {
        self.fire(Ok(value));
    }

    pub fn fail(&self, error: OpError) {
        self.fire(Err(error));
    }

    /// Task the delivery resumes.
    pub fn task(&self) -> TaskId {
        self.frame.borrow().id
    }

    fn fire(&self, result: OpResult<T>) {
        // The frame's own state carries the one-shot bookkeeping: a live
        // delivery finishes it, so a second delivery finds it terminal.
        match self.frame.borrow().state {
            TaskState::Aborted => return,
            s if s.is_terminal() => {
                panic!("completion delivered twice for task {}", self.task())
            }
            _ => {}
        }
        let ok = result.is_ok();
        *self.cell.borrow_mut() = Some(result);
        self.sim.complete_promise(&self.frame, ok);
    }
}

/// Adopts a callback-style source as an operation. `register` runs
/// immediately and wires the [`Completer`] into the legacy code; the
/// operation completes whenever the completer fires, at that same instant,
/// with no kernel event added. A completer fired during registration
/// produces an operation that is already terminal when this returns.
pub fn from_callback<T, F>(sim: &Sim, register: F) -> OperationHandle<T>
where
    T: 'static,
    F: FnOnce(Completer<T>),
{
    let op = sim.spawn_promise::<T>();
    let completer = Completer {
        cell: op.slot.clone(),
        sim: sim.clone(),
        frame: op.frame.clone(),
    };
    register(completer);
    op
}

/// Hands an operation's outcome to callback-style code. Exactly one of
/// `on_complete` or `on_error` runs, inside a zero-delay event scheduled
/// when the operation reaches a terminal state; an aborted operation
/// reports [`OpError::Aborted`] through `on_error`.
///
/// Consumes the owning handle; panics on a non-owning one.
pub fn to_callback<T, S, E>(sim: &Sim, op: OperationHandle<T>, on_complete: S, on_error: E)
where
    T: 'static,
    S: FnOnce(T) + 'static,
    E: FnOnce(OpError) + 'static,
{
    assert!(op.is_owning(), "to_callback requires the owning handle");
    let frame = op.frame.clone();
    let sim2 = sim.clone();
    sim.add_waiter(&frame, move || {
        let result = op
            .take_result()
            .expect("terminal frame holds a result");
        sim2.schedule(Duration::ZERO, move || match result {
            Ok(value) => on_complete(value),
            Err(error) => on_error(error),
        });
    });
}

/// Lifts a synchronous computation into an operation. The closure runs
/// during the call; the returned handle is already terminal. Tracewise
/// this is indistinguishable from calling the closure directly, which
/// makes it the drop-in shim for code being converted piecemeal.
pub fn wrap_immediate<T, F>(sim: &Sim, f: F) -> OperationHandle<T>
where
    T: 'static,
    F: FnOnce() -> OpResult<T> + 'static,
{
    sim.spawn(async move { f() })
}

/// One logical step ripped into prologue, delay, epilogue, the shape a
/// blocking call takes after hand-conversion to callbacks. Running it
/// [sequentially](Ripped::run_sequential) or [as callbacks]
/// (Ripped::run_callback) schedules the same events at the same times with
/// the same ids, so the kernel trace is bit-identical either way; only the
/// task-lifecycle records differ, and [`check_equivalence`]
/// (Ripped::check_equivalence) excludes exactly those.
pub struct Ripped<S, T> {
    pre: Rc<dyn Fn() -> OpResult<S>>,
    delay: Duration,
    post: Rc<dyn Fn(S) -> OpResult<T>>,
}

impl<S, T> Clone for Ripped<S, T> {
    fn clone(&self) -> Self {
        Ripped {
            pre: self.pre.clone(),
            delay: self.delay,
            post: self.post.clone(),
        }
    }
}

/// Both runs of a [`Ripped`] step, for asserting equivalence beyond the
/// trace match.
pub struct RipWitness<T> {
    pub sequential: Option<OpResult<T>>,
    pub callback: Option<OpResult<T>>,
    /// Records both traces shared before finishing identically.
    pub trace_lines: u64,
}

impl<S: 'static, T: 'static> Ripped<S, T> {
    pub fn new(
        pre: impl Fn() -> OpResult<S> + 'static,
        delay: Duration,
        post: impl Fn(S) -> OpResult<T> + 'static,
    ) -> Ripped<S, T> {
        Ripped {
            pre: Rc::new(pre),
            delay,
            post: Rc::new(post),
        }
    }

    /// The step as a task: prologue, await a sleep, epilogue.
    pub fn run_sequential(&self, sim: &Sim) -> OperationHandle<T> {
        let pre = self.pre.clone();
        let post = self.post.clone();
        let delay = self.delay;
        let inner = sim.clone();
        sim.spawn(async move {
            let carried = pre()?;
            inner.sleep(delay).await?;
            post(carried)
        })
    }

    /// The step as callbacks: prologue now, epilogue in an event scheduled
    /// `delay` ahead, result delivered through a completer.
    pub fn run_callback(&self, sim: &Sim) -> OperationHandle<T> {
        let pre = self.pre.clone();
        let post = self.post.clone();
        let delay = self.delay;
        let inner = sim.clone();
        from_callback(sim, move |done| match pre() {
            Err(error) => done.fail(error),
            Ok(carried) => {
                inner.schedule(delay, move || match post(carried) {
                    Ok(value) => done.complete(value),
                    Err(error) => done.fail(error),
                });
            }
        })
    }

    /// Runs the step both ways on fresh simulations and compares the full
    /// kernel traces, task-lifecycle records excluded. `Err` carries the
    /// first divergence; `Ok` carries both results for the caller to
    /// compare.
    pub fn check_equivalence(&self, limit: SimTime) -> Result<RipWitness<T>, TraceDivergence> {
        let filter = TraceFilter::all().without(TraceKind::TaskState);
        let run = |style: &dyn Fn(&Sim) -> OperationHandle<T>| {
            let sim = Sim::new();
            sim.set_trace(TraceStream::memory(filter));
            let op = style(&sim);
            sim.run_until(limit).expect("equivalence run stays within limits");
            let report = sim.take_trace().expect("trace installed above");
            (op.take_result(), report)
        };
        let (seq_result, seq_trace) = run(&|sim| self.run_sequential(sim));
        let (cb_result, cb_trace) = run(&|sim| self.run_callback(sim));
        let left = seq_trace.records.expect("memory trace keeps records");
        let right = cb_trace.records.expect("memory trace keeps records");
        let shared = diff_lines(
            left.iter().map(|r| r.line()),
            right.iter().map(|r| r.line()),
        )?;
        Ok(RipWitness {
            sequential: seq_result,
            callback: cb_result,
            trace_lines: shared,
        })
    }
}

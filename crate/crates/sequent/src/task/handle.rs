//! Typed references to task frames.

use super::frame::FrameCore;
use super::state::{TaskId, TaskState};
use super::Sim;
use std::cell::{Cell, RefCell};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::Arc;
use std::task::{Context, Poll};
use thiserror::Error;

/// Why an operation produced no value.
///
/// Errors clone cheaply so every waiter on a shared operation can observe
/// the same failure.
#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum OpError {
    #[error("{0}")]
    Failed(Arc<str>),
    #[error("operation aborted")]
    Aborted,
}

impl OpError {
    pub fn failed(message: impl Into<String>) -> OpError {
        OpError::Failed(message.into().into())
    }
}

pub type OpResult<T> = Result<T, OpError>;

pub(crate) type ResultSlot<T> = Rc<RefCell<Option<OpResult<T>>>>;

/// A reference to a running, suspended, or finished operation.
///
/// [`Sim::spawn`](super::Sim::spawn) returns the frame's one *owning*
/// handle; only it may [`abort`](OperationHandle::abort) the operation or
/// [`take_result`](OperationHandle::take_result). [`retain`]
/// (OperationHandle::retain) mints additional non-owning handles for
/// observers. Every handle keeps the frame's bookkeeping alive; dropping
/// the last one, once the frame is terminal, frees it.
///
/// Dropping the owning handle does not stop the operation: the body keeps
/// running to its own end. Awaiting a handle inside another task suspends
/// that task with zero scheduler cost; the award happens inside whichever
/// event finished the operation.
pub struct OperationHandle<T> {
    pub(crate) frame: Rc<RefCell<FrameCore>>,
    pub(crate) slot: ResultSlot<T>,
    pub(crate) sim: Sim,
    pub(crate) owning: bool,
    /// An await registered a waiter that has not fired yet.
    registered: bool,
    /// Result handed out by `take_result` on an aborted frame, where the
    /// slot stays empty.
    synthesized: Cell<bool>,
}

impl<T> OperationHandle<T> {
    pub(crate) fn new(
        frame: Rc<RefCell<FrameCore>>,
        slot: ResultSlot<T>,
        sim: Sim,
        owning: bool,
    ) -> OperationHandle<T> {
        OperationHandle {
            frame,
            slot,
            sim,
            owning,
            registered: false,
            synthesized: Cell::new(false),
        }
    }

    pub fn id(&self) -> TaskId {
        self.frame.borrow().id
    }

    pub fn state(&self) -> TaskState {
        self.frame.borrow().state
    }

    pub fn is_terminal(&self) -> bool {
        self.state().is_terminal()
    }

    pub fn is_owning(&self) -> bool {
        self.owning
    }

    /// Mints a non-owning handle to the same operation. The frame stays
    /// allocated until every handle is gone.
    pub fn retain(&self) -> OperationHandle<T> {
        self.frame.borrow_mut().retain_count += 1;
        OperationHandle::new(
            self.frame.clone(),
            self.slot.clone(),
            self.sim.clone(),
            false,
        )
    }

    /// Tears the operation down if it has not finished: pending timers are
    /// cancelled, abort hooks run, waiters observe [`OpError::Aborted`],
    /// and the body's locals are dropped without running another step.
    /// Returns whether this call did the teardown; an already-terminal
    /// frame reports `false`.
    ///
    /// Panics when called through a non-owning handle.
    pub fn abort(&self) -> bool {
        assert!(
            self.owning,
            "abort requires the owning handle (task {})",
            self.id()
        );
        self.sim.abort_task(&self.frame)
    }

    /// Removes and returns the result once the frame is terminal; `None`
    /// before that, and `None` again after the result has been taken.
    ///
    /// Panics when called through a non-owning handle.
    pub fn take_result(&self) -> Option<OpResult<T>> {
        assert!(
            self.owning,
            "take_result requires the owning handle (task {})",
            self.id()
        );
        match self.state() {
            TaskState::Completed | TaskState::Failed => self.slot.borrow_mut().take(),
            TaskState::Aborted => {
                if self.synthesized.replace(true) {
                    None
                } else {
                    Some(Err(OpError::Aborted))
                }
            }
            _ => None,
        }
    }
}

impl<T> Drop for OperationHandle<T> {
    fn drop(&mut self) {
        // A drop mid-await leaves a stale waiter in the frame; it no-ops
        // when it fires because the awaiting task is terminal by then, and
        // that task's abort path already cleared its deadlock edges.
        self.sim.release_frame(&self.frame);
    }
}

/// Awaiting a handle parks the calling task until the operation reaches a
/// terminal state, then yields a clone of its result. An aborted operation
/// yields `Err(OpError::Aborted)`.
impl<T: Clone> Future for OperationHandle<T> {
    type Output = OpResult<T>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        let state = this.frame.borrow().state;
        if state.is_terminal() {
            if this.registered {
                this.registered = false;
            }
            let result = match state {
                TaskState::Aborted => Err(OpError::Aborted),
                _ => this
                    .slot
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| panic!("result of task {} already taken", this.id())),
            };
            return Poll::Ready(result);
        }
        if !this.registered {
            let waiter = this.sim.current_task().unwrap_or_else(|| {
                panic!(
                    "operation handles may only be awaited inside a task body (task {})",
                    this.id()
                )
            });
            let target = this.id();
            this.sim.register_await_edge(waiter, target);
            let sim = this.sim.clone();
            this.frame.borrow_mut().push_waiter(Box::new(move || {
                sim.clear_await_edge(waiter, target);
                sim.resume(waiter);
            }));
            this.registered = true;
        }
        Poll::Pending
    }
}

//! The untyped per-task bookkeeping record.

use super::state::{TaskId, TaskState};
use crate::kernel::EventId;

/// What one call into a task body produced.
pub(crate) enum PollStatus {
    Pending,
    /// Body finished; `true` means it returned `Ok`.
    Ready(bool),
}

/// Everything the runtime tracks about one task, independent of its result
/// type. The typed result lives in a slot shared by the poller closure and
/// the operation handle.
pub(crate) struct FrameCore {
    pub id: TaskId,
    pub state: TaskState,
    /// Drives the body one step. Absent while the body is on the stack,
    /// after the frame reaches a terminal state, and for promise frames,
    /// which complete only through an external delivery.
    pub poller: Option<Box<dyn FnMut() -> PollStatus>>,
    /// The body is on the stack right now.
    pub in_poll: bool,
    /// First terminal-state waiter, stored inline: most frames have exactly
    /// one.
    pub waiter: Option<Box<dyn FnOnce()>>,
    /// Waiters registered after the first, in registration order.
    pub waiters: Vec<Box<dyn FnOnce()>>,
    /// Run only on abort, before the waiters.
    pub abort_hooks: Vec<Box<dyn FnOnce()>>,
    /// Kernel events that would resume this task; cancelled at terminal.
    pub pending_events: Vec<EventId>,
    /// Tasks this one is currently awaiting; the deadlock check walks these
    /// edges.
    pub awaits: Vec<TaskId>,
    /// Live references: one per handle plus one runtime hold that lasts
    /// until the frame reaches a terminal state. The frame is freed exactly
    /// when this reaches zero.
    pub retain_count: u32,
    pub freed: bool,
}

impl FrameCore {
    pub fn new(id: TaskId, poller: Option<Box<dyn FnMut() -> PollStatus>>) -> FrameCore {
        FrameCore {
            id,
            state: TaskState::Created,
            poller,
            in_poll: false,
            waiter: None,
            waiters: Vec::new(),
            abort_hooks: Vec::new(),
            pending_events: Vec::new(),
            awaits: Vec::new(),
            // One for the runtime hold, one for the handle spawn returns.
            retain_count: 2,
            freed: false,
        }
    }

    pub fn push_waiter(&mut self, w: Box<dyn FnOnce()>) {
        if self.waiter.is_none() {
            self.waiter = Some(w);
        } else {
            self.waiters.push(w);
        }
    }

    /// Removes every registered waiter, preserving registration order.
    pub fn take_waiters(&mut self) -> (Option<Box<dyn FnOnce()>>, Vec<Box<dyn FnOnce()>>) {
        (self.waiter.take(), std::mem::take(&mut self.waiters))
    }
}

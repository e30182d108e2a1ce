//! Sequential tasks on top of the event kernel.
//!
//! A task is an `async` body whose awaits suspend it until a simulated
//! operation finishes. The runtime polls bodies eagerly and resumes them
//! *inside* whichever kernel event completed the thing they were waiting
//! for, so an await never costs a kernel event of its own. Sequential code
//! and the equivalent hand-written callback code therefore produce the
//! same event sequence, not merely the same results. Two things do cost
//! one event each, both of them points where virtual time or ordering is
//! the whole point: [`Sim::sleep`] and [`Sim::yield_now`].
//!
//! Tasks are single-threaded. A [`Sim`] and everything spawned on it
//! belong to the thread that created them; run independent instances on
//! separate threads for parallel experiments.
//!
//! ```
//! use sequent::{Duration, OpError, Sim, SimTime};
//!
//! let sim = Sim::new();
//! let inner = sim.clone();
//! let op = sim.spawn(async move {
//!     let t0 = inner.now();
//!     inner.sleep(Duration::from_ticks(25)).await?;
//!     Ok(inner.now().since(t0).ticks())
//! });
//! sim.run_until(SimTime::from_ticks(100)).unwrap();
//! assert_eq!(op.take_result(), Some(Ok(25)));
//! ```

mod frame;
mod handle;
mod state;

pub use handle::{OpError, OperationHandle, OpResult};
pub use state::{TaskId, TaskState};

pub(crate) use frame::FrameCore;
pub(crate) use handle::ResultSlot;

use crate::kernel::{ActionOutcome, EventId, Kernel, RunReport, SimError, SimStats};
use crate::time::{Duration, SimTime};
use crate::trace::{TraceKind, TraceReport, TraceStream};
use frame::PollStatus;
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

struct Runtime {
    next_task: u64,
    frames: BTreeMap<u64, Rc<RefCell<FrameCore>>>,
    /// Task whose body is innermost on the stack.
    current: Option<TaskId>,
    observer: Option<Rc<dyn Fn(TaskId, TaskState, TaskState)>>,
}

/// A kernel plus the task runtime that drives suspendable bodies on it.
/// Clones share the instance.
#[derive(Clone)]
pub struct Sim {
    kernel: Kernel,
    rt: Rc<RefCell<Runtime>>,
}

impl Default for Sim {
    fn default() -> Self {
        Self::new()
    }
}

impl Sim {
    pub fn new() -> Sim {
        Sim::with_kernel(Kernel::new())
    }

    /// Builds a runtime over an existing kernel, sharing its clock and
    /// queue with whatever else schedules there.
    pub fn with_kernel(kernel: Kernel) -> Sim {
        Sim {
            kernel,
            rt: Rc::new(RefCell::new(Runtime {
                next_task: 0,
                frames: BTreeMap::new(),
                current: None,
                observer: None,
            })),
        }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn now(&self) -> SimTime {
        self.kernel.now()
    }

    /// Schedules a plain callback, the raw layer tasks are built on.
    pub fn schedule<R, F>(&self, delay: Duration, action: F) -> EventId
    where
        R: ActionOutcome,
        F: FnOnce() -> R + 'static,
    {
        self.kernel.schedule(delay, action)
    }

    pub fn cancel(&self, event: EventId) -> bool {
        self.kernel.cancel(event)
    }

    pub fn run_until(&self, limit: SimTime) -> Result<SimStats, SimError> {
        self.kernel.run_until(limit)
    }

    pub fn run_to_completion(&self, max_events: u64) -> Result<RunReport, SimError> {
        self.kernel.run_to_completion(max_events)
    }

    pub fn run(
        &self,
        limit: Option<SimTime>,
        budget: Option<u64>,
    ) -> Result<RunReport, SimError> {
        self.kernel.run(limit, budget)
    }

    pub fn stats(&self) -> SimStats {
        self.kernel.stats()
    }

    pub fn set_trace(&self, stream: TraceStream) {
        self.kernel.set_trace(stream)
    }

    pub fn take_trace(&self) -> Option<TraceReport> {
        self.kernel.take_trace()
    }

    pub fn emit<F>(&self, kind: TraceKind, attrs: F)
    where
        F: FnOnce() -> Vec<(&'static str, String)>,
    {
        self.kernel.emit(kind, attrs)
    }

    /// Starts a task and polls it once on the spot. The handle that comes
    /// back is the frame's owning reference; drop it to let the task run
    /// unobserved, await it to join, [`abort`](OperationHandle::abort) it
    /// to tear the task down.
    pub fn spawn<T, F>(&self, body: F) -> OperationHandle<T>
    where
        T: 'static,
        F: Future<Output = OpResult<T>> + 'static,
    {
        let id = {
            let mut rt = self.rt.borrow_mut();
            let id = TaskId(rt.next_task);
            rt.next_task += 1;
            id
        };
        let slot: ResultSlot<T> = Rc::new(RefCell::new(None));
        let mut fut = Box::pin(body);
        let poll_slot = slot.clone();
        let poller = Box::new(move || {
            let mut cx = Context::from_waker(Waker::noop());
            match fut.as_mut().poll(&mut cx) {
                Poll::Pending => PollStatus::Pending,
                Poll::Ready(result) => {
                    let ok = result.is_ok();
                    *poll_slot.borrow_mut() = Some(result);
                    PollStatus::Ready(ok)
                }
            }
        });
        let frame = Rc::new(RefCell::new(FrameCore::new(id, Some(poller))));
        self.rt.borrow_mut().frames.insert(id.0, frame.clone());
        self.poll_frame(&frame);
        OperationHandle::new(frame, slot, self.clone(), true)
    }

    /// A task that completes with `Ok(())` after `duration` of virtual
    /// time. Costs exactly one kernel event.
    pub fn sleep(&self, duration: Duration) -> OperationHandle<()> {
        let sim = self.clone();
        let mut wake_at: Option<SimTime> = None;
        self.spawn(std::future::poll_fn(move |_| match wake_at {
            None => {
                let me = sim.current_task().expect("timer polled outside the runtime");
                wake_at = Some(sim.now() + duration);
                sim.schedule_task_resume(me, duration);
                Poll::Pending
            }
            Some(at) if sim.now() >= at => Poll::Ready(Ok(())),
            Some(_) => Poll::Pending,
        }))
    }

    /// A task that completes with `Ok(value)` after `delay`. Like
    /// [`Sim::sleep`] it is a single frame backed by a single kernel
    /// event, so aborting it leaves nothing behind.
    pub fn after<T: 'static>(&self, delay: Duration, value: T) -> OperationHandle<T> {
        let sim = self.clone();
        let mut wake_at: Option<SimTime> = None;
        let mut payload = Some(value);
        self.spawn(std::future::poll_fn(move |_| match wake_at {
            None => {
                let me = sim.current_task().expect("timer polled outside the runtime");
                wake_at = Some(sim.now() + delay);
                sim.schedule_task_resume(me, delay);
                Poll::Pending
            }
            Some(at) if sim.now() >= at => {
                Poll::Ready(Ok(payload.take().expect("delayed value polled past completion")))
            }
            Some(_) => Poll::Pending,
        }))
    }

    /// Suspends the calling task and reschedules it at the same instant,
    /// behind every event already queued there. Costs one kernel event.
    pub fn yield_now(&self) -> impl Future<Output = ()> {
        let sim = self.clone();
        let mut armed = false;
        std::future::poll_fn(move |_| {
            if !armed {
                armed = true;
                let me = sim
                    .current_task()
                    .expect("yield_now must be awaited inside a task body");
                sim.schedule_task_resume(me, Duration::ZERO);
                Poll::Pending
            } else {
                Poll::Ready(())
            }
        })
    }

    /// Task currently on the stack, if any.
    pub fn current_task(&self) -> Option<TaskId> {
        self.rt.borrow().current
    }

    /// Frames not yet freed: every spawned task whose handles or runtime
    /// hold are still live. A drained simulation reports zero.
    pub fn live_frames(&self) -> usize {
        self.rt.borrow().frames.len()
    }

    pub fn tasks_spawned(&self) -> u64 {
        self.rt.borrow().next_task
    }

    pub fn task_state(&self, task: TaskId) -> Option<TaskState> {
        self.rt
            .borrow()
            .frames
            .get(&task.0)
            .map(|f| f.borrow().state)
    }

    /// Installs a callback observing every state transition of every task,
    /// called as `(task, from, to)` after the transition applies.
    pub fn set_transition_observer<F>(&self, observer: F)
    where
        F: Fn(TaskId, TaskState, TaskState) + 'static,
    {
        self.rt.borrow_mut().observer = Some(Rc::new(observer));
    }

    // ------------------------------------------------------------------
    // Runtime internals, shared with handles, combinators, and adapters.

    /// Spawns a task that completes with whatever lands in `cell`. The
    /// producer fills the cell and calls [`Sim::resume`] on the returned
    /// handle's id. A cell filled before the spawn completes on the spot.
    pub(crate) fn spawn_cell<T: 'static>(&self, cell: ResultSlot<T>) -> OperationHandle<T> {
        self.spawn(std::future::poll_fn(move |_| {
            match cell.borrow_mut().take() {
                Some(result) => Poll::Ready(result),
                None => Poll::Pending,
            }
        }))
    }

    /// Spawns a frame with no body at all: it sits suspended until a
    /// producer writes the handle's slot and calls [`Sim::complete_promise`]
    /// on its frame. One frame, one state word, one result slot; the
    /// cheapest operation the runtime can mint, which matters because every
    /// adopted callback goes through one.
    pub(crate) fn spawn_promise<T: 'static>(&self) -> OperationHandle<T> {
        let id = {
            let mut rt = self.rt.borrow_mut();
            let id = TaskId(rt.next_task);
            rt.next_task += 1;
            id
        };
        let slot: ResultSlot<T> = Rc::new(RefCell::new(None));
        let frame = Rc::new(RefCell::new(FrameCore::new(id, None)));
        self.rt.borrow_mut().frames.insert(id.0, frame.clone());
        // The lifecycle trace reads the same as any other frame's: it runs
        // for the instant of its creation, then suspends until delivery.
        self.transition(&frame, TaskState::Running);
        self.transition(&frame, TaskState::Suspended);
        OperationHandle::new(frame, slot, self.clone(), true)
    }

    /// Finishes a promise frame whose result slot was just written. `ok`
    /// selects the terminal state; waiters resume synchronously, inside the
    /// caller's event.
    pub(crate) fn complete_promise(&self, frame: &Rc<RefCell<FrameCore>>, ok: bool) {
        self.transition(frame, TaskState::Running);
        let terminal = if ok {
            TaskState::Completed
        } else {
            TaskState::Failed
        };
        self.finish(frame, terminal);
    }

    /// Polls `task` if it is live and not already on the stack.
    pub(crate) fn resume(&self, task: TaskId) {
        let frame = match self.rt.borrow().frames.get(&task.0) {
            Some(f) => f.clone(),
            None => return,
        };
        self.poll_frame(&frame);
    }

    fn poll_frame(&self, frame: &Rc<RefCell<FrameCore>>) {
        let mut poller = {
            let mut core = frame.borrow_mut();
            if core.state.is_terminal() || core.in_poll {
                return;
            }
            let poller = match core.poller.take() {
                Some(p) => p,
                None => return,
            };
            core.in_poll = true;
            poller
        };
        self.transition(frame, TaskState::Running);
        let id = frame.borrow().id;
        let prev = self.rt.borrow_mut().current.replace(id);
        let status = poller();
        self.rt.borrow_mut().current = prev;
        if frame.borrow().state == TaskState::Aborted {
            // The body aborted itself through its own handle mid-step; the
            // abort path already ran teardown, so the outcome is discarded.
            frame.borrow_mut().in_poll = false;
            drop(poller);
            return;
        }
        match status {
            PollStatus::Pending => {
                {
                    let mut core = frame.borrow_mut();
                    core.poller = Some(poller);
                    core.in_poll = false;
                }
                self.transition(frame, TaskState::Suspended);
            }
            PollStatus::Ready(ok) => {
                frame.borrow_mut().in_poll = false;
                // Body locals drop before anyone observes the completion.
                drop(poller);
                let terminal = if ok {
                    TaskState::Completed
                } else {
                    TaskState::Failed
                };
                self.finish(frame, terminal);
            }
        }
    }

    fn finish(&self, frame: &Rc<RefCell<FrameCore>>, terminal: TaskState) {
        self.transition(frame, terminal);
        let (events, first, rest, hooks);
        {
            let mut core = frame.borrow_mut();
            events = std::mem::take(&mut core.pending_events);
            (first, rest) = core.take_waiters();
            hooks = std::mem::take(&mut core.abort_hooks);
            core.awaits.clear();
        }
        for event in events {
            self.kernel.cancel(event);
        }
        drop(hooks);
        // Waiters run synchronously, in registration order, inside the
        // event that finished this task.
        if let Some(waiter) = first {
            waiter();
        }
        for waiter in rest {
            waiter();
        }
        self.release_frame(frame);
    }

    pub(crate) fn abort_task(&self, frame: &Rc<RefCell<FrameCore>>) -> bool {
        if frame.borrow().state.is_terminal() {
            return false;
        }
        self.transition(frame, TaskState::Aborted);
        let (events, hooks, first, rest, poller);
        {
            let mut core = frame.borrow_mut();
            events = std::mem::take(&mut core.pending_events);
            hooks = std::mem::take(&mut core.abort_hooks);
            (first, rest) = core.take_waiters();
            core.awaits.clear();
            // A body that aborts itself still owns the stack; poll_frame
            // drops the poller when control returns to it.
            poller = if core.in_poll { None } else { core.poller.take() };
        }
        for event in events {
            self.kernel.cancel(event);
        }
        for hook in hooks {
            hook();
        }
        if let Some(waiter) = first {
            waiter();
        }
        for waiter in rest {
            waiter();
        }
        drop(poller);
        self.release_frame(frame);
        true
    }

    fn transition(&self, frame: &Rc<RefCell<FrameCore>>, to: TaskState) {
        let (id, from) = {
            let mut core = frame.borrow_mut();
            let from = core.state;
            if !from.can_transition_to(to) {
                panic!("illegal task state transition {from} -> {to} (task {})", core.id);
            }
            core.state = to;
            (core.id, from)
        };
        self.kernel.emit(TraceKind::TaskState, || {
            vec![
                ("task", id.to_string()),
                ("from", from.name().to_string()),
                ("to", to.name().to_string()),
            ]
        });
        let observer = self.rt.borrow().observer.clone();
        if let Some(observer) = observer {
            observer(id, from, to);
        }
    }

    pub(crate) fn release_frame(&self, frame: &Rc<RefCell<FrameCore>>) {
        let freed_id = {
            let mut core = frame.borrow_mut();
            assert!(!core.freed, "release of a freed frame (task {})", core.id);
            assert!(
                core.retain_count > 0,
                "retain count underflow (task {})",
                core.id
            );
            core.retain_count -= 1;
            if core.retain_count == 0 {
                debug_assert!(
                    core.state.is_terminal(),
                    "freeing a non-terminal frame (task {})",
                    core.id
                );
                core.freed = true;
                Some(core.id)
            } else {
                None
            }
        };
        if let Some(id) = freed_id {
            let removed = self.rt.borrow_mut().frames.remove(&id.0);
            drop(removed);
        }
    }

    /// Schedules a kernel event that resumes `task` after `delay`,
    /// registering it so a terminal transition cancels it first.
    pub(crate) fn schedule_task_resume(&self, task: TaskId, delay: Duration) -> EventId {
        let sim = self.clone();
        let own_id = Rc::new(Cell::new(u64::MAX));
        let own = own_id.clone();
        let event = self.kernel.schedule(delay, move || {
            sim.deregister_pending_event(task, EventId(own.get()));
            sim.resume(task);
        });
        own_id.set(event.0);
        if let Some(frame) = self.rt.borrow().frames.get(&task.0) {
            frame.borrow_mut().pending_events.push(event);
        }
        event
    }

    fn deregister_pending_event(&self, task: TaskId, event: EventId) {
        let frame = self.rt.borrow().frames.get(&task.0).cloned();
        if let Some(frame) = frame {
            let mut core = frame.borrow_mut();
            if let Some(pos) = core.pending_events.iter().position(|&e| e == event) {
                core.pending_events.remove(pos);
            }
        }
    }

    /// Records that `waiter` is parked on `target`, first refusing edges
    /// that would close an await cycle.
    pub(crate) fn register_await_edge(&self, waiter: TaskId, target: TaskId) {
        if self.would_deadlock(waiter, target) {
            panic!("task {waiter} awaiting task {target} closes an await cycle: deadlock");
        }
        if let Some(frame) = self.rt.borrow().frames.get(&waiter.0) {
            frame.borrow_mut().awaits.push(target);
        }
    }

    pub(crate) fn clear_await_edge(&self, waiter: TaskId, target: TaskId) {
        let frame = self.rt.borrow().frames.get(&waiter.0).cloned();
        if let Some(frame) = frame {
            let mut core = frame.borrow_mut();
            if let Some(pos) = core.awaits.iter().position(|&t| t == target) {
                core.awaits.remove(pos);
            }
        }
    }

    fn would_deadlock(&self, waiter: TaskId, target: TaskId) -> bool {
        if waiter == target {
            return true;
        }
        // A target that awaits nothing cannot reach back to the waiter;
        // leaf operations, the overwhelmingly common case, stop here.
        {
            let rt = self.rt.borrow();
            match rt.frames.get(&target.0) {
                None => return false,
                Some(f) if f.borrow().awaits.is_empty() => return false,
                Some(_) => {}
            }
        }
        let mut stack = vec![target];
        let mut seen = BTreeSet::new();
        while let Some(task) = stack.pop() {
            if task == waiter {
                return true;
            }
            if !seen.insert(task) {
                continue;
            }
            let next: Vec<TaskId> = self
                .rt
                .borrow()
                .frames
                .get(&task.0)
                .map(|f| f.borrow().awaits.clone())
                .unwrap_or_default();
            stack.extend(next);
        }
        false
    }

    /// Adds a closure to run if `frame`'s task is aborted, ahead of the
    /// waiters. Composition layers use this to propagate teardown to the
    /// operations they own.
    pub(crate) fn add_abort_hook(
        &self,
        frame: &Rc<RefCell<FrameCore>>,
        hook: impl FnOnce() + 'static,
    ) {
        frame.borrow_mut().abort_hooks.push(Box::new(hook));
    }

    /// Adds a terminal-state waiter to `frame`. Runs synchronously when
    /// the task finishes, fails, or is aborted; runs via
    /// [`Sim::schedule`] immediately if the frame is already terminal.
    pub(crate) fn add_waiter(
        &self,
        frame: &Rc<RefCell<FrameCore>>,
        waiter: impl FnOnce() + 'static,
    ) {
        let terminal = frame.borrow().state.is_terminal();
        if terminal {
            waiter();
        } else {
            frame.borrow_mut().push_waiter(Box::new(waiter));
        }
    }
}

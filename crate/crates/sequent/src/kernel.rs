//! The discrete-event kernel: a virtual clock and an ordered queue of
//! scheduled actions.
//!
//! Execution order is the total order of (fire time, event id), with event
//! ids issued in schedule-call order. Two events at one instant therefore
//! run in the order they were scheduled, and a run that performs the same
//! schedule calls executes the same sequence, every time. Nothing here
//! consults randomness or wall-clock time.
//!
//! # Examples
//!
//! ```
//! use sequent::{Duration, Kernel, SimTime};
//! use std::cell::Cell;
//! use std::rc::Rc;
//!
//! let kernel = Kernel::new();
//! let fired = Rc::new(Cell::new(0u64));
//! let f = fired.clone();
//! let k = kernel.clone();
//! kernel.schedule(Duration::from_ticks(50), move || {
//!     f.set(k.now().ticks());
//! });
//! let stats = kernel.run_until(SimTime::from_ticks(100)).unwrap();
//! assert_eq!(fired.get(), 50);
//! assert_eq!(kernel.now(), SimTime::from_ticks(100));
//! assert_eq!(stats.events_executed, 1);
//! ```

use crate::time::{Duration, SimTime};
use crate::trace::{TraceKind, TraceReport, TraceStream};
use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

/// Identifies one scheduled event. Ids are unique per kernel and issued in
/// strictly increasing schedule order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct EventId(pub u64);

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event action failed at t={at}: {message}")]
    ActionFailed { at: SimTime, message: String },
    #[error("run limit t={limit} is earlier than the current time t={now}")]
    LimitInPast { limit: SimTime, now: SimTime },
    #[error("event budget must be positive")]
    ZeroEventBudget,
    #[error("run loop entered while an event action is still executing")]
    NestedRun,
}

/// Counter snapshot taken when a run call returns. Counters accumulate over
/// the kernel's lifetime, not per call.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct SimStats {
    pub events_scheduled: u64,
    pub events_executed: u64,
    pub events_cancelled: u64,
    pub final_time: SimTime,
}

/// Why a bounded run stopped.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RunOutcome {
    /// No live events remain.
    QueueDrained,
    /// The next live event lies beyond the time limit.
    ReachedLimit,
    /// The event budget was spent with live events still queued.
    BudgetExhausted,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub stats: SimStats,
}

/// Adapts infallible and fallible closures to one schedule signature.
pub trait ActionOutcome {
    fn into_action_result(self) -> Result<(), String>;
}

impl ActionOutcome for () {
    fn into_action_result(self) -> Result<(), String> {
        Ok(())
    }
}

impl ActionOutcome for Result<(), String> {
    fn into_action_result(self) -> Result<(), String> {
        self
    }
}

type Action = Box<dyn FnOnce() -> Result<(), String>>;

struct KernelInner {
    now: SimTime,
    next_id: u64,
    queue: BinaryHeap<Reverse<(SimTime, EventId)>>,
    // Live actions. Cancellation removes the entry and leaves a tombstone in
    // the heap, discarded when it surfaces.
    actions: HashMap<u64, Action>,
    // Instant-quiescence band: closures that run once no live event remains
    // at the current instant, before the clock advances. Not events: they
    // have no id, cannot be cancelled, and are absent from stats and traces.
    deferred: VecDeque<Box<dyn FnOnce()>>,
    stats: SimStats,
    running: bool,
    trace: Option<TraceStream>,
}

/// Handle to one kernel instance. Clones share the instance. A kernel and
/// everything scheduled on it belong to the thread that created it.
#[derive(Clone)]
pub struct Kernel {
    inner: Rc<RefCell<KernelInner>>,
}

impl Default for Kernel {
    fn default() -> Self {
        Self::new()
    }
}

enum Step {
    Exec(Action),
    Defer(Box<dyn FnOnce()>),
    Done(RunOutcome),
}

impl Kernel {
    pub fn new() -> Kernel {
        Kernel {
            inner: Rc::new(RefCell::new(KernelInner {
                now: SimTime::ZERO,
                next_id: 0,
                queue: BinaryHeap::new(),
                actions: HashMap::new(),
                deferred: VecDeque::new(),
                stats: SimStats::default(),
                running: false,
                trace: None,
            })),
        }
    }

    /// Current virtual time. Inside an event action this is the action's
    /// fire time.
    pub fn now(&self) -> SimTime {
        self.inner.borrow().now
    }

    /// Queues `action` to run at `now() + delay` and returns its id. Events
    /// at one instant fire in schedule order after every event already
    /// queued there.
    pub fn schedule<R, F>(&self, delay: Duration, action: F) -> EventId
    where
        R: ActionOutcome,
        F: FnOnce() -> R + 'static,
    {
        let mut inner = self.inner.borrow_mut();
        let id = EventId(inner.next_id);
        inner.next_id += 1;
        let at = inner.now + delay;
        inner.queue.push(Reverse((at, id)));
        inner
            .actions
            .insert(id.0, Box::new(move || action().into_action_result()));
        inner.stats.events_scheduled += 1;
        let now = inner.now;
        if let Some(t) = inner.trace.as_mut() {
            if t.accepts(TraceKind::Schedule) {
                t.push(
                    now,
                    TraceKind::Schedule,
                    vec![("event", id.to_string()), ("at", at.to_string())],
                );
            }
        }
        id
    }

    /// Removes a not-yet-fired event. Returns whether anything was removed;
    /// cancelling twice, or after the event fired, is a no-op that reports
    /// `false`.
    pub fn cancel(&self, id: EventId) -> bool {
        let action = {
            let mut inner = self.inner.borrow_mut();
            let action = inner.actions.remove(&id.0);
            if action.is_some() {
                inner.stats.events_cancelled += 1;
                let now = inner.now;
                if let Some(t) = inner.trace.as_mut() {
                    if t.accepts(TraceKind::Cancel) {
                        t.push(now, TraceKind::Cancel, vec![("event", id.to_string())]);
                    }
                }
            }
            action
        };
        // The closure may tear down whole object graphs when it drops;
        // nothing may hold the kernel borrow while that happens.
        action.is_some()
    }

    /// Number of scheduled events that have neither fired nor been
    /// cancelled.
    pub fn live_events(&self) -> usize {
        self.inner.borrow().actions.len()
    }

    pub fn stats(&self) -> SimStats {
        let inner = self.inner.borrow();
        let mut stats = inner.stats;
        stats.final_time = inner.now;
        stats
    }

    /// Executes every live event with a fire time at or before `limit`, then
    /// sets the clock to `limit` whether or not anything fired there.
    pub fn run_until(&self, limit: SimTime) -> Result<SimStats, SimError> {
        self.run(Some(limit), None).map(|r| r.stats)
    }

    /// Executes live events until the queue drains or `max_events` have
    /// fired in this call, whichever comes first.
    pub fn run_to_completion(&self, max_events: u64) -> Result<RunReport, SimError> {
        if max_events == 0 {
            return Err(SimError::ZeroEventBudget);
        }
        self.run(None, Some(max_events))
    }

    /// General bounded run. `limit` and `budget` each apply when present;
    /// the budget counts events executed by this call alone.
    pub fn run(&self, limit: Option<SimTime>, budget: Option<u64>) -> Result<RunReport, SimError> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.running {
                return Err(SimError::NestedRun);
            }
            if let Some(l) = limit {
                if l < inner.now {
                    return Err(SimError::LimitInPast {
                        limit: l,
                        now: inner.now,
                    });
                }
            }
            inner.running = true;
        }
        let result = self.run_loop(limit, budget);
        self.inner.borrow_mut().running = false;
        let outcome = result?;
        if let Some(l) = limit {
            // The clock lands on the limit itself unless the budget stopped
            // the run mid-way.
            if outcome != RunOutcome::BudgetExhausted {
                self.inner.borrow_mut().now = l;
            }
        }
        Ok(RunReport {
            outcome,
            stats: self.stats(),
        })
    }

    fn run_loop(&self, limit: Option<SimTime>, budget: Option<u64>) -> Result<RunOutcome, SimError> {
        let mut executed_this_run = 0u64;
        loop {
            let step = {
                let mut inner = self.inner.borrow_mut();
                loop {
                    // Discard tombstones of cancelled events.
                    if let Some(&Reverse((_, id))) = inner.queue.peek() {
                        if !inner.actions.contains_key(&id.0) {
                            inner.queue.pop();
                            continue;
                        }
                    }
                    let next = inner.queue.peek().map(|&Reverse(pair)| pair);
                    // The deferred band drains whenever the current instant
                    // has no live event left, including at end of run.
                    let instant_quiet = next.map_or(true, |(t, _)| t > inner.now);
                    if instant_quiet {
                        if let Some(f) = inner.deferred.pop_front() {
                            break Step::Defer(f);
                        }
                    }
                    let (at, id) = match next {
                        None => break Step::Done(RunOutcome::QueueDrained),
                        Some(pair) => pair,
                    };
                    if limit.is_some_and(|l| at > l) {
                        break Step::Done(RunOutcome::ReachedLimit);
                    }
                    if budget.is_some_and(|b| executed_this_run == b) {
                        break Step::Done(RunOutcome::BudgetExhausted);
                    }
                    inner.queue.pop();
                    let action = inner.actions.remove(&id.0).expect("live event has an action");
                    debug_assert!(at >= inner.now, "event queue went backwards in time");
                    inner.now = at;
                    inner.stats.events_executed += 1;
                    if let Some(t) = inner.trace.as_mut() {
                        if t.accepts(TraceKind::Execute) {
                            t.push(at, TraceKind::Execute, vec![("event", id.to_string())]);
                        }
                    }
                    break Step::Exec(action);
                }
            };
            match step {
                Step::Exec(action) => {
                    executed_this_run += 1;
                    action().map_err(|message| SimError::ActionFailed {
                        at: self.now(),
                        message,
                    })?;
                }
                Step::Defer(f) => f(),
                Step::Done(outcome) => return Ok(outcome),
            }
        }
    }

    /// Runs `f` once the current instant holds no more live events, before
    /// the clock moves. Used by composition layers that must not decide
    /// until every same-instant completion has been seen.
    pub(crate) fn defer(&self, f: impl FnOnce() + 'static) {
        self.inner.borrow_mut().deferred.push_back(Box::new(f));
    }

    /// Installs a trace stream; records emitted before this call are lost.
    pub fn set_trace(&self, stream: TraceStream) {
        self.inner.borrow_mut().trace = Some(stream);
    }

    /// Removes and finalizes the trace stream, if one is installed.
    pub fn take_trace(&self) -> Option<TraceReport> {
        self.inner.borrow_mut().trace.take().map(TraceStream::finish)
    }

    /// Emits a domain record. The attribute closure runs only when a stream
    /// is installed and its filter accepts `kind`.
    pub fn emit<F>(&self, kind: TraceKind, attrs: F)
    where
        F: FnOnce() -> Vec<(&'static str, String)>,
    {
        let mut inner = self.inner.borrow_mut();
        let now = inner.now;
        if let Some(t) = inner.trace.as_mut() {
            if t.accepts(kind) {
                t.push(now, kind, attrs());
            }
        }
    }
}

//! Composing operations: race, join, timeout, and staged chains.
//!
//! `any` and `all` take ownership of their inputs and produce a new
//! operation. Resolution happens in the kernel's instant-quiescence band:
//! when an input finishes, the decision is postponed until every event at
//! that instant has run, then made by scanning inputs in index order. Two
//! inputs finishing at the same instant therefore race by position, not by
//! event id, and the outcome is independent of how same-instant events
//! interleaved.
//!
//! ```
//! use sequent::{any, Duration, Sim, SimTime};
//!
//! let sim = Sim::new();
//! let race = any(
//!     &sim,
//!     vec![
//!         sim.after(Duration::from_ticks(30), "slow"),
//!         sim.after(Duration::from_ticks(10), "quick"),
//!     ],
//! );
//! sim.run_until(SimTime::from_ticks(100)).unwrap();
//! let outcome = race.take_result().unwrap().unwrap();
//! assert_eq!((outcome.winner_index, outcome.value), (1, "quick"));
//! ```

use crate::task::{OpError, OperationHandle, OpResult, Sim, TaskState};
use crate::time::Duration;
use std::cell::{Cell, RefCell};
use std::future::{Future, IntoFuture};
use std::pin::Pin;
use std::rc::Rc;

/// Result of [`any`]: which input finished first and what it produced.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RaceOutcome<T> {
    pub winner_index: usize,
    pub value: T,
}

/// Result of [`with_timeout`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TimeoutOutcome<T> {
    Finished(T),
    TimedOut,
}

impl<T> TimeoutOutcome<T> {
    pub fn finished(self) -> Option<T> {
        match self {
            TimeoutOutcome::Finished(v) => Some(v),
            TimeoutOutcome::TimedOut => None,
        }
    }

    pub fn timed_out(&self) -> bool {
        matches!(self, TimeoutOutcome::TimedOut)
    }
}

type Cell2<T> = Rc<RefCell<Option<OpResult<T>>>>;

fn take_failure<T>(input: &OperationHandle<T>) -> OpError {
    match input.take_result() {
        Some(Err(e)) => e,
        _ => panic!("failed frame holds Err"),
    }
}

struct RaceState<T> {
    sim: Sim,
    inputs: RefCell<Vec<Option<OperationHandle<T>>>>,
    cell: Cell2<RaceOutcome<T>>,
    output: Cell<Option<crate::task::TaskId>>,
    resolved: Cell<bool>,
    scheduled: Cell<bool>,
}

fn race_resolvable<T>(state: &RaceState<T>) -> bool {
    let inputs = state.inputs.borrow();
    let mut all_terminal = true;
    for slot in inputs.iter() {
        let h = slot.as_ref().expect("inputs present until resolve");
        match h.state() {
            TaskState::Completed => return true,
            s if s.is_terminal() => {}
            _ => all_terminal = false,
        }
    }
    all_terminal
}

fn resolve_race<T>(state: &RaceState<T>) {
    state.resolved.set(true);
    let inputs: Vec<OperationHandle<T>> = state
        .inputs
        .borrow_mut()
        .drain(..)
        .map(|slot| slot.expect("inputs present until resolve"))
        .collect();
    let mut winner: Option<(usize, T)> = None;
    for (index, input) in inputs.iter().enumerate() {
        if input.state() == TaskState::Completed {
            let value = input
                .take_result()
                .expect("terminal frame holds a result")
                .expect("completed frame holds Ok");
            winner = Some((index, value));
            break;
        }
    }
    let result = match winner {
        Some((winner_index, value)) => {
            for (index, input) in inputs.iter().enumerate() {
                if index != winner_index {
                    input.abort();
                }
            }
            Ok(RaceOutcome {
                winner_index,
                value,
            })
        }
        None => Err(OpError::failed(format!(
            "all {} race inputs failed or were aborted",
            inputs.len()
        ))),
    };
    drop(inputs);
    *state.cell.borrow_mut() = Some(result);
}

fn check_race<T: 'static>(state: &Rc<RaceState<T>>) {
    if state.resolved.get() || state.scheduled.get() || !race_resolvable(state) {
        return;
    }
    state.scheduled.set(true);
    let st = state.clone();
    state.sim.kernel().defer(move || {
        if st.resolved.get() {
            return;
        }
        resolve_race(&st);
        st.sim.resume(st.output.get().expect("output spawned before checks"));
    });
}

/// Races `inputs`: the output completes with the value of whichever input
/// completes first, identified by its position. Inputs that finish at the
/// same instant tie-break by index. Losers are aborted, pending timers and
/// all. If every input fails or is aborted the race fails. An input that
/// is already complete wins on the spot and the output never suspends.
///
/// Takes the owning handles; panics on an empty input set or on a
/// non-owning handle.
pub fn any<T: 'static>(sim: &Sim, inputs: Vec<OperationHandle<T>>) -> OperationHandle<RaceOutcome<T>> {
    assert!(!inputs.is_empty(), "any() requires at least one input operation");
    for input in &inputs {
        assert!(input.is_owning(), "any() inputs must be owning handles");
    }
    let state = Rc::new(RaceState {
        sim: sim.clone(),
        inputs: RefCell::new(inputs.into_iter().map(Some).collect()),
        cell: Rc::new(RefCell::new(None)),
        output: Cell::new(None),
        resolved: Cell::new(false),
        scheduled: Cell::new(false),
    });
    if race_resolvable(&state) {
        resolve_race(&state);
        return sim.spawn_cell(state.cell.clone());
    }
    let parts: Vec<_> = state
        .inputs
        .borrow()
        .iter()
        .map(|slot| {
            let h = slot.as_ref().expect("inputs present until resolve");
            (h.id(), h.frame.clone())
        })
        .collect();
    let output = sim.spawn_cell(state.cell.clone());
    state.output.set(Some(output.id()));
    for (input_id, frame) in parts {
        sim.register_await_edge(output.id(), input_id);
        let st = state.clone();
        sim.add_waiter(&frame, move || check_race(&st));
    }
    let st = state.clone();
    sim.add_abort_hook(&output.frame, move || {
        if st.resolved.replace(true) {
            return;
        }
        let inputs: Vec<OperationHandle<T>> = st
            .inputs
            .borrow_mut()
            .drain(..)
            .map(|slot| slot.expect("inputs present until resolve"))
            .collect();
        for input in &inputs {
            input.abort();
        }
    });
    output
}

struct JoinState<T> {
    sim: Sim,
    inputs: RefCell<Vec<Option<OperationHandle<T>>>>,
    cell: Cell2<Vec<T>>,
    output: Cell<Option<crate::task::TaskId>>,
    resolved: Cell<bool>,
    scheduled: Cell<bool>,
}

fn join_resolvable<T>(state: &JoinState<T>) -> bool {
    let inputs = state.inputs.borrow();
    let mut all_done = true;
    for slot in inputs.iter() {
        let h = slot.as_ref().expect("inputs present until resolve");
        match h.state() {
            TaskState::Failed | TaskState::Aborted => return true,
            TaskState::Completed => {}
            _ => all_done = false,
        }
    }
    all_done
}

fn resolve_join<T>(state: &JoinState<T>) {
    state.resolved.set(true);
    let inputs: Vec<OperationHandle<T>> = state
        .inputs
        .borrow_mut()
        .drain(..)
        .map(|slot| slot.expect("inputs present until resolve"))
        .collect();
    let culprit = inputs
        .iter()
        .enumerate()
        .find(|(_, h)| matches!(h.state(), TaskState::Failed | TaskState::Aborted));
    let result = match culprit {
        Some((index, input)) => {
            let error = match input.state() {
                TaskState::Failed => {
                    let e = take_failure(input);
                    OpError::failed(format!("join input {index} failed: {e}"))
                }
                _ => OpError::failed(format!("join input {index} aborted")),
            };
            for (j, other) in inputs.iter().enumerate() {
                if j != index {
                    other.abort();
                }
            }
            Err(error)
        }
        None => Ok(inputs
            .iter()
            .map(|input| {
                input
                    .take_result()
                    .expect("terminal frame holds a result")
                    .expect("completed frame holds Ok")
            })
            .collect()),
    };
    drop(inputs);
    *state.cell.borrow_mut() = Some(result);
}

fn check_join<T: 'static>(state: &Rc<JoinState<T>>) {
    if state.resolved.get() || state.scheduled.get() || !join_resolvable(state) {
        return;
    }
    state.scheduled.set(true);
    let st = state.clone();
    state.sim.kernel().defer(move || {
        if st.resolved.get() {
            return;
        }
        resolve_join(&st);
        st.sim.resume(st.output.get().expect("output spawned before checks"));
    });
}

/// Joins `inputs`: the output completes when every input has completed,
/// yielding their values in input order, at the instant the last one
/// finishes. The first input to fail or be aborted fails the join and the
/// rest are aborted immediately. An empty join completes at once with an
/// empty vector.
///
/// Takes the owning handles; panics on a non-owning handle.
pub fn all<T: 'static>(sim: &Sim, inputs: Vec<OperationHandle<T>>) -> OperationHandle<Vec<T>> {
    for input in &inputs {
        assert!(input.is_owning(), "all() inputs must be owning handles");
    }
    let state = Rc::new(JoinState {
        sim: sim.clone(),
        inputs: RefCell::new(inputs.into_iter().map(Some).collect()),
        cell: Rc::new(RefCell::new(None)),
        output: Cell::new(None),
        resolved: Cell::new(false),
        scheduled: Cell::new(false),
    });
    if join_resolvable(&state) {
        resolve_join(&state);
        return sim.spawn_cell(state.cell.clone());
    }
    let parts: Vec<_> = state
        .inputs
        .borrow()
        .iter()
        .map(|slot| {
            let h = slot.as_ref().expect("inputs present until resolve");
            (h.id(), h.frame.clone())
        })
        .collect();
    let output = sim.spawn_cell(state.cell.clone());
    state.output.set(Some(output.id()));
    for (input_id, frame) in parts {
        sim.register_await_edge(output.id(), input_id);
        let st = state.clone();
        sim.add_waiter(&frame, move || check_join(&st));
    }
    let st = state.clone();
    sim.add_abort_hook(&output.frame, move || {
        if st.resolved.replace(true) {
            return;
        }
        let inputs: Vec<OperationHandle<T>> = st
            .inputs
            .borrow_mut()
            .drain(..)
            .map(|slot| slot.expect("inputs present until resolve"))
            .collect();
        for input in &inputs {
            input.abort();
        }
    });
    output
}

struct TimeoutState<T> {
    sim: Sim,
    op: RefCell<Option<OperationHandle<T>>>,
    timer: RefCell<Option<OperationHandle<()>>>,
    cell: Cell2<TimeoutOutcome<T>>,
    output: Cell<Option<crate::task::TaskId>>,
    resolved: Cell<bool>,
    scheduled: Cell<bool>,
}

fn resolve_timeout<T>(state: &TimeoutState<T>) {
    state.resolved.set(true);
    let op = state.op.borrow_mut().take().expect("op present until resolve");
    let timer = state
        .timer
        .borrow_mut()
        .take()
        .expect("timer present until resolve");
    // The operation is examined first, so finishing at the deadline
    // instant counts as finished.
    let result = match op.state() {
        TaskState::Completed => {
            timer.abort();
            Ok(TimeoutOutcome::Finished(
                op.take_result()
                    .expect("terminal frame holds a result")
                    .expect("completed frame holds Ok"),
            ))
        }
        TaskState::Failed => {
            timer.abort();
            Err(take_failure(&op))
        }
        TaskState::Aborted => {
            timer.abort();
            Err(OpError::Aborted)
        }
        _ => {
            op.abort();
            Ok(TimeoutOutcome::TimedOut)
        }
    };
    drop(op);
    drop(timer);
    *state.cell.borrow_mut() = Some(result);
}

fn check_timeout<T: 'static>(state: &Rc<TimeoutState<T>>) {
    if state.resolved.get() || state.scheduled.get() {
        return;
    }
    let decidable = {
        let op = state.op.borrow();
        let timer = state.timer.borrow();
        op.as_ref().is_some_and(|h| h.is_terminal())
            || timer.as_ref().is_some_and(|h| h.is_terminal())
    };
    if !decidable {
        return;
    }
    state.scheduled.set(true);
    let st = state.clone();
    state.sim.kernel().defer(move || {
        if st.resolved.get() {
            return;
        }
        resolve_timeout(&st);
        st.sim.resume(st.output.get().expect("output spawned before checks"));
    });
}

/// Bounds `op` by a deadline `delay` from now. Completes with
/// [`TimeoutOutcome::Finished`] if the operation completes first (a tie at
/// the deadline instant counts as finished), or aborts the operation and
/// completes with [`TimeoutOutcome::TimedOut`] when the deadline passes.
/// The internal timer is aborted when the operation wins, leaving no
/// pending event behind. An operation that fails before the deadline fails
/// the output with the same error.
///
/// Takes the owning handle; panics on a non-owning handle.
pub fn with_timeout<T: 'static>(
    sim: &Sim,
    op: OperationHandle<T>,
    delay: Duration,
) -> OperationHandle<TimeoutOutcome<T>> {
    assert!(op.is_owning(), "with_timeout() requires the owning handle");
    if op.is_terminal() {
        let result = match op.state() {
            TaskState::Completed => Ok(TimeoutOutcome::Finished(
                op.take_result()
                    .expect("terminal frame holds a result")
                    .expect("completed frame holds Ok"),
            )),
            TaskState::Failed => Err(take_failure(&op)),
            _ => Err(OpError::Aborted),
        };
        let cell: Cell2<TimeoutOutcome<T>> = Rc::new(RefCell::new(Some(result)));
        return sim.spawn_cell(cell);
    }
    let timer = sim.sleep(delay);
    let state = Rc::new(TimeoutState {
        sim: sim.clone(),
        op: RefCell::new(Some(op)),
        timer: RefCell::new(Some(timer)),
        cell: Rc::new(RefCell::new(None)),
        output: Cell::new(None),
        resolved: Cell::new(false),
        scheduled: Cell::new(false),
    });
    let op_part = {
        let op = state.op.borrow();
        let h = op.as_ref().expect("op present until resolve");
        (h.id(), h.frame.clone())
    };
    let timer_part = {
        let timer = state.timer.borrow();
        let h = timer.as_ref().expect("timer present until resolve");
        (h.id(), h.frame.clone())
    };
    let output = sim.spawn_cell(state.cell.clone());
    state.output.set(Some(output.id()));
    for (id, frame) in [op_part, timer_part] {
        sim.register_await_edge(output.id(), id);
        let st = state.clone();
        sim.add_waiter(&frame, move || check_timeout(&st));
    }
    let st = state.clone();
    sim.add_abort_hook(&output.frame, move || {
        if st.resolved.replace(true) {
            return;
        }
        if let Some(op) = st.op.borrow_mut().take() {
            op.abort();
        }
        if let Some(timer) = st.timer.borrow_mut().take() {
            timer.abort();
        }
    });
    output
}

type StageFuture<T> = Pin<Box<dyn Future<Output = OpResult<T>>>>;

/// A staged computation built before it runs. Nothing executes until the
/// chain is started by [`spawn_on`](Chain::spawn_on) or awaited; stages
/// then run strictly in composition order, and an `Err` skips everything
/// after it. Composition is associative: regrouping `then` calls changes
/// neither results nor observable order.
///
/// ```
/// use sequent::{Chain, Sim};
///
/// let sim = Sim::new();
/// let op = Chain::value(2)
///     .then(|n| Ok(n * 10))
///     .then(|n| Ok(n + 1))
///     .spawn_on(&sim);
/// assert_eq!(op.take_result(), Some(Ok(21)));
/// ```
pub struct Chain<T> {
    build: Box<dyn FnOnce() -> StageFuture<T>>,
}

impl<T: 'static> Chain<T> {
    /// A chain that starts from a ready value.
    pub fn value(value: T) -> Chain<T> {
        Chain {
            build: Box::new(move || Box::pin(async move { Ok(value) })),
        }
    }

    /// A chain whose first stage is a computation run at start time.
    pub fn from_fn(f: impl FnOnce() -> OpResult<T> + 'static) -> Chain<T> {
        Chain {
            build: Box::new(move || Box::pin(async move { f() })),
        }
    }

    /// A chain that starts by waiting for an existing operation.
    pub fn from_op(op: OperationHandle<T>) -> Chain<T>
    where
        T: Clone,
    {
        Chain {
            build: Box::new(move || Box::pin(op)),
        }
    }

    /// Appends a stage consuming the previous stage's value.
    pub fn then<U: 'static>(self, f: impl FnOnce(T) -> OpResult<U> + 'static) -> Chain<U> {
        Chain {
            build: Box::new(move || {
                let first = (self.build)();
                Box::pin(async move {
                    let value = first.await?;
                    f(value)
                })
            }),
        }
    }

    /// Starts the chain as a task on `sim`.
    pub fn spawn_on(self, sim: &Sim) -> OperationHandle<T> {
        sim.spawn((self.build)())
    }
}

/// Free-function spelling of [`Chain::then`].
pub fn chain<T: 'static, U: 'static>(
    first: Chain<T>,
    next: impl FnOnce(T) -> OpResult<U> + 'static,
) -> Chain<U> {
    first.then(next)
}

impl<T: 'static> IntoFuture for Chain<T> {
    type Output = OpResult<T>;
    type IntoFuture = StageFuture<T>;

    fn into_future(self) -> Self::IntoFuture {
        (self.build)()
    }
}

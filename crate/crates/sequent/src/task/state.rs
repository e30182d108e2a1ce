//! Task identity and the lifecycle state machine.

use std::fmt;

/// Identifies one task frame. Ids are unique per [`Sim`](super::Sim) and
/// issued in spawn order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Lifecycle of a task frame.
///
/// ```text
/// Created -> Running -> Suspended -> Running -> ... -> Completed
///                 \----------------------------------> Failed
///                  \---------------------------------> Aborted
/// Suspended -------------------------------------------^
/// ```
///
/// The three right-hand states are terminal: nothing leaves them, a frame
/// reaches exactly one of them, and it reaches it exactly once.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TaskState {
    /// Frame allocated, body not yet entered.
    Created,
    /// Body is on the stack right now.
    Running,
    /// Body is parked waiting for an operation or timer.
    Suspended,
    /// Body returned a value.
    Completed,
    /// Body returned an error.
    Failed,
    /// Torn down from outside before the body could finish.
    Aborted,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TaskState::Completed | TaskState::Failed | TaskState::Aborted
        )
    }

    /// Whether the state machine permits moving from `self` to `to`.
    pub fn can_transition_to(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Created, Running)
                | (Running, Suspended)
                | (Running, Completed)
                | (Running, Failed)
                | (Running, Aborted)
                | (Suspended, Running)
                | (Suspended, Aborted)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskState::Created => "created",
            TaskState::Running => "running",
            TaskState::Suspended => "suspended",
            TaskState::Completed => "completed",
            TaskState::Failed => "failed",
            TaskState::Aborted => "aborted",
        }
    }

    pub const ALL: [TaskState; 6] = [
        TaskState::Created,
        TaskState::Running,
        TaskState::Suspended,
        TaskState::Completed,
        TaskState::Failed,
        TaskState::Aborted,
    ];
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

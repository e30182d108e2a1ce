//! Virtual-clock instants and spans.
//!
//! Simulated time is a non-negative integer count of ticks. The convention
//! throughout this crate and its scenario files is one tick per nanosecond,
//! which keeps link serialization arithmetic exact at any bandwidth that
//! divides into whole bits per nanosecond. Nothing observes wall-clock time;
//! two runs that execute the same events read the same clock.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

/// An instant on the virtual clock, measured in ticks from simulation start.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

/// A span of virtual time. Spans are unsigned: a negative delay is not
/// representable, so the kernel never has to reject one at runtime.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_ticks(ticks: u64) -> Self {
        SimTime(ticks)
    }

    pub const fn ticks(self) -> u64 {
        self.0
    }

    /// Span from an earlier instant to this one. Panics if `earlier` is in
    /// fact later; callers subtract along the arrow of time.
    pub fn since(self, earlier: SimTime) -> Duration {
        Duration(
            self.0
                .checked_sub(earlier.0)
                .expect("SimTime::since called with a later instant"),
        )
    }
}

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub const fn from_ticks(ticks: u64) -> Self {
        Duration(ticks)
    }

    /// One tick is one nanosecond by convention.
    pub const fn from_nanos(ns: u64) -> Self {
        Duration(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        Duration(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Duration(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        Duration(s * 1_000_000_000)
    }

    pub const fn ticks(self) -> u64 {
        self.0
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add<Duration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: Duration) -> SimTime {
        SimTime(
            self.0
                .checked_add(rhs.0)
                .expect("virtual clock overflow: instant + span exceeds u64 ticks"),
        )
    }
}

impl AddAssign<Duration> for SimTime {
    fn add_assign(&mut self, rhs: Duration) {
        *self = *self + rhs;
    }
}

impl Sub<SimTime> for SimTime {
    type Output = Duration;
    fn sub(self, rhs: SimTime) -> Duration {
        self.since(rhs)
    }
}

impl Add<Duration> for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(
            self.0
                .checked_add(rhs.0)
                .expect("virtual span overflow"),
        )
    }
}

impl Sub<Duration> for Duration {
    type Output = Duration;
    fn sub(self, rhs: Duration) -> Duration {
        Duration(
            self.0
                .checked_sub(rhs.0)
                .expect("virtual span underflow"),
        )
    }
}

impl Mul<u64> for Duration {
    type Output = Duration;
    fn mul(self, rhs: u64) -> Duration {
        Duration(self.0.checked_mul(rhs).expect("virtual span overflow"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}t", self.0)
    }
}

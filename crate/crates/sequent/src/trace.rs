//! Structured run traces.
//!
//! A trace is a line-delimited stream of records, one per observable
//! occurrence, ordered by (time, seq). Records render as space-separated
//! `key=value` tokens with a fixed key order per kind, so two runs of the
//! same scenario produce byte-identical streams and a plain line comparison
//! is a complete equality check.

use crate::time::SimTime;
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::Write;

/// Record categories. Scheduling, execution, and cancellation describe kernel
/// bookkeeping; the rest describe domain activity emitted by higher layers.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum TraceKind {
    Schedule,
    Execute,
    Cancel,
    Tx,
    Rx,
    Pause,
    Resume,
    RouteUpdate,
    TaskState,
    Drop,
}

impl TraceKind {
    pub const ALL: [TraceKind; 10] = [
        TraceKind::Schedule,
        TraceKind::Execute,
        TraceKind::Cancel,
        TraceKind::Tx,
        TraceKind::Rx,
        TraceKind::Pause,
        TraceKind::Resume,
        TraceKind::RouteUpdate,
        TraceKind::TaskState,
        TraceKind::Drop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TraceKind::Schedule => "schedule",
            TraceKind::Execute => "execute",
            TraceKind::Cancel => "cancel",
            TraceKind::Tx => "tx",
            TraceKind::Rx => "rx",
            TraceKind::Pause => "pause",
            TraceKind::Resume => "resume",
            TraceKind::RouteUpdate => "route-update",
            TraceKind::TaskState => "task-state",
            TraceKind::Drop => "drop",
        }
    }

    pub fn parse(name: &str) -> Option<TraceKind> {
        TraceKind::ALL.into_iter().find(|k| k.name() == name)
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which record kinds a stream keeps. Everything else is dropped at the
/// emission site without being rendered.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TraceFilter(u16);

impl TraceFilter {
    pub fn all() -> TraceFilter {
        TraceFilter(TraceKind::ALL.iter().fold(0, |m, k| m | k.bit()))
    }

    pub fn none() -> TraceFilter {
        TraceFilter(0)
    }

    pub fn of(kinds: &[TraceKind]) -> TraceFilter {
        TraceFilter(kinds.iter().fold(0, |m, k| m | k.bit()))
    }

    pub fn without(self, kind: TraceKind) -> TraceFilter {
        TraceFilter(self.0 & !kind.bit())
    }

    pub fn with(self, kind: TraceKind) -> TraceFilter {
        TraceFilter(self.0 | kind.bit())
    }

    pub fn accepts(self, kind: TraceKind) -> bool {
        self.0 & kind.bit() != 0
    }
}

/// One trace record. `seq` is a per-stream counter, so the (time, seq) pair
/// strictly increases over the stream even when one kernel event emits
/// several records.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TraceRecord {
    pub time: SimTime,
    pub seq: u64,
    pub kind: TraceKind,
    pub attrs: Vec<(&'static str, String)>,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        let mut s = format!("t={} seq={} kind={}", self.time, self.seq, self.kind);
        for (k, v) in &self.attrs {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(v);
        }
        s
    }
}

enum Sink {
    Memory(Vec<TraceRecord>),
    Writer(Box<dyn Write>),
}

/// A live trace destination. Every accepted record is hashed as it arrives,
/// so a digest is available no matter where the lines themselves went.
pub struct TraceStream {
    filter: TraceFilter,
    next_seq: u64,
    hasher: Sha256,
    sink: Sink,
    lines: u64,
}

impl TraceStream {
    /// Keeps records in memory; use for tests and equivalence checks.
    pub fn memory(filter: TraceFilter) -> TraceStream {
        TraceStream {
            filter,
            next_seq: 0,
            hasher: Sha256::new(),
            sink: Sink::Memory(Vec::new()),
            lines: 0,
        }
    }

    /// Streams rendered lines to a writer; use for trace files.
    pub fn writer(filter: TraceFilter, out: Box<dyn Write>) -> TraceStream {
        TraceStream {
            filter,
            next_seq: 0,
            hasher: Sha256::new(),
            sink: Sink::Writer(out),
            lines: 0,
        }
    }

    pub fn filter(&self) -> TraceFilter {
        self.filter
    }

    pub(crate) fn accepts(&self, kind: TraceKind) -> bool {
        self.filter.accepts(kind)
    }

    pub(crate) fn push(&mut self, time: SimTime, kind: TraceKind, attrs: Vec<(&'static str, String)>) {
        let rec = TraceRecord {
            time,
            seq: self.next_seq,
            kind,
            attrs,
        };
        self.next_seq += 1;
        self.lines += 1;
        let line = rec.line();
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        match &mut self.sink {
            Sink::Memory(v) => v.push(rec),
            Sink::Writer(w) => {
                let _ = writeln!(w, "{line}");
            }
        }
    }

    /// Consumes the stream and returns what it captured. The digest covers
    /// the rendered lines, newline-terminated, in order.
    pub fn finish(self) -> TraceReport {
        let digest = hex(&self.hasher.finalize());
        let records = match self.sink {
            Sink::Memory(v) => Some(v),
            Sink::Writer(mut w) => {
                let _ = w.flush();
                None
            }
        };
        TraceReport {
            records,
            digest,
            lines: self.lines,
        }
    }
}

/// Captured output of a finished stream. `records` is present only for
/// memory streams.
#[derive(Debug, Clone)]
pub struct TraceReport {
    pub records: Option<Vec<TraceRecord>>,
    pub digest: String,
    pub lines: u64,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// First point where two line streams disagree.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TraceDivergence {
    /// Zero-based record index of the first mismatch.
    pub index: u64,
    /// Line present on the left at that index, if any.
    pub left: Option<String>,
    /// Line present on the right at that index, if any.
    pub right: Option<String>,
}

impl fmt::Display for TraceDivergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "traces diverge at record {}", self.index)?;
        match &self.left {
            Some(l) => writeln!(f, "  left:  {l}")?,
            None => writeln!(f, "  left:  <end of stream>")?,
        }
        match &self.right {
            Some(r) => write!(f, "  right: {r}"),
            None => write!(f, "  right: <end of stream>"),
        }
    }
}

/// Compares two line streams record by record. `Ok(n)` is the shared record
/// count; a mismatch or length difference reports the first divergent index
/// with both sides.
pub fn diff_lines<A, B>(a: A, b: B) -> Result<u64, TraceDivergence>
where
    A: IntoIterator<Item = String>,
    B: IntoIterator<Item = String>,
{
    let mut a = a.into_iter();
    let mut b = b.into_iter();
    let mut index = 0u64;
    loop {
        match (a.next(), b.next()) {
            (None, None) => return Ok(index),
            (left, right) => {
                if left == right {
                    index += 1;
                } else {
                    return Err(TraceDivergence { index, left, right });
                }
            }
        }
    }
}

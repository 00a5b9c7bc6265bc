//! Per-node protocol actor.
//!
//! A [`Node`] consumes one input at a time (boot, timer, datagram, sensor
//! reading) and answers with effects: datagrams to send and timers to arm,
//! plus structured [`Event`]s for the log. It never sleeps or touches a
//! socket, so the simulated harness and the real-time UDP driver run the
//! same code.
//!
//! Cycle `k` starts at `k * cycle_duration`. Within it, with `D` the cycle
//! duration and `W` the MapReduce window:
//!
//! | offset       | step                                              |
//! |--------------|---------------------------------------------------|
//! | 0            | register in the node table                        |
//! | settle       | elect from the registry, probe the leader         |
//! | D - 2W       | followers submit, the leader opens intake         |
//! | D - W        | leader consolidates and dispatches segments       |
//! | D - W/4      | leader merges, commits, broadcasts the outcome    |

mod buffer;
mod driver;
mod leader;
mod node;
mod wire;

pub use buffer::ClientBuffer;
pub use driver::{run_node, ReadingFeed};
pub use leader::{
    consolidate, integrity_check, leader_cycle, reduce_locally, Consolidated, Integrity,
    SegmentOutcome, Submission,
};
pub use node::{Effect, Input, Node, NodeConfig, Outbox, TimerKind};
pub use wire::{
    chunk_pairs, decode_coverage, encode_coverage, ReduceReport, SegmentChunk, SubmitChunk,
};

use std::fmt;

use thiserror::Error;

use crate::domain::{NodeId, SensorReading};
use crate::mapreduce::MapReduceError;
use crate::store::StoreError;
use crate::transport::MessageKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("invalid cycle configuration: {0}")]
    Config(String),
    #[error("{got} of {need} required nodes responded")]
    TooFewResponders { got: usize, need: usize },
    #[error("cycle {cycle_id} failed the integrity check")]
    IntegrityFailure { cycle_id: u32 },
    #[error("malformed payload: {0}")]
    Wire(String),
    #[error(transparent)]
    MapReduce(#[from] MapReduceError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Protocol timing and participation limits. Durations are milliseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleConfig {
    pub cycle_duration_ms: u64,
    pub mapreduce_window_ms: u64,
    pub min_responding_nodes: usize,
    pub retry_limit: u32,
    /// Delay after the cycle start before the registry is read, so peers
    /// starting on the same tick have registered.
    pub settle_ms: u64,
    pub probe_timeout_ms: u64,
    pub probe_retries: u32,
    /// Cap on pairs per DATA_SUBMIT / SEGMENT_ASSIGN datagram, on top of the
    /// byte limit. `None` packs as many as fit.
    pub max_pairs_per_datagram: Option<usize>,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            cycle_duration_ms: 2000,
            mapreduce_window_ms: 500,
            min_responding_nodes: 2,
            retry_limit: 3,
            settle_ms: 10,
            probe_timeout_ms: 250,
            probe_retries: crate::election::DEFAULT_PROBE_RETRIES,
            max_pairs_per_datagram: None,
        }
    }
}

impl CycleConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: String| Err(RuntimeError::Config(m));
        let d = self.cycle_duration_ms;
        let w = self.mapreduce_window_ms;
        if w == 0 || w >= d {
            return bad(format!("mapreduce window {w} ms must be in (0, {d})"));
        }
        if self.min_responding_nodes < 2 {
            return bad("min_responding_nodes must be at least 2".into());
        }
        if self.retry_limit == 0 || self.probe_retries == 0 || self.probe_timeout_ms == 0 {
            return bad("retry limits and probe timeout must be positive".into());
        }
        let check = self.settle_ms + self.probe_timeout_ms * u64::from(self.probe_retries);
        if 2 * w > d || d - 2 * w < check {
            return bad(format!(
                "collection phase of {} ms cannot fit a {check} ms availability check",
                d.saturating_sub(2 * w)
            ));
        }
        if self.max_pairs_per_datagram == Some(0) {
            return bad("max_pairs_per_datagram must be positive".into());
        }
        Ok(())
    }

    /// Registry liveness window: two check intervals.
    pub fn liveness_window_ms(&self) -> u64 {
        crate::election::liveness_window(self.cycle_duration_ms)
    }

    pub fn cycle_of(&self, now_us: u64) -> u32 {
        (now_us / (self.cycle_duration_ms * 1000)) as u32
    }

    pub fn cycle_start_us(&self, cycle: u32) -> u64 {
        u64::from(cycle) * self.cycle_duration_ms * 1000
    }

    pub(crate) fn offset_us(&self, cycle: u32, offset_ms: u64) -> u64 {
        self.cycle_start_us(cycle) + offset_ms * 1000
    }

    pub(crate) fn submit_at(&self) -> u64 {
        self.cycle_duration_ms - 2 * self.mapreduce_window_ms
    }

    pub(crate) fn consolidate_at(&self) -> u64 {
        self.cycle_duration_ms - self.mapreduce_window_ms
    }

    pub(crate) fn reduce_deadline_at(&self) -> u64 {
        self.cycle_duration_ms - self.mapreduce_window_ms / 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodePhase {
    Registering,
    CheckingServer,
    Electing,
    Collecting,
    Submitting,
    AwaitingSegment,
    Reducing,
    AwaitingResult,
    Consolidating,
    Dispatching,
    Merging,
    Committing,
    Broadcasting,
}

impl NodePhase {
    pub const ALL: [NodePhase; 13] = [
        NodePhase::Registering,
        NodePhase::CheckingServer,
        NodePhase::Electing,
        NodePhase::Collecting,
        NodePhase::Submitting,
        NodePhase::AwaitingSegment,
        NodePhase::Reducing,
        NodePhase::AwaitingResult,
        NodePhase::Consolidating,
        NodePhase::Dispatching,
        NodePhase::Merging,
        NodePhase::Committing,
        NodePhase::Broadcasting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodePhase::Registering => "REGISTERING",
            NodePhase::CheckingServer => "CHECKING_SERVER",
            NodePhase::Electing => "ELECTING",
            NodePhase::Collecting => "COLLECTING",
            NodePhase::Submitting => "SUBMITTING",
            NodePhase::AwaitingSegment => "AWAITING_SEGMENT",
            NodePhase::Reducing => "REDUCING",
            NodePhase::AwaitingResult => "AWAITING_RESULT",
            NodePhase::Consolidating => "CONSOLIDATING",
            NodePhase::Dispatching => "DISPATCHING",
            NodePhase::Merging => "MERGING",
            NodePhase::Committing => "COMMITTING",
            NodePhase::Broadcasting => "BROADCASTING",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    /// Whether `self -> to` is an edge of the phase graph. Every phase may
    /// return to REGISTERING when a new cycle begins.
    pub fn can_transition(self, to: NodePhase) -> bool {
        use NodePhase::*;
        if to == Registering {
            return true;
        }
        matches!(
            (self, to),
            (Registering, CheckingServer)
                | (CheckingServer, Collecting | Electing)
                | (Electing, CheckingServer | Collecting)
                | (Collecting, Submitting)
                | (Submitting, AwaitingSegment | Consolidating)
                | (AwaitingSegment, Reducing | Collecting | CheckingServer)
                | (Reducing, AwaitingResult)
                | (AwaitingResult, Collecting | CheckingServer)
                | (Consolidating, Dispatching | Electing)
                | (Dispatching, Merging)
                | (Merging, Committing | Electing)
                | (Committing, Broadcasting | Electing)
                | (Broadcasting, Collecting)
        )
    }
}

impl fmt::Display for NodePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Latency samples a node records about its own exchanges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    /// DATA_SUBMIT sent to its REGISTER_ACK received.
    Response,
    /// PING sent to matching PONG received.
    Rtt,
    /// Cycle start to the first datagram from the leader.
    Ttfb,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Response => "response",
            Metric::Rtt => "rtt",
            Metric::Ttfb => "ttfb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Phase {
        from: NodePhase,
        to: NodePhase,
    },
    Sent {
        kind: MessageKind,
        to: String,
        bytes: usize,
    },
    Received {
        kind: MessageKind,
        from: String,
    },
    Accepted {
        seq: u64,
        reading: SensorReading,
    },
    Duplicate {
        reading: SensorReading,
    },
    Registered,
    RegisterFailed {
        reason: String,
    },
    Elected {
        leader: NodeId,
    },
    ElectionFailed {
        reason: String,
    },
    ProbeFailed {
        target: NodeId,
    },
    BecameLeader,
    Submitted {
        from: u64,
        to: u64,
        chunks: usize,
    },
    Rejected {
        origin: NodeId,
        reason: String,
    },
    Fallback {
        segment: u32,
    },
    Committed {
        readings: u64,
        rows: usize,
    },
    Aborted {
        reason: String,
    },
    Pruned {
        through: u64,
    },
    Sample {
        metric: Metric,
        micros: u64,
    },
    /// Harness-level fault injection.
    Fault {
        description: String,
    },
}

/// One line of the structured event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub at_us: u64,
    /// 0 for harness events.
    pub node: u32,
    pub cycle: u32,
    pub kind: EventKind,
}

impl Event {
    /// Whether this event counts as protocol progress for deadlock
    /// detection.
    pub fn is_progress(&self) -> bool {
        matches!(
            self.kind,
            EventKind::Elected { .. }
                | EventKind::ElectionFailed { .. }
                | EventKind::Committed { .. }
                | EventKind::Aborted { .. }
        )
    }
}

fn fmt_ms(us: u64) -> String {
    format!("{}.{:03}", us / 1000, us % 1000)
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} n{} c{} ", fmt_ms(self.at_us), self.node, self.cycle)?;
        match &self.kind {
            EventKind::Phase { from, to } => write!(f, "phase {from} -> {to}"),
            EventKind::Sent { kind, to, bytes } => write!(f, "send {kind} to={to} bytes={bytes}"),
            EventKind::Received { kind, from } => write!(f, "recv {kind} from={from}"),
            EventKind::Accepted { seq, reading: r } => write!(
                f,
                "accept seq={seq} {}=Room{} ts={} reader={}",
                r.tag,
                r.room.get(),
                r.timestamp,
                r.reader_id
            ),
            EventKind::Duplicate { reading: r } => write!(
                f,
                "duplicate {}=Room{} ts={} reader={}",
                r.tag,
                r.room.get(),
                r.timestamp,
                r.reader_id
            ),
            EventKind::Registered => f.write_str("registered"),
            EventKind::RegisterFailed { reason } => write!(f, "register-failed {reason}"),
            EventKind::Elected { leader } => write!(f, "elected leader={leader}"),
            EventKind::ElectionFailed { reason } => write!(f, "election-failed {reason}"),
            EventKind::ProbeFailed { target } => write!(f, "probe-failed target={target}"),
            EventKind::BecameLeader => f.write_str("leader"),
            EventKind::Submitted { from, to, chunks } => {
                write!(f, "submitted range={from}-{to} chunks={chunks}")
            }
            EventKind::Rejected { origin, reason } => {
                write!(f, "rejected origin={origin} {reason}")
            }
            EventKind::Fallback { segment } => write!(f, "fallback segment={segment}"),
            EventKind::Committed { readings, rows } => {
                write!(f, "committed readings={readings} rows={rows}")
            }
            EventKind::Aborted { reason } => write!(f, "aborted {reason}"),
            EventKind::Pruned { through } => write!(f, "pruned through={through}"),
            EventKind::Sample { metric, micros } => {
                write!(f, "sample {} {}", metric.as_str(), fmt_ms(*micros))
            }
            EventKind::Fault { description } => write!(f, "fault {description}"),
        }
    }
}

use std::collections::VecDeque;

use crate::domain::SensorReading;

/// How far back the doorway dedupe remembers readings, in milliseconds.
const DEDUPE_WINDOW_MS: u64 = 1000;

/// Readings a node has collected but not yet seen committed.
///
/// Accepted readings get consecutive sequence numbers starting at 0; a
/// commit covers a prefix of them, so `pending` is always a contiguous run
/// `[base, next_seq)`. This is the part of a node that survives a crash.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientBuffer {
    pending: VecDeque<SensorReading>,
    base: u64,
    next_seq: u64,
    pub committed_through: Option<u32>,
    recent: VecDeque<SensorReading>,
}

impl ClientBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accepts a reading unless it is the second read of one doorway
    /// passage: same tag, room and timestamp seen from a different reader.
    /// Returns the assigned sequence number.
    pub fn accept(&mut self, reading: SensorReading) -> Option<u64> {
        let horizon = reading.timestamp.saturating_sub(DEDUPE_WINDOW_MS);
        while self.recent.front().is_some_and(|r| r.timestamp < horizon) {
            self.recent.pop_front();
        }
        let duplicate = self.recent.iter().any(|r| {
            r.tag == reading.tag
                && r.room == reading.room
                && r.timestamp == reading.timestamp
                && r.reader_id != reading.reader_id
        });
        if duplicate {
            return None;
        }
        self.recent.push_back(reading);
        let seq = self.next_seq;
        self.pending.push_back(reading);
        self.next_seq += 1;
        Some(seq)
    }

    /// Drops everything below `watermark`.
    pub fn prune_below(&mut self, watermark: u64) -> bool {
        let target = watermark.min(self.next_seq);
        if target <= self.base {
            return false;
        }
        let n = (target - self.base) as usize;
        self.pending.drain(..n);
        self.base = target;
        true
    }

    /// The pending run as `(from, to, readings)`.
    pub fn pending(&self) -> (u64, u64, Vec<SensorReading>) {
        (
            self.base,
            self.next_seq,
            self.pending.iter().copied().collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn base(&self) -> u64 {
        self.base
    }
}

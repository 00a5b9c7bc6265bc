//! Real-time event loop for a node on a blocking transport.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::Mutex;
use std::time::Instant;

use crate::domain::SensorReading;
use crate::transport::{RecvOutcome, Transport};

use super::{Effect, Event, Input, Node, Outbox, RuntimeError, TimerKind};

/// Readings arriving from the node's attached RFID readers.
pub type ReadingFeed = Receiver<SensorReading>;

/// Longest single wait on the socket, so readings and shutdown are noticed.
const POLL_US: u64 = 20_000;

/// Runs `node` against a wall clock measured from `epoch` until `shutdown`
/// is set, appending its events to `events`. Returns the node so callers
/// can inspect its final state.
pub fn run_node(
    mut node: Node,
    transport: &dyn Transport,
    epoch: Instant,
    readings: ReadingFeed,
    shutdown: &AtomicBool,
    events: &Mutex<Vec<Event>>,
) -> Result<Node, RuntimeError> {
    let now_us = || epoch.elapsed().as_micros() as u64;
    let mut timers: BinaryHeap<Reverse<(u64, TimerKind)>> = BinaryHeap::new();

    let apply = |out: Outbox, timers: &mut BinaryHeap<Reverse<(u64, TimerKind)>>| {
        for effect in out.effects {
            match effect {
                // Datagram loss is part of the protocol's failure model.
                Effect::Send { to, message } => {
                    let _ = transport.send(&to, &message);
                }
                Effect::Timer { at_us, kind } => timers.push(Reverse((at_us, kind))),
            }
        }
        events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .extend(out.events);
    };

    let out = node.handle(now_us(), Input::Boot)?;
    apply(out, &mut timers);

    while !shutdown.load(Ordering::Acquire) {
        while let Some(Reverse((at, kind))) = timers.peek().copied() {
            if at > now_us() {
                break;
            }
            timers.pop();
            let out = node.handle(now_us(), Input::Timer(kind))?;
            apply(out, &mut timers);
        }
        while let Ok(r) = readings.try_recv() {
            let out = node.handle(now_us(), Input::Reading(r))?;
            apply(out, &mut timers);
        }
        let wait = timers
            .peek()
            .map(|Reverse((at, _))| at.saturating_sub(now_us()))
            .unwrap_or(POLL_US)
            .min(POLL_US);
        match transport.recv(wait.div_ceil(1000)) {
            Ok(RecvOutcome::Message(d)) => {
                let out = node.handle(now_us(), Input::Datagram(d))?;
                apply(out, &mut timers);
            }
            Ok(RecvOutcome::Timeout) => {}
            // Undecodable frames are dropped like corrupted datagrams.
            Err(crate::transport::TransportError::Malformed(_)) => {}
            Err(_) => break,
        }
    }
    Ok(node)
}

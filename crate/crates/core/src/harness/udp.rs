//! Scenario runner on real loopback sockets, one thread per node.
//!
//! Readings are fed to the nodes at their arrival times by a feeder
//! thread. Faults are not supported on this backend.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::domain::SensorReading;
use crate::runtime::{run_node, Event, Node, NodeConfig};
use crate::store::Store;
use crate::transport::{Transport, UdpEndpoint};

use super::scenario::ScenarioConfig;
use super::{build_traffic, node_seed, HarnessError, NodeView, Routing, ScenarioOutcome};

pub fn run_udp(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, HarnessError> {
    cfg.validate()?;
    let store = Arc::new(match &cfg.store_path {
        Some(p) => Store::open(p)?,
        None => Store::in_memory(),
    });
    let plan = build_traffic(cfg)?;
    let ids = cfg.node_ids();
    let endpoints = ids
        .iter()
        .map(|_| UdpEndpoint::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()?;

    let mut feeds = Vec::new();
    let mut receivers = Vec::new();
    for _ in &ids {
        let (tx, rx) = mpsc::channel::<SensorReading>();
        feeds.push(tx);
        receivers.push(rx);
    }

    let shutdown = AtomicBool::new(false);
    let events: Mutex<Vec<Event>> = Mutex::new(Vec::new());
    let run_ms = cfg.run_ms() + u64::from(cfg.drain_cycles) * cfg.cycle.cycle_duration_ms;
    let epoch = Instant::now();

    let nodes: Vec<Node> = thread::scope(|scope| -> Result<Vec<Node>, HarnessError> {
        let mut handles = Vec::new();
        for ((id, ep), rx) in ids.iter().zip(&endpoints).zip(receivers) {
            let node = Node::new(
                NodeConfig {
                    node_id: *id,
                    address: ep.local_addr().to_string(),
                    cycle: cfg.cycle.clone(),
                    modes: cfg.modes,
                    override_leader: cfg.override_leader,
                    seed: node_seed(cfg.seed, 0),
                },
                store.clone(),
            );
            let (shutdown, events) = (&shutdown, &events);
            handles.push(scope.spawn(move || run_node(node, ep, epoch, rx, shutdown, events)));
        }

        let mut routed = 0usize;
        for (at_ms, r) in &plan.readings {
            let due = epoch + Duration::from_millis(*at_ms);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
            let idx = match &plan.routing {
                Routing::Lowest => 0,
                Routing::ByRoom => (r.room.get() as usize - 1) % ids.len(),
                Routing::RoundRobin(targets) => {
                    let want = targets[routed % targets.len()];
                    routed += 1;
                    ids.iter().position(|id| *id == want).unwrap_or(0)
                }
            };
            // A node thread that already failed reports its error on join.
            let _ = feeds[idx].send(*r);
        }

        let end = epoch + Duration::from_millis(run_ms);
        if let Some(wait) = end.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        shutdown.store(true, Ordering::Release);
        for ep in &endpoints {
            ep.close();
        }
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .expect("node thread panicked")
                    .map_err(HarnessError::from)
            })
            .collect()
    })?;

    let end_us = epoch.elapsed().as_micros() as u64;
    let mut events = events.into_inner().unwrap_or_else(|e| e.into_inner());
    events.sort_by_key(|e| (e.at_us, e.node));
    let views = nodes
        .iter()
        .map(|n| NodeView {
            id: n.id(),
            alive: true,
            phase: Some(n.phase()),
            leader: n.leader(),
            pending: n.buffer().len(),
        })
        .collect();
    let buffers: BTreeMap<_, _> = nodes.iter().map(|n| (n.id(), n.buffer().clone())).collect();
    Ok(ScenarioOutcome::assemble(
        cfg,
        events,
        store,
        views,
        buffers,
        plan,
        Vec::new(),
        end_us,
    ))
}

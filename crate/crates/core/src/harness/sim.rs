//! Single-threaded scenario runner on the simulated network.
//!
//! The harness clock runs in microseconds. The network delivers on whole
//! milliseconds; each delivered datagram then waits in its node's inbound
//! queue, and a node spends `service_time_us` on every datagram it takes
//! off that queue. Timers and sensor readings bypass the queue.
//!
//! At equal timestamps events are taken in the order: fault, network
//! delivery, queued datagram, reading, timer.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use crate::domain::{NodeId, SensorReading};
use crate::runtime::{
    ClientBuffer, Effect, Event, EventKind, Input, Node, NodeConfig, NodePhase, Outbox, TimerKind,
};
use crate::store::Store;
use crate::transport::{Datagram, NetConfig, SimEndpoint, SimNetwork, Transport};

use super::scenario::{FaultKind, FaultSpec, ScenarioConfig};
use super::{
    build_traffic, node_seed, HarnessError, NodeView, Routing, ScenarioOutcome, TrafficPlan,
};

struct Slot {
    id: NodeId,
    addr: String,
    node: Option<Node>,
    endpoint: Option<SimEndpoint>,
    disk: Option<ClientBuffer>,
    queue: VecDeque<(u64, Datagram)>,
    busy_until: u64,
    incarnation: u32,
}

type TimerEntry = Reverse<(u64, u64, usize, u32, TimerKind)>;

/// A scenario in progress. [`super::run_scenario`] drives it to the end;
/// tests can also stop at intermediate times and inspect the nodes.
pub struct Simulation {
    cfg: ScenarioConfig,
    net: SimNetwork,
    store: Arc<Store>,
    slots: Vec<Slot>,
    timers: BinaryHeap<TimerEntry>,
    timer_seq: u64,
    readings: Vec<(u64, SensorReading)>,
    next_reading: usize,
    routing: Routing,
    faults: Vec<FaultSpec>,
    next_fault: usize,
    events: Vec<Event>,
    now: u64,
    last_progress: u64,
    plan: TrafficPlan,
    dropped_readings: Vec<SensorReading>,
    routed: usize,
}

pub(crate) fn addr_of(id: NodeId) -> String {
    format!("node{}.sim:7000", id.get())
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let store = Arc::new(match &cfg.store_path {
            Some(p) => Store::open(p)?,
            None => Store::in_memory(),
        });
        let net = SimNetwork::new(&NetConfig {
            seed: cfg.seed,
            ..cfg.net.clone()
        });
        let plan = build_traffic(&cfg)?;
        let mut readings: Vec<(u64, SensorReading)> = plan
            .readings
            .iter()
            .map(|(at, r)| (at * 1000, *r))
            .collect();
        readings.sort_by_key(|(at, _)| *at);
        let mut sim = Simulation {
            net,
            store,
            slots: Vec::new(),
            timers: BinaryHeap::new(),
            timer_seq: 0,
            readings,
            next_reading: 0,
            routing: plan.routing.clone(),
            faults: cfg.faults.clone(),
            next_fault: 0,
            events: Vec::new(),
            now: 0,
            last_progress: 0,
            plan,
            dropped_readings: Vec::new(),
            routed: 0,
            cfg,
        };
        for id in sim.cfg.node_ids() {
            let addr = addr_of(id);
            let endpoint = sim.net.bind(&addr)?;
            sim.slots.push(Slot {
                id,
                addr,
                node: None,
                endpoint: Some(endpoint),
                disk: Some(ClientBuffer::new()),
                queue: VecDeque::new(),
                busy_until: 0,
                incarnation: 0,
            });
        }
        for i in 0..sim.slots.len() {
            sim.boot(i)?;
        }
        Ok(sim)
    }

    fn node_config(&self, i: usize) -> NodeConfig {
        let s = &self.slots[i];
        NodeConfig {
            node_id: s.id,
            address: s.addr.clone(),
            cycle: self.cfg.cycle.clone(),
            modes: self.cfg.modes,
            override_leader: self.cfg.override_leader,
            seed: node_seed(self.cfg.seed, s.incarnation),
        }
    }

    fn boot(&mut self, i: usize) -> Result<(), HarnessError> {
        let cfg = self.node_config(i);
        let buffer = self.slots[i].disk.take().unwrap_or_default();
        let mut node = Node::recover(cfg, self.store.clone(), buffer);
        let out = node.handle(self.now, Input::Boot)?;
        self.slots[i].node = Some(node);
        self.apply(i, out);
        Ok(())
    }

    pub fn now_us(&self) -> u64 {
        self.now
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn network(&self) -> &SimNetwork {
        &self.net
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.slots
            .iter()
            .find(|s| s.id == id)
            .and_then(|s| s.node.as_ref())
    }

    pub fn views(&self) -> Vec<NodeView> {
        self.slots
            .iter()
            .map(|s| {
                let buffer = s.node.as_ref().map(|n| n.buffer()).or(s.disk.as_ref());
                NodeView {
                    id: s.id,
                    alive: s.node.is_some(),
                    phase: s.node.as_ref().map(|n| n.phase()),
                    leader: s.node.as_ref().and_then(|n| n.leader()),
                    pending: buffer.map_or(0, |b| b.len()),
                }
            })
            .collect()
    }

    /// Live nodes that currently consider themselves leader.
    pub fn leaders(&self) -> Vec<NodeId> {
        self.slots
            .iter()
            .filter_map(|s| s.node.as_ref())
            .filter(|n| n.is_leader())
            .map(|n| n.id())
            .collect()
    }

    fn log(&mut self, kind: EventKind) {
        let cycle = self.cfg.cycle.cycle_of(self.now);
        self.events.push(Event {
            at_us: self.now,
            node: 0,
            cycle,
            kind,
        });
    }

    fn apply(&mut self, i: usize, out: Outbox) {
        let incarnation = self.slots[i].incarnation;
        for e in &out.events {
            if e.is_progress() {
                self.last_progress = self.now;
            }
        }
        self.events.extend(out.events);
        for effect in out.effects {
            match effect {
                Effect::Send { to, message } => {
                    self.net.advance_to(self.now / 1000);
                    if let Some(ep) = &self.slots[i].endpoint {
                        // Sends to closed or unknown peers are silently lost.
                        let _ = ep.send(&to, &message);
                    }
                }
                Effect::Timer { at_us, kind } => {
                    self.timer_seq += 1;
                    self.timers
                        .push(Reverse((at_us, self.timer_seq, i, incarnation, kind)));
                }
            }
        }
    }

    fn next_queue(&self) -> Option<(u64, usize)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.queue
                    .front()
                    .map(|(arr, _)| ((*arr).max(s.busy_until), i))
            })
            .min()
    }

    /// Runs every event up to and including `limit_us`.
    pub fn run_until(&mut self, limit_us: u64) -> Result<(), HarnessError> {
        let deadlock_us = 10 * self.cfg.cycle.cycle_duration_ms * 1000;
        loop {
            let fault = self.faults.get(self.next_fault).map(|f| f.at_ms * 1000);
            let delivery = self.net.next_delivery_at().map(|ms| ms * 1000);
            let queued = self.next_queue();
            let reading = self.readings.get(self.next_reading).map(|(at, _)| *at);
            let timer = self.timers.peek().map(|Reverse(t)| t.0);
            let next = [fault, delivery, queued.map(|q| q.0), reading, timer]
                .into_iter()
                .flatten()
                .min();
            let Some(next) = next.filter(|t| *t <= limit_us) else {
                self.now = self.now.max(limit_us);
                return Ok(());
            };
            let at = next.max(self.now);
            if at.saturating_sub(self.last_progress) > deadlock_us {
                return Err(HarnessError::Deadlock {
                    at_ms: at / 1000,
                    quiet_ms: (at - self.last_progress) / 1000,
                });
            }
            self.now = at;
            if fault == Some(next) {
                let f = self.faults[self.next_fault].clone();
                self.next_fault += 1;
                self.apply_fault(&f)?;
            } else if delivery == Some(next) {
                self.deliver();
            } else if let Some((_, i)) = queued.filter(|q| q.0 == next) {
                let (_, d) = self.slots[i].queue.pop_front().expect("queued datagram");
                self.slots[i].busy_until = self.now + self.cfg.service_time_us;
                if let Some(node) = self.slots[i].node.as_mut() {
                    let out = node.handle(self.now, Input::Datagram(d))?;
                    self.apply(i, out);
                }
            } else if reading == Some(next) {
                let (_, r) = self.readings[self.next_reading];
                self.next_reading += 1;
                self.route_reading(r)?;
            } else {
                let Reverse((_, _, i, inc, kind)) = self.timers.pop().expect("timer");
                if self.slots[i].incarnation == inc {
                    if let Some(node) = self.slots[i].node.as_mut() {
                        let out = node.handle(self.now, Input::Timer(kind))?;
                        self.apply(i, out);
                    }
                }
            }
        }
    }

    fn deliver(&mut self) {
        self.net.advance_to(self.now / 1000);
        for s in &mut self.slots {
            let Some(ep) = &s.endpoint else { continue };
            while let Ok(Some(d)) = ep.try_recv() {
                s.queue.push_back((self.now, d));
            }
        }
    }

    fn route_reading(&mut self, r: SensorReading) -> Result<(), HarnessError> {
        let live: Vec<usize> = (0..self.slots.len())
            .filter(|i| self.slots[*i].node.is_some())
            .collect();
        let target = match &self.routing {
            Routing::Lowest => live.first().copied(),
            Routing::ByRoom => {
                (!live.is_empty()).then(|| live[(r.room.get() as usize - 1) % live.len()])
            }
            Routing::RoundRobin(ids) => {
                let k = self.routed;
                self.routed += 1;
                let want = ids[k % ids.len()];
                live.iter().copied().find(|i| self.slots[*i].id == want)
            }
        };
        match target {
            Some(i) => {
                let node = self.slots[i].node.as_mut().expect("live");
                let out = node.handle(self.now, Input::Reading(r))?;
                self.apply(i, out);
            }
            None => self.dropped_readings.push(r),
        }
        Ok(())
    }

    fn slot_of(&self, id: NodeId) -> usize {
        self.slots
            .iter()
            .position(|s| s.id == id)
            .expect("validated node id")
    }

    fn current_leader(&self) -> Option<NodeId> {
        let mut leaders = self.leaders();
        leaders.sort();
        leaders.last().copied().or_else(|| {
            let snap = self.store.snapshot_nodes(self.now / 1000).ok()?;
            let id = snap.leader()?.node_id;
            self.node(id).map(|_| id)
        })
    }

    fn kill(&mut self, i: usize) {
        let Some(node) = self.slots[i].node.take() else {
            return;
        };
        let s = &mut self.slots[i];
        s.disk = Some(node.into_buffer());
        s.endpoint = None;
        s.queue.clear();
        s.incarnation += 1;
        self.net.close(&s.addr.clone());
    }

    fn apply_fault(&mut self, f: &FaultSpec) -> Result<(), HarnessError> {
        let description = match &f.kind {
            FaultKind::KillLeader => match self.current_leader() {
                Some(id) => {
                    let i = self.slot_of(id);
                    self.kill(i);
                    format!("{f} killed node {id}")
                }
                None => format!("{f} found no leader"),
            },
            FaultKind::KillNode(id) => {
                let i = self.slot_of(*id);
                self.kill(i);
                f.to_string()
            }
            FaultKind::RestartNode(id) => {
                let i = self.slot_of(*id);
                if self.slots[i].node.is_some() {
                    format!("{f} ignored, node is running")
                } else {
                    self.slots[i].endpoint = Some(self.net.bind(&self.slots[i].addr.clone())?);
                    self.log(EventKind::Fault {
                        description: f.to_string(),
                    });
                    return self.boot(i);
                }
            }
            FaultKind::SetLoss(p) => {
                self.net.set_loss_rate(*p);
                f.to_string()
            }
            FaultKind::Partition { nodes, duration_ms } => {
                let members: Vec<String> = nodes.iter().map(|n| addr_of(*n)).collect();
                self.net.partition(members, self.now / 1000 + duration_ms);
                f.to_string()
            }
        };
        self.log(EventKind::Fault { description });
        Ok(())
    }

    fn drained(&self) -> bool {
        self.next_reading >= self.readings.len()
            && self
                .slots
                .iter()
                .all(|s| s.node.as_ref().is_none_or(|n| n.buffer().is_empty()))
    }

    /// Runs the configured cycles, then up to `drain_cycles` more until
    /// every live buffer is empty.
    pub fn run_to_end(&mut self) -> Result<(), HarnessError> {
        let d = self.cfg.cycle.cycle_duration_ms * 1000;
        self.run_until(self.cfg.run_ms() * 1000 - 1)?;
        let mut end = self.cfg.run_ms() * 1000;
        for _ in 0..self.cfg.drain_cycles {
            if self.drained() {
                break;
            }
            self.run_until(end + d - 1)?;
            end += d;
        }
        Ok(())
    }

    pub fn finish(self) -> ScenarioOutcome {
        let views = self.views();
        let buffers = self
            .slots
            .iter()
            .filter_map(|s| {
                let b = s.node.as_ref().map(|n| n.buffer()).or(s.disk.as_ref())?;
                Some((s.id, b.clone()))
            })
            .collect::<BTreeMap<_, _>>();
        ScenarioOutcome::assemble(
            &self.cfg,
            self.events,
            self.store,
            views,
            buffers,
            self.plan,
            self.dropped_readings,
            self.now,
        )
    }
}

/// Whether every recorded phase change follows an edge of the phase graph.
pub fn phase_log_is_legal(events: &[Event]) -> bool {
    let mut last: BTreeMap<u32, NodePhase> = BTreeMap::new();
    events.iter().all(|e| match e.kind {
        EventKind::Phase { from, to } => {
            let prev = last.insert(e.node, to);
            // A (re)booted node starts out in REGISTERING.
            from.can_transition(to)
                && prev.is_none_or(|p| p == from || from == NodePhase::Registering)
        }
        _ => true,
    })
}

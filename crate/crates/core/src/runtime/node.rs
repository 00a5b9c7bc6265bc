use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{CountMode, ModeSet, NodeId, SensorReading};
use crate::election::{
    claim_leadership, elect_with_fallback, pong, register_node, step_down, AvailabilityProbe,
    ElectionError, Role,
};
use crate::mapreduce::{map_reading, parse_pairs, partition, sort_pairs, Segment};
use crate::store::{Store, StoreError};
use crate::transport::{Datagram, Message, MessageKind};

use super::leader::{
    consolidate, finish_round, reduce_locally, Consolidated, SegmentOutcome, Submission,
};
use super::wire::{
    chunk_pairs, decode_ack, decode_coverage, encode_ack, encode_coverage, join_chunks,
    ReduceReport, SegmentChunk, SubmitChunk,
};
use super::{ClientBuffer, CycleConfig, Event, EventKind, Metric, NodePhase, RuntimeError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub address: String,
    pub cycle: CycleConfig,
    pub modes: ModeSet,
    pub override_leader: Option<NodeId>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimerKind {
    CycleStart(u32),
    CheckServer(u32),
    ProbeTimeout(u64),
    Submit(u32),
    Consolidate(u32),
    ReduceDeadline(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Boot,
    Timer(TimerKind),
    Datagram(Datagram),
    Reading(SensorReading),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send { to: String, message: Message },
    Timer { at_us: u64, kind: TimerKind },
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub effects: Vec<Effect>,
    pub events: Vec<Event>,
}

/// A submission being reassembled from its parts.
#[derive(Debug, Clone)]
struct Intake {
    from: u64,
    to: u64,
    total: u32,
    parts: BTreeMap<u32, String>,
}

impl Intake {
    fn complete(&self) -> bool {
        self.parts.len() as u32 == self.total
    }
}

#[derive(Debug, Clone)]
struct Round {
    consolidated: Consolidated,
    segments: Vec<Segment>,
    addresses: BTreeMap<NodeId, String>,
    received: BTreeMap<u32, SegmentOutcome>,
}

#[derive(Debug, Clone)]
struct Assembly {
    index: u32,
    total: u32,
    checksum: u64,
    parts: BTreeMap<u32, String>,
}

/// State that lives for one cycle only.
#[derive(Debug, Default)]
struct CycleState {
    leader: Option<(NodeId, String)>,
    probe: Option<AvailabilityProbe>,
    first_response_seen: bool,
    // Follower side.
    submit_sent_at: BTreeMap<u32, u64>,
    acked: BTreeSet<u32>,
    assembly: Option<Assembly>,
    // Leader side.
    intake: BTreeMap<NodeId, (String, Intake)>,
    own: Option<Submission>,
    round: Option<Round>,
}

/// One protocol participant. Feed it inputs with [`Node::handle`] and carry
/// out the returned effects.
pub struct Node {
    cfg: NodeConfig,
    store: Arc<Store>,
    rng: ChaCha8Rng,
    phase: NodePhase,
    cycle: u32,
    buffer: ClientBuffer,
    state: CycleState,
    /// Nodes that failed a probe, with the registry `last_seen` they had
    /// then. A suspicion holds across cycles until the node registers again.
    suspects: BTreeMap<NodeId, u64>,
    out: Outbox,
    now_us: u64,
}

impl Node {
    pub fn new(cfg: NodeConfig, store: Arc<Store>) -> Self {
        Self::recover(cfg, store, ClientBuffer::new())
    }

    /// Restarts a node around a buffer recovered from local storage.
    pub fn recover(cfg: NodeConfig, store: Arc<Store>, buffer: ClientBuffer) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ u64::from(cfg.node_id.get()).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        Node {
            cfg,
            store,
            rng,
            phase: NodePhase::Registering,
            cycle: 0,
            buffer,
            state: CycleState::default(),
            suspects: BTreeMap::new(),
            out: Outbox::default(),
            now_us: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.cfg.node_id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn phase(&self) -> NodePhase {
        self.phase
    }

    pub fn cycle(&self) -> u32 {
        self.cycle
    }

    pub fn buffer(&self) -> &ClientBuffer {
        &self.buffer
    }

    /// The leader this node currently follows (itself when leading).
    pub fn leader(&self) -> Option<NodeId> {
        self.state.leader.as_ref().map(|(id, _)| *id)
    }

    pub fn is_leader(&self) -> bool {
        self.leader() == Some(self.cfg.node_id)
    }

    /// Consumes the node, keeping only what survives a crash.
    pub fn into_buffer(self) -> ClientBuffer {
        self.buffer
    }

    /// Processes one input. Only store failures are fatal; everything the
    /// network can do wrong is handled inside the protocol.
    pub fn handle(&mut self, now_us: u64, input: Input) -> Result<Outbox, RuntimeError> {
        self.now_us = now_us;
        let res = match input {
            Input::Boot => self.start_cycle(self.cfg.cycle.cycle_of(now_us)),
            Input::Timer(t) => self.on_timer(t),
            Input::Datagram(d) => self.on_datagram(d),
            Input::Reading(r) => {
                self.on_reading(r);
                Ok(())
            }
        };
        let out = std::mem::take(&mut self.out);
        res.map(|_| out)
    }

    fn now_ms(&self) -> u64 {
        self.now_us / 1000
    }

    fn log(&mut self, kind: EventKind) {
        self.out.events.push(Event {
            at_us: self.now_us,
            node: self.cfg.node_id.get(),
            cycle: self.cycle,
            kind,
        });
    }

    fn sample(&mut self, metric: Metric, since_us: u64) {
        let micros = self.now_us.saturating_sub(since_us);
        self.log(EventKind::Sample { metric, micros });
    }

    fn set_phase(&mut self, to: NodePhase) {
        let from = self.phase;
        if from == to {
            return;
        }
        assert!(
            from.can_transition(to),
            "illegal phase transition {from} -> {to}"
        );
        self.phase = to;
        self.log(EventKind::Phase { from, to });
    }

    fn send(&mut self, to: &str, kind: MessageKind, payload: impl Into<Vec<u8>>) {
        let message = Message::new(kind, self.cfg.node_id.get(), self.cycle, payload);
        self.send_message(to, message);
    }

    fn send_message(&mut self, to: &str, message: Message) {
        self.log(EventKind::Sent {
            kind: message.kind,
            to: to.to_string(),
            bytes: crate::transport::HEADER_LEN + message.payload.len(),
        });
        self.out.effects.push(Effect::Send {
            to: to.to_string(),
            message,
        });
    }

    fn timer(&mut self, at_us: u64, kind: TimerKind) {
        self.out.effects.push(Effect::Timer { at_us, kind });
    }

    fn on_reading(&mut self, reading: SensorReading) {
        match self.buffer.accept(reading) {
            Some(seq) => self.log(EventKind::Accepted { seq, reading }),
            None => self.log(EventKind::Duplicate { reading }),
        }
    }

    fn start_cycle(&mut self, cycle: u32) -> Result<(), RuntimeError> {
        self.cycle = cycle;
        self.state = CycleState::default();
        self.set_phase(NodePhase::Registering);
        let c = self.cfg.cycle.clone();
        let now = self.now_us;
        let window = c.liveness_window_ms();
        match register_node(
            &self.store,
            self.cfg.node_id,
            &self.cfg.address,
            self.now_ms(),
            window,
        ) {
            Ok(_) => {
                self.log(EventKind::Registered);
                let check = c.offset_us(cycle, c.settle_ms).max(now);
                self.timer(check, TimerKind::CheckServer(cycle));
            }
            Err(ElectionError::Store(e)) => return Err(e.into()),
            Err(e) => self.log(EventKind::RegisterFailed {
                reason: e.to_string(),
            }),
        }
        for (offset, kind) in [
            (c.submit_at(), TimerKind::Submit(cycle)),
            (c.consolidate_at(), TimerKind::Consolidate(cycle)),
            (c.reduce_deadline_at(), TimerKind::ReduceDeadline(cycle)),
        ] {
            let at = c.offset_us(cycle, offset);
            if at > now {
                self.timer(at, kind);
            }
        }
        self.timer(
            c.cycle_start_us(cycle + 1),
            TimerKind::CycleStart(cycle + 1),
        );
        Ok(())
    }

    fn on_timer(&mut self, t: TimerKind) -> Result<(), RuntimeError> {
        match t {
            TimerKind::CycleStart(k) if k > self.cycle => self.start_cycle(k),
            TimerKind::CheckServer(k)
                if k == self.cycle && self.phase == NodePhase::Registering =>
            {
                self.set_phase(NodePhase::CheckingServer);
                self.elect_and_probe()
            }
            TimerKind::ProbeTimeout(nonce) => self.on_probe_timeout(nonce),
            TimerKind::Submit(k) if k == self.cycle => self.on_submit(),
            TimerKind::Consolidate(k) if k == self.cycle => self.on_consolidate(),
            TimerKind::ReduceDeadline(k) if k == self.cycle => self.on_reduce_deadline(),
            _ => Ok(()),
        }
    }

    /// Picks the leader from the registry, skipping suspected nodes, and either takes the role or probes the
    /// winner.
    fn elect_and_probe(&mut self) -> Result<(), RuntimeError> {
        let snapshot = self.store.snapshot_nodes(self.now_ms())?;
        self.suspects
            .retain(|id, seen| snapshot.get(*id).is_some_and(|r| r.last_seen <= *seen));
        let excluded: Vec<NodeId> = self.suspects.keys().copied().collect();
        let candidates = snapshot.without(&excluded);
        let window = self.cfg.cycle.liveness_window_ms();
        let target = match elect_with_fallback(&candidates, self.cfg.override_leader, window) {
            Ok(t) => t,
            Err(e) => {
                self.log(EventKind::ElectionFailed {
                    reason: e.to_string(),
                });
                return Ok(());
            }
        };
        self.log(EventKind::Elected { leader: target });
        if target == self.cfg.node_id {
            claim_leadership(&self.store, target, self.now_ms()).map_err(store_only)?;
            self.state.leader = Some((target, self.cfg.address.clone()));
            self.log(EventKind::BecameLeader);
            self.set_phase(NodePhase::Collecting);
            return Ok(());
        }
        if snapshot
            .get(self.cfg.node_id)
            .is_some_and(|r| r.role == Role::Leader)
        {
            step_down(&self.store, self.cfg.node_id, self.now_ms()).map_err(store_only)?;
        }
        let addr = candidates
            .get(target)
            .map(|r| r.address.clone())
            .unwrap_or_default();
        self.set_phase(NodePhase::CheckingServer);
        let probe = AvailabilityProbe::start(
            target,
            &addr,
            self.cfg.cycle.probe_retries,
            self.now_us,
            &mut self.rng,
        );
        self.send_probe(probe);
        Ok(())
    }

    fn send_probe(&mut self, probe: AvailabilityProbe) {
        let ping = probe.ping(self.cfg.node_id, self.cycle);
        let to = probe.target_addr.clone();
        let deadline = self.now_us + self.cfg.cycle.probe_timeout_ms * 1000;
        self.timer(deadline, TimerKind::ProbeTimeout(probe.nonce));
        self.state.probe = Some(probe);
        self.send_message(&to, ping);
    }

    fn on_probe_timeout(&mut self, nonce: u64) -> Result<(), RuntimeError> {
        let Some(mut probe) = self.state.probe.take().filter(|p| p.nonce == nonce) else {
            return Ok(());
        };
        if probe.retry(self.now_us, &mut self.rng) {
            self.send_probe(probe);
            return Ok(());
        }
        self.log(EventKind::ProbeFailed {
            target: probe.target,
        });
        let seen = self
            .store
            .snapshot_nodes(self.now_ms())?
            .get(probe.target)
            .map_or(0, |r| r.last_seen);
        self.suspects.insert(probe.target, seen);
        self.set_phase(NodePhase::Electing);
        self.elect_and_probe()
    }

    fn first_response(&mut self) {
        if !self.state.first_response_seen {
            self.state.first_response_seen = true;
            let start = self.cfg.cycle.cycle_start_us(self.cycle);
            self.sample(Metric::Ttfb, start);
        }
    }

    fn on_datagram(&mut self, d: Datagram) -> Result<(), RuntimeError> {
        let msg = &d.message;
        self.log(EventKind::Received {
            kind: msg.kind,
            from: d.from.clone(),
        });
        if msg.kind == MessageKind::Ping {
            let reply = pong(self.cfg.node_id, msg);
            self.send_message(&d.from, reply);
            return Ok(());
        }
        if msg.cycle_id != self.cycle {
            return Ok(());
        }
        let Ok(sender) = NodeId::new(msg.sender) else {
            return Ok(());
        };
        let from_leader = self.leader() == Some(sender) && !self.is_leader();
        let text = msg.payload_str().unwrap_or("").to_string();
        match msg.kind {
            MessageKind::Pong => self.on_pong(&d),
            MessageKind::DataSubmit => self.on_data_submit(sender, &d.from, &text),
            MessageKind::RegisterAck if from_leader => {
                self.first_response();
                if let Ok((part, _)) = decode_ack(&text) {
                    if self.state.acked.insert(part) {
                        if let Some(sent) = self.state.submit_sent_at.get(&part).copied() {
                            self.sample(Metric::Response, sent);
                        }
                    }
                }
            }
            MessageKind::SegmentAssign if from_leader => self.on_segment_chunk(&d.from, &text),
            MessageKind::ReduceResult => self.on_reduce_result(sender, &text),
            MessageKind::CycleSuccess if from_leader => self.on_cycle_success(&text),
            MessageKind::CycleAbort if from_leader => {
                if matches!(
                    self.phase,
                    NodePhase::AwaitingSegment | NodePhase::AwaitingResult
                ) {
                    self.set_phase(NodePhase::CheckingServer);
                    self.elect_and_probe()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn on_pong(&mut self, d: &Datagram) {
        let matched = self
            .state
            .probe
            .as_ref()
            .is_some_and(|p| p.matches(&d.message));
        if !matched || self.phase != NodePhase::CheckingServer {
            return;
        }
        let probe = self.state.probe.take().expect("matched probe");
        self.sample(Metric::Rtt, probe.sent_at);
        self.state.leader = Some((probe.target, probe.target_addr));
        self.first_response();
        self.set_phase(NodePhase::Collecting);
    }

    fn on_submit(&mut self) -> Result<(), RuntimeError> {
        if self.phase != NodePhase::Collecting {
            return Ok(());
        }
        let Some((leader, leader_addr)) = self.state.leader.clone() else {
            return Ok(());
        };
        let me = self.cfg.node_id;
        let watermark = self.store.watermark(me);
        if self.buffer.prune_below(watermark) {
            self.log(EventKind::Pruned { through: watermark });
        }
        let (from, to, readings) = self.buffer.pending();
        let pairs = sort_pairs(
            readings
                .iter()
                .map(|r| map_reading(r, CountMode::Visitor))
                .collect(),
        );
        self.set_phase(NodePhase::Submitting);
        if leader == me {
            self.state.own = Some(Submission {
                origin: me,
                from,
                to,
                pairs,
            });
            self.log(EventKind::Submitted {
                from,
                to,
                chunks: 0,
            });
            self.set_phase(NodePhase::Consolidating);
            return Ok(());
        }
        let chunks = chunk_pairs(&pairs, self.cfg.cycle.max_pairs_per_datagram);
        let total = chunks.len() as u32;
        for (part, text) in chunks.into_iter().enumerate() {
            let part = part as u32;
            let payload = SubmitChunk {
                from,
                to,
                part,
                total,
                text,
            }
            .encode();
            self.state.submit_sent_at.insert(part, self.now_us);
            self.send(&leader_addr, MessageKind::DataSubmit, payload);
        }
        self.log(EventKind::Submitted {
            from,
            to,
            chunks: total as usize,
        });
        self.set_phase(NodePhase::AwaitingSegment);
        Ok(())
    }

    fn on_data_submit(&mut self, origin: NodeId, from_addr: &str, text: &str) {
        let open = matches!(
            self.phase,
            NodePhase::Collecting | NodePhase::Submitting | NodePhase::Consolidating
        );
        if !self.is_leader() || !open || origin == self.cfg.node_id {
            return;
        }
        let Ok(chunk) = SubmitChunk::decode(text) else {
            return;
        };
        let entry = self.state.intake.entry(origin).or_insert_with(|| {
            (
                from_addr.to_string(),
                Intake {
                    from: chunk.from,
                    to: chunk.to,
                    total: chunk.total,
                    parts: BTreeMap::new(),
                },
            )
        });
        let intake = &mut entry.1;
        if (intake.from, intake.to, intake.total) != (chunk.from, chunk.to, chunk.total) {
            return;
        }
        intake.parts.entry(chunk.part).or_insert(chunk.text);
        self.send(
            from_addr,
            MessageKind::RegisterAck,
            encode_ack(chunk.part, chunk.total),
        );
    }

    fn on_consolidate(&mut self) -> Result<(), RuntimeError> {
        if self.phase != NodePhase::Consolidating {
            return Ok(());
        }
        let mut submissions: Vec<Submission> = self.state.own.iter().cloned().collect();
        let mut addresses = BTreeMap::new();
        let intake = std::mem::take(&mut self.state.intake);
        for (origin, (addr, sub)) in intake {
            let reason = if !sub.complete() {
                Some(format!("{} of {} parts", sub.parts.len(), sub.total))
            } else if sub.from != self.store.watermark(origin) {
                Some(format!(
                    "range starts at {}, watermark {}",
                    sub.from,
                    self.store.watermark(origin)
                ))
            } else {
                None
            };
            let pairs = match reason {
                None => parse_pairs(&join_chunks(sub.parts.values().map(String::as_str)))
                    .map_err(|e| e.to_string()),
                Some(r) => Err(r),
            };
            match pairs {
                Ok(pairs) if pairs.len() as u64 == sub.to - sub.from => {
                    addresses.insert(origin, addr);
                    submissions.push(Submission {
                        origin,
                        from: sub.from,
                        to: sub.to,
                        pairs,
                    });
                }
                Ok(pairs) => self.log(EventKind::Rejected {
                    origin,
                    reason: format!("{} pairs for range {}-{}", pairs.len(), sub.from, sub.to),
                }),
                Err(reason) => self.log(EventKind::Rejected { origin, reason }),
            }
        }
        let consolidated = consolidate(&submissions);
        let need = self.cfg.cycle.min_responding_nodes;
        if consolidated.clients.len() < need {
            let reason = format!(
                "{} of {need} required nodes responded",
                consolidated.clients.len()
            );
            return self.abort(reason, addresses.values().cloned().collect());
        }
        let segments = partition(&consolidated.pairs, &consolidated.clients)?;
        self.set_phase(NodePhase::Dispatching);
        let mut received = BTreeMap::new();
        for seg in &segments {
            if seg.assignee == self.cfg.node_id {
                received.insert(seg.segment_index, reduce_locally(seg)?);
                continue;
            }
            let addr = addresses[&seg.assignee].clone();
            let chunks = chunk_pairs(&seg.pairs, self.cfg.cycle.max_pairs_per_datagram);
            let total = chunks.len() as u32;
            for (part, text) in chunks.into_iter().enumerate() {
                let chunk = SegmentChunk {
                    index: seg.segment_index,
                    part: part as u32,
                    total,
                    checksum: seg.checksum,
                    text,
                };
                self.send(&addr, MessageKind::SegmentAssign, chunk.encode());
            }
        }
        self.state.round = Some(Round {
            consolidated,
            segments,
            addresses,
            received,
        });
        self.set_phase(NodePhase::Merging);
        Ok(())
    }

    fn on_segment_chunk(&mut self, leader_addr: &str, text: &str) {
        if self.phase != NodePhase::AwaitingSegment {
            return;
        }
        let Ok(chunk) = SegmentChunk::decode(text) else {
            return;
        };
        let asm = self.state.assembly.get_or_insert_with(|| Assembly {
            index: chunk.index,
            total: chunk.total,
            checksum: chunk.checksum,
            parts: BTreeMap::new(),
        });
        if (asm.index, asm.total, asm.checksum) != (chunk.index, chunk.total, chunk.checksum) {
            return;
        }
        asm.parts.entry(chunk.part).or_insert(chunk.text);
        if asm.parts.len() as u32 != asm.total {
            return;
        }
        let asm = self.state.assembly.take().expect("assembly present");
        let whole = join_chunks(asm.parts.values().map(String::as_str));
        let segment =
            match Segment::from_wire(self.cfg.node_id, asm.index, whole.as_bytes(), asm.checksum) {
                Ok(s) => s,
                Err(e) => {
                    self.log(EventKind::Rejected {
                        origin: self.cfg.node_id,
                        reason: e.to_string(),
                    });
                    return;
                }
            };
        self.set_phase(NodePhase::Reducing);
        match reduce_locally(&segment) {
            Ok(outcome) => {
                let payload = outcome.to_report().encode();
                self.send(leader_addr, MessageKind::ReduceResult, payload);
            }
            Err(e) => self.log(EventKind::Rejected {
                origin: self.cfg.node_id,
                reason: e.to_string(),
            }),
        }
        self.set_phase(NodePhase::AwaitingResult);
    }

    fn on_reduce_result(&mut self, sender: NodeId, text: &str) {
        if self.phase != NodePhase::Merging {
            return;
        }
        let Some(round) = self.state.round.as_mut() else {
            return;
        };
        let outcome = match ReduceReport::decode(text) {
            Ok(report) => {
                let assigned = round
                    .segments
                    .get(report.index as usize)
                    .is_some_and(|s| s.assignee == sender);
                if !assigned {
                    return;
                }
                SegmentOutcome::from_report(sender, &report)
            }
            Err(e) => {
                self.log(EventKind::Rejected {
                    origin: sender,
                    reason: e.to_string(),
                });
                return;
            }
        };
        round.received.entry(outcome.index).or_insert(outcome);
    }

    fn on_reduce_deadline(&mut self) -> Result<(), RuntimeError> {
        if self.phase != NodePhase::Merging {
            return Ok(());
        }
        let round = self.state.round.take().expect("merging without a round");
        let followers: Vec<String> = round.addresses.values().cloned().collect();
        let finished = finish_round(
            self.cycle,
            &round.consolidated,
            &round.segments,
            &round.received,
            self.cfg.cycle.retry_limit,
        );
        let (result, fallbacks) = match finished {
            Ok(r) => r,
            Err(e @ RuntimeError::IntegrityFailure { .. }) => {
                return self.abort(e.to_string(), followers)
            }
            Err(e) => return Err(e),
        };
        for segment in fallbacks {
            if round.segments[segment as usize].assignee != self.cfg.node_id {
                self.log(EventKind::Fallback { segment });
            }
        }
        self.set_phase(NodePhase::Committing);
        let rows = match self
            .store
            .commit_results(&result, self.cfg.modes, self.now_ms())
        {
            Ok(rows) => rows,
            Err(e @ (StoreError::ConflictingCommit { .. } | StoreError::InvalidRow(_))) => {
                return self.abort(e.to_string(), followers);
            }
            Err(e) => return Err(e.into()),
        };
        self.log(EventKind::Committed {
            readings: result.total_readings,
            rows: rows.len(),
        });
        let watermark = self.store.watermark(self.cfg.node_id);
        if self.buffer.prune_below(watermark) {
            self.log(EventKind::Pruned { through: watermark });
        }
        self.buffer.committed_through = Some(self.cycle);
        self.set_phase(NodePhase::Broadcasting);
        let payload = encode_coverage(&result.coverage);
        for addr in followers {
            self.send(&addr, MessageKind::CycleSuccess, payload.clone());
        }
        self.set_phase(NodePhase::Collecting);
        Ok(())
    }

    /// Gives up on this cycle as leader and runs the election again.
    fn abort(&mut self, reason: String, notify: Vec<String>) -> Result<(), RuntimeError> {
        self.log(EventKind::Aborted {
            reason: reason.clone(),
        });
        for addr in notify {
            self.send(&addr, MessageKind::CycleAbort, reason.clone());
        }
        self.state.round = None;
        self.state.own = None;
        self.set_phase(NodePhase::Electing);
        self.elect_and_probe()
    }

    fn on_cycle_success(&mut self, text: &str) {
        if let Ok(coverage) = decode_coverage(text) {
            let mine = coverage.iter().find(|c| c.origin == self.cfg.node_id);
            if let Some(c) = mine {
                if self.buffer.prune_below(c.to) {
                    self.log(EventKind::Pruned { through: c.to });
                }
            }
            self.buffer.committed_through = Some(self.cycle);
        }
        if matches!(
            self.phase,
            NodePhase::AwaitingSegment | NodePhase::AwaitingResult
        ) {
            self.set_phase(NodePhase::Collecting);
        }
    }
}

fn store_only(e: ElectionError) -> RuntimeError {
    match e {
        ElectionError::Store(s) => RuntimeError::Store(s),
        other => RuntimeError::Store(StoreError::StorageFailure(other.to_string())),
    }
}

//! Multi-node scenarios: traffic, fault injection, metrics and reports.

mod report;
mod scenario;
mod sim;
mod sweep;
mod udp;

pub use report::{emit_report, CycleRow, MetricsReport, SampleRow, SummaryRow, REQUEST_DEFINITION};
pub use scenario::{FaultKind, FaultSpec, ScenarioConfig, Traffic};
pub use sim::{phase_log_is_legal, Simulation};
pub use sweep::{
    cycle_time_csv, cycle_time_sweep, sweep_csv, sweep_load, CycleTimeRow, SweepRow, SWEEP_HEADER,
};
pub use udp::run_udp;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::domain::{NodeId, RoomId, SensorReading, TagCategory};
use crate::runtime::{ClientBuffer, Event, EventKind, NodePhase, RuntimeError};
use crate::simgen::{
    generate_stream, replay_fixture, GenerationLedger, LedgerRecord, SimgenError, VisitorModel,
};
use crate::store::{Store, StoreError};
use crate::transport::{Backend, TransportError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no protocol progress for {quiet_ms} ms at t={at_ms} ms")]
    Deadlock { at_ms: u64, quiet_ms: u64 },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Simgen(#[from] SimgenError),
}

/// How readings find their node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Routing {
    Lowest,
    ByRoom,
    RoundRobin(Vec<NodeId>),
}

#[derive(Debug, Clone)]
pub(crate) struct TrafficPlan {
    /// Arrival time in ms and the reading.
    pub readings: Vec<(u64, SensorReading)>,
    pub routing: Routing,
    pub ledger: GenerationLedger,
}

fn plain_ledger(readings: &[SensorReading]) -> GenerationLedger {
    GenerationLedger {
        records: readings
            .iter()
            .enumerate()
            .map(|(i, r)| LedgerRecord {
                sequence: i as u64,
                tag: r.tag,
                room: r.room,
                timestamp: r.timestamp,
                reader_id: r.reader_id,
                duplicate: false,
            })
            .collect(),
    }
}

pub(crate) fn build_traffic(cfg: &ScenarioConfig) -> Result<TrafficPlan, HarnessError> {
    match &cfg.traffic {
        Traffic::Visitors(model) => {
            let model = VisitorModel {
                seed: cfg.seed,
                ..model.clone()
            };
            let until = cfg.readings_until_ms.unwrap_or(cfg.run_ms());
            let (readings, ledger) = generate_stream(&model, until)?;
            Ok(TrafficPlan {
                readings: readings.into_iter().map(|r| (r.timestamp, r)).collect(),
                routing: Routing::ByRoom,
                ledger,
            })
        }
        Traffic::Fixture(name) => {
            let readings = replay_fixture(name)?;
            Ok(TrafficPlan {
                ledger: plain_ledger(&readings),
                readings: readings.into_iter().map(|r| (r.timestamp, r)).collect(),
                routing: Routing::Lowest,
            })
        }
        Traffic::Load(n) => {
            let c = &cfg.cycle;
            let first = c.settle_ms + 1;
            let span = c.submit_at().saturating_sub(first + 1).max(1);
            let readings: Vec<SensorReading> = (0..*n)
                .map(|i| {
                    let room = RoomId::new((i % 4) as u32 + 1, 4).expect("room 1..=4");
                    SensorReading {
                        tag: TagCategory::ALL[(i % 3) as usize],
                        room,
                        timestamp: first + i * span / n.max(&1),
                        reader_id: 2 * room.get(),
                    }
                })
                .collect();
            let mut followers = cfg.node_ids();
            if followers.len() > 1 {
                followers.pop();
            }
            Ok(TrafficPlan {
                ledger: plain_ledger(&readings),
                readings: readings.into_iter().map(|r| (r.timestamp, r)).collect(),
                routing: Routing::RoundRobin(followers),
            })
        }
    }
}

pub(crate) fn node_seed(seed: u64, incarnation: u32) -> u64 {
    seed ^ u64::from(incarnation).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// End-of-run state of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeView {
    pub id: NodeId,
    pub alive: bool,
    pub phase: Option<NodePhase>,
    pub leader: Option<NodeId>,
    pub pending: usize,
}

/// Ledger against store: every genuine reading is committed, still
/// buffered on some node, or was generated while no node was up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconciliation {
    pub generated: usize,
    pub duplicates_dropped: usize,
    pub committed: usize,
    pub pending: usize,
    pub undeliverable: usize,
    /// Multiset equality of (tag, room, timestamp) across the three groups
    /// and the ledger, plus committed aggregates matching the committed
    /// readings.
    pub exact: bool,
}

pub struct ScenarioOutcome {
    pub report: MetricsReport,
    pub store: Arc<Store>,
    pub events: Vec<Event>,
    pub nodes: Vec<NodeView>,
    /// Buffers of every node, live or on the disk of a dead one.
    pub buffers: BTreeMap<NodeId, ClientBuffer>,
    pub ledger: GenerationLedger,
    pub undeliverable: Vec<SensorReading>,
    pub end_us: u64,
}

type ReadingKey = (TagCategory, u32, u64);

fn key(r: &SensorReading) -> ReadingKey {
    (r.tag, r.room.get(), r.timestamp)
}

impl ScenarioOutcome {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        cfg: &ScenarioConfig,
        events: Vec<Event>,
        store: Arc<Store>,
        nodes: Vec<NodeView>,
        buffers: BTreeMap<NodeId, ClientBuffer>,
        plan: TrafficPlan,
        undeliverable: Vec<SensorReading>,
        end_us: u64,
    ) -> Self {
        ScenarioOutcome {
            report: MetricsReport::from_events(&events, &cfg.cycle),
            store,
            events,
            nodes,
            buffers,
            ledger: plan.ledger,
            undeliverable,
            end_us,
        }
    }

    /// Every accepted reading by `(origin, seq)`, from the event log.
    pub fn accepted(&self) -> BTreeMap<(u32, u64), SensorReading> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Accepted { seq, reading } => Some(((e.node, seq), reading)),
                _ => None,
            })
            .collect()
    }

    /// The readings behind every committed coverage range.
    pub fn committed_readings(&self) -> Vec<SensorReading> {
        let accepted = self.accepted();
        self.store
            .coverage()
            .into_iter()
            .flat_map(|(_, c)| (c.from..c.to).map(move |seq| (c.origin.get(), seq)))
            .map(|k| *accepted.get(&k).expect("committed reading was accepted"))
            .collect()
    }

    pub fn pending_readings(&self) -> Vec<SensorReading> {
        self.buffers.values().flat_map(|b| b.pending().2).collect()
    }

    pub fn reconcile(&self) -> Reconciliation {
        let committed = self.committed_readings();
        let pending = self.pending_readings();
        let mut expected: Vec<ReadingKey> = self
            .ledger
            .genuine()
            .map(|l| (l.tag, l.room.get(), l.timestamp))
            .collect();
        let mut seen: Vec<ReadingKey> = committed
            .iter()
            .chain(&pending)
            .chain(&self.undeliverable)
            .map(key)
            .collect();
        expected.sort();
        seen.sort();
        let oracle_visitor =
            crate::mapreduce::sequential_oracle(&committed, crate::domain::CountMode::Visitor);
        let oracle_room =
            crate::mapreduce::sequential_oracle(&committed, crate::domain::CountMode::Room);
        let totals_ok = |mode, oracle: &BTreeMap<String, u64>| {
            let t = self.store.totals(mode);
            t.is_empty() || &t == oracle
        };
        Reconciliation {
            generated: expected.len(),
            duplicates_dropped: self.ledger.duplicates(),
            committed: committed.len(),
            pending: pending.len(),
            undeliverable: self.undeliverable.len(),
            exact: expected == seen
                && totals_ok(crate::domain::CountMode::Visitor, &oracle_visitor)
                && totals_ok(crate::domain::CountMode::Room, &oracle_room),
        }
    }
}

/// Runs a scenario on the backend it names.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, HarnessError> {
    match cfg.net.mode {
        Backend::Simulated => {
            let mut sim = Simulation::new(cfg.clone())?;
            sim.run_to_end()?;
            Ok(sim.finish())
        }
        Backend::Udp => run_udp(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CountMode, ModeSet};

    fn table1(nodes: u32) -> ScenarioConfig {
        ScenarioConfig {
            node_count: nodes,
            traffic: Traffic::Fixture("table1".into()),
            cycles_to_run: 1,
            ..Default::default()
        }
    }

    #[test]
    fn table1_three_nodes_commits_the_visitor_counts() {
        let out = run_scenario(&table1(3)).unwrap();
        let expect: BTreeMap<String, u64> = [("man", 10), ("other", 12), ("woman", 21)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        assert_eq!(out.store.totals(CountMode::Visitor), expect);
        assert_eq!(out.store.committed_cycles(), vec![0]);
        assert!(out.buffers.values().all(|b| b.is_empty()));
        assert!(phase_log_is_legal(&out.events));
        let r = out.reconcile();
        assert!(r.exact, "{r:?}");
        assert_eq!(r.committed, 16);
    }

    #[test]
    fn single_node_never_commits() {
        let mut cfg = table1(1);
        cfg.cycles_to_run = 3;
        let out = run_scenario(&cfg).unwrap();
        assert!(out.store.committed_cycles().is_empty());
        assert!(out
            .events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Aborted { .. })));
        assert_eq!(out.buffers.values().map(|b| b.len()).sum::<usize>(), 16);
    }

    #[test]
    fn visitor_only_mode_writes_visitor_rows() {
        let mut cfg = table1(3);
        cfg.modes = ModeSet::only(CountMode::Visitor);
        let out = run_scenario(&cfg).unwrap();
        assert!(out
            .store
            .result_rows()
            .iter()
            .all(|r| r.mode == CountMode::Visitor));
        assert_eq!(out.store.result_rows().len(), 3);
    }

    #[test]
    fn leader_kill_loses_nothing() {
        let cfg = ScenarioConfig {
            node_count: 4,
            cycles_to_run: 3,
            drain_cycles: 3,
            readings_until_ms: Some(3000),
            faults: vec!["kill_leader@3000".parse().unwrap()],
            ..Default::default()
        };
        let out = run_scenario(&cfg).unwrap();
        let r = out.reconcile();
        assert!(r.exact, "{r:?}");
        assert!(r.generated > 0);
        assert!(phase_log_is_legal(&out.events));
        let dead: usize = out
            .nodes
            .iter()
            .filter(|n| !n.alive)
            .map(|n| n.pending)
            .sum();
        assert_eq!(r.pending, dead, "only the dead node still holds readings");
        let nodes: Vec<_> = out
            .nodes
            .iter()
            .filter(|n| n.alive)
            .map(|n| n.leader)
            .collect();
        assert!(nodes.iter().all(|l| *l == NodeId::new(3).ok()), "{nodes:?}");
    }

    #[test]
    fn total_loss_aborts_and_keeps_electing() {
        let cfg = ScenarioConfig {
            node_count: 2,
            cycles_to_run: 12,
            faults: vec!["set_loss:1.0@0".parse().unwrap()],
            ..Default::default()
        };
        let out = run_scenario(&cfg).unwrap();
        assert!(out.store.committed_cycles().is_empty());
        let elections = out
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Elected { .. }))
            .count();
        assert!(elections >= 24);
    }

    #[test]
    fn restarted_node_drains_its_disk_buffer() {
        let cfg = ScenarioConfig {
            node_count: 4,
            cycles_to_run: 4,
            drain_cycles: 4,
            readings_until_ms: Some(3000),
            faults: vec![
                "kill_leader@3000".parse().unwrap(),
                "restart_node:4@5000".parse().unwrap(),
            ],
            ..Default::default()
        };
        let out = run_scenario(&cfg).unwrap();
        let r = out.reconcile();
        assert!(r.exact, "{r:?}");
        assert_eq!(r.pending, 0, "{r:?}");
        assert_eq!(r.committed, r.generated);
    }

    #[test]
    fn suspected_leaders_stay_excluded_across_cycles() {
        let cfg = ScenarioConfig {
            node_count: 5,
            cycles_to_run: 4,
            faults: vec![
                "kill_leader@3000".parse().unwrap(),
                "kill_leader@5000".parse().unwrap(),
            ],
            ..Default::default()
        };
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run_until(6_999_000).unwrap();
        assert_eq!(sim.leaders(), vec![NodeId::new(3).unwrap()]);
        let probes_of_five = sim
            .events()
            .iter()
            .filter(|e| {
                e.at_us > 6_000_000
                    && matches!(e.kind, EventKind::ProbeFailed { target } if target.get() == 5)
            })
            .count();
        assert_eq!(probes_of_five, 0);
    }
}

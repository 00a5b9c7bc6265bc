//! The shared results database.
//!
//! Two logical tables: `nodes (node_id INTEGER PRIMARY KEY, network_props
//! VARCHAR)` and `results (cycle_id, mode, key, count, committed_at)`. Each
//! commit also records which per-node reading ranges it covered so that a
//! reading is never counted twice across retried cycles. The default
//! backend is an append-only journal file (see [`journal`]); an in-memory
//! store offers the same interface for simulations.
//!
//! All writes go through one lock and are journaled as a single
//! transaction before the in-memory view changes. Readers copy out under
//! the same lock, so they never observe a half-applied write.

pub mod journal;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use thiserror::Error;

use crate::domain::{CountMode, ModeSet, NodeId};
use crate::election::{NodeRecord, RegistrySnapshot};
use crate::mapreduce::{Coverage, CycleResult};
use journal::Journal;

/// Journal records written before an automatic compaction.
pub const DEFAULT_COMPACT_EVERY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("cycle {cycle_id} already committed differently: {reason}")]
    ConflictingCommit { cycle_id: u32, reason: String },
    #[error("invalid row: {0}")]
    InvalidRow(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTableRow {
    pub node_id: u32,
    /// `host:port;role;last_seen_ms`
    pub network_props: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultTableRow {
    pub cycle_id: u32,
    pub mode: CountMode,
    pub key: String,
    pub count: u64,
    pub committed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CommitEntry {
    rows: Vec<ResultTableRow>,
    coverage: Vec<Coverage>,
}

impl CommitEntry {
    fn same_content(&self, rows: &[ResultTableRow], coverage: &[Coverage]) -> bool {
        self.coverage == coverage
            && self.rows.len() == rows.len()
            && self.rows.iter().zip(rows).all(|(a, b)| {
                (a.cycle_id, a.mode, &a.key, a.count) == (b.cycle_id, b.mode, &b.key, b.count)
            })
    }
}

#[derive(Default)]
struct Tables {
    nodes: BTreeMap<u32, NodeTableRow>,
    commits: BTreeMap<u32, CommitEntry>,
    watermarks: BTreeMap<NodeId, u64>,
}

impl Tables {
    fn apply(&mut self, lines: &[String]) -> Result<(), StoreError> {
        let mut commit: Option<(u32, CommitEntry)> = None;
        for line in lines {
            let (table, fields) = line
                .split_once('|')
                .ok_or_else(|| StoreError::InvalidRow(line.clone()))?;
            let bad = || StoreError::InvalidRow(line.clone());
            match table {
                "NODE" => {
                    let (id, props) = fields.split_once(',').ok_or_else(bad)?;
                    let node_id = id.parse().map_err(|_| bad())?;
                    self.nodes.insert(
                        node_id,
                        NodeTableRow {
                            node_id,
                            network_props: props.to_string(),
                        },
                    );
                }
                "COMMIT" => {
                    let cycle = fields.parse().map_err(|_| bad())?;
                    commit = Some((
                        cycle,
                        CommitEntry {
                            rows: Vec::new(),
                            coverage: Vec::new(),
                        },
                    ));
                }
                "RESULT" => {
                    let f: Vec<&str> = fields.split(',').collect();
                    let [cycle, mode, key, count, at] = f[..] else {
                        return Err(bad());
                    };
                    let row = ResultTableRow {
                        cycle_id: cycle.parse().map_err(|_| bad())?,
                        mode: mode.parse().map_err(|_| bad())?,
                        key: key.to_string(),
                        count: count.parse().map_err(|_| bad())?,
                        committed_at: at.parse().map_err(|_| bad())?,
                    };
                    commit.as_mut().ok_or_else(bad)?.1.rows.push(row);
                }
                "COVER" => {
                    let f: Vec<&str> = fields.split(',').collect();
                    let [_, origin, from, to] = f[..] else {
                        return Err(bad());
                    };
                    let origin = origin
                        .parse()
                        .ok()
                        .and_then(|n| NodeId::new(n).ok())
                        .ok_or_else(bad)?;
                    let cov = Coverage {
                        origin,
                        from: from.parse().map_err(|_| bad())?,
                        to: to.parse().map_err(|_| bad())?,
                    };
                    commit.as_mut().ok_or_else(bad)?.1.coverage.push(cov);
                }
                _ => return Err(bad()),
            }
        }
        if let Some((cycle, entry)) = commit {
            for c in &entry.coverage {
                let w = self.watermarks.entry(c.origin).or_insert(0);
                *w = (*w).max(c.to);
            }
            self.commits.insert(cycle, entry);
        }
        Ok(())
    }

    fn as_transactions(&self) -> Vec<Vec<String>> {
        let mut txs = Vec::new();
        if !self.nodes.is_empty() {
            txs.push(self.nodes.values().map(node_line).collect());
        }
        for (cycle, entry) in &self.commits {
            txs.push(commit_lines(*cycle, &entry.rows, &entry.coverage));
        }
        txs
    }
}

fn node_line(row: &NodeTableRow) -> String {
    format!("NODE|{},{}", row.node_id, row.network_props)
}

fn commit_lines(cycle: u32, rows: &[ResultTableRow], coverage: &[Coverage]) -> Vec<String> {
    let mut lines = vec![format!("COMMIT|{cycle}")];
    lines.extend(rows.iter().map(|r| {
        format!(
            "RESULT|{},{},{},{},{}",
            r.cycle_id, r.mode, r.key, r.count, r.committed_at
        )
    }));
    lines.extend(
        coverage
            .iter()
            .map(|c| format!("COVER|{cycle},{},{},{}", c.origin, c.from, c.to)),
    );
    lines
}

struct Inner {
    tables: Tables,
    journal: Option<Journal>,
    compact_every: usize,
}

impl Inner {
    fn write(&mut self, lines: Vec<String>) -> Result<(), StoreError> {
        if let Some(j) = self.journal.as_mut() {
            j.append(&lines)?;
        }
        self.tables.apply(&lines)?;
        if let Some(j) = self.journal.as_mut() {
            if j.records_since_compact >= self.compact_every {
                let txs = self.tables.as_transactions();
                j.rewrite(&txs)?;
            }
        }
        Ok(())
    }
}

/// Single-writer, multi-reader store.
pub struct Store {
    inner: Mutex<Inner>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store {
            inner: Mutex::new(Inner {
                tables: Tables::default(),
                journal: None,
                compact_every: DEFAULT_COMPACT_EVERY,
            }),
        }
    }

    /// Opens or creates a journal-backed store, replaying committed
    /// transactions.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let (journal, txs) = Journal::open(path.as_ref())?;
        let mut tables = Tables::default();
        for tx in &txs {
            tables.apply(tx)?;
        }
        Ok(Store {
            inner: Mutex::new(Inner {
                tables,
                journal: Some(journal),
                compact_every: DEFAULT_COMPACT_EVERY,
            }),
        })
    }

    pub fn with_compaction_every(self, records: usize) -> Self {
        self.lock().compact_every = records.max(1);
        self
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Insert-or-update by `node_id`.
    pub fn upsert_node(&self, row: NodeTableRow) -> Result<NodeTableRow, StoreError> {
        self.upsert_nodes(vec![row.clone()])?;
        Ok(row)
    }

    /// Writes several node rows in one transaction.
    pub fn upsert_nodes(&self, rows: Vec<NodeTableRow>) -> Result<(), StoreError> {
        for r in &rows {
            NodeRecord::from_row(r)?;
        }
        let lines = rows.iter().map(node_line).collect();
        self.lock().write(lines)
    }

    /// Reads the node table and writes the rows returned by `f` in one
    /// transaction, with no other writer in between.
    pub fn transact_nodes<T, E>(
        &self,
        f: impl FnOnce(&[NodeTableRow]) -> Result<(Vec<NodeTableRow>, T), E>,
    ) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut inner = self.lock();
        let current: Vec<NodeTableRow> = inner.tables.nodes.values().cloned().collect();
        let (rows, out) = f(&current)?;
        for r in &rows {
            NodeRecord::from_row(r)?;
        }
        if !rows.is_empty() {
            inner.write(rows.iter().map(node_line).collect())?;
        }
        Ok(out)
    }

    pub fn node_rows(&self) -> Vec<NodeTableRow> {
        self.lock().tables.nodes.values().cloned().collect()
    }

    /// Point-in-time view of the node table.
    pub fn snapshot_nodes(&self, taken_at: u64) -> Result<RegistrySnapshot, StoreError> {
        let rows = self.node_rows();
        let records = rows
            .iter()
            .map(NodeRecord::from_row)
            .collect::<Result<_, _>>()?;
        Ok(RegistrySnapshot { records, taken_at })
    }

    /// Writes the result rows of `result` for the enabled modes, plus its
    /// coverage, as one transaction.
    ///
    /// Re-committing identical content is a no-op that returns the stored
    /// rows. Different content for a committed cycle, or coverage that does
    /// not start exactly at a node's current watermark, is a conflict.
    pub fn commit_results(
        &self,
        result: &CycleResult,
        modes: ModeSet,
        committed_at: u64,
    ) -> Result<Vec<ResultTableRow>, StoreError> {
        if !result.is_consistent() {
            return Err(StoreError::InvalidRow(format!(
                "cycle {} aggregates violate conservation",
                result.cycle_id
            )));
        }
        let cycle_id = result.cycle_id;
        let mut rows = Vec::new();
        if modes.visitor {
            rows.extend(
                result
                    .visitor_aggregates
                    .iter()
                    .map(|(tag, n)| ResultTableRow {
                        cycle_id,
                        mode: CountMode::Visitor,
                        key: tag.as_str().to_string(),
                        count: *n,
                        committed_at,
                    }),
            );
        }
        if modes.room {
            rows.extend(
                result
                    .room_aggregates
                    .iter()
                    .map(|(room, n)| ResultTableRow {
                        cycle_id,
                        mode: CountMode::Room,
                        key: room.key(),
                        count: *n,
                        committed_at,
                    }),
            );
        }
        let mut coverage: Vec<Coverage> = result
            .coverage
            .iter()
            .filter(|c| !c.is_empty())
            .copied()
            .collect();
        coverage.sort();

        let mut inner = self.lock();
        if let Some(existing) = inner.tables.commits.get(&cycle_id) {
            if existing.same_content(&rows, &coverage) {
                return Ok(existing.rows.clone());
            }
            return Err(StoreError::ConflictingCommit {
                cycle_id,
                reason: "different rows or coverage".into(),
            });
        }
        for c in &coverage {
            let w = inner.tables.watermarks.get(&c.origin).copied().unwrap_or(0);
            if c.from != w || c.to < c.from {
                return Err(StoreError::ConflictingCommit {
                    cycle_id,
                    reason: format!(
                        "node {} readings {}..{} do not continue from watermark {w}",
                        c.origin, c.from, c.to
                    ),
                });
            }
        }
        inner.write(commit_lines(cycle_id, &rows, &coverage))?;
        Ok(rows)
    }

    /// Sequence number of the first reading from `origin` not yet covered
    /// by any commit.
    pub fn watermark(&self, origin: NodeId) -> u64 {
        self.lock()
            .tables
            .watermarks
            .get(&origin)
            .copied()
            .unwrap_or(0)
    }

    pub fn result_rows(&self) -> Vec<ResultTableRow> {
        self.lock()
            .tables
            .commits
            .values()
            .flat_map(|c| c.rows.iter().cloned())
            .collect()
    }

    pub fn committed_cycles(&self) -> Vec<u32> {
        self.lock().tables.commits.keys().copied().collect()
    }

    pub fn coverage(&self) -> Vec<(u32, Coverage)> {
        self.lock()
            .tables
            .commits
            .iter()
            .flat_map(|(cycle, c)| c.coverage.iter().map(move |cov| (*cycle, *cov)))
            .collect()
    }

    /// Sum of committed counts per key across all cycles.
    pub fn totals(&self, mode: CountMode) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for r in self.result_rows().into_iter().filter(|r| r.mode == mode) {
            *out.entry(r.key).or_insert(0) += r.count;
        }
        out
    }

    /// Canonical text rendering of both tables and the coverage log.
    pub fn dump(&self) -> String {
        let inner = self.lock();
        let mut out = String::new();
        for row in inner.tables.nodes.values() {
            let _ = writeln!(out, "node {} {}", row.node_id, row.network_props);
        }
        for (cycle, entry) in &inner.tables.commits {
            for r in &entry.rows {
                let _ = writeln!(
                    out,
                    "result {cycle} {} {} {} @{}",
                    r.mode, r.key, r.count, r.committed_at
                );
            }
            for c in &entry.coverage {
                let _ = writeln!(out, "cover {cycle} {} {}..{}", c.origin, c.from, c.to);
            }
        }
        out
    }

    /// Rewrites the journal down to the current state. No-op in memory.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let txs = inner.tables.as_transactions();
        match inner.journal.as_mut() {
            Some(j) => j.rewrite(&txs),
            None => Ok(()),
        }
    }
}

/// Reference DDL for an external SQL backend with the same schema.
pub const SQL_SCHEMA: &str = include_str!("../../sql/schema.sql");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{RoomId, TagCategory};

    fn table1_result(cycle_id: u32) -> CycleResult {
        let room = |n| RoomId::new(n, 4).unwrap();
        CycleResult {
            cycle_id,
            visitor_aggregates: BTreeMap::from([
                (TagCategory::Man, 10),
                (TagCategory::Woman, 21),
                (TagCategory::Other, 12),
            ]),
            room_aggregates: BTreeMap::from([
                (room(1), 2),
                (room(2), 5),
                (room(3), 5),
                (room(4), 4),
            ]),
            total_readings: 16,
            coverage: vec![Coverage {
                origin: NodeId::new(1).unwrap(),
                from: 0,
                to: 16,
            }],
        }
    }

    fn row(id: u32, props: &str) -> NodeTableRow {
        NodeTableRow {
            node_id: id,
            network_props: props.to_string(),
        }
    }

    #[test]
    fn upsert_semantics() {
        let store = Store::in_memory();
        store
            .upsert_node(row(7, "10.0.0.7:7000;follower;0"))
            .unwrap();
        assert_eq!(store.snapshot_nodes(0).unwrap().records.len(), 1);
        store
            .upsert_node(row(7, "10.0.0.7:7000;follower;99"))
            .unwrap();
        let snap = store.snapshot_nodes(100).unwrap();
        assert_eq!(snap.records.len(), 1);
        assert_eq!(snap.records[0].last_seen, 99);
        assert_eq!(snap.taken_at, 100);
        assert!(store.upsert_node(row(8, "garbage")).is_err());
    }

    #[test]
    fn snapshot_of_empty_and_two_nodes() {
        let store = Store::in_memory();
        assert!(store.snapshot_nodes(0).unwrap().records.is_empty());
        store.upsert_node(row(2, "a:1;follower;0")).unwrap();
        store.upsert_node(row(5, "b:1;leader;0")).unwrap();
        let ids: Vec<u32> = store
            .snapshot_nodes(0)
            .unwrap()
            .records
            .iter()
            .map(|r| r.node_id.get())
            .collect();
        assert_eq!(ids, vec![2, 5]);
    }

    #[test]
    fn commit_shapes_idempotence_and_conflict() {
        let store = Store::in_memory();
        let rows = store
            .commit_results(&table1_result(1), ModeSet::BOTH, 10)
            .unwrap();
        assert_eq!(
            rows.iter().filter(|r| r.mode == CountMode::Visitor).count(),
            3
        );
        assert_eq!(rows.iter().filter(|r| r.mode == CountMode::Room).count(), 4);
        let before = store.dump();
        let again = store
            .commit_results(&table1_result(1), ModeSet::BOTH, 99)
            .unwrap();
        assert_eq!(again, rows);
        assert_eq!(store.dump(), before);

        let mut different = table1_result(1);
        *different
            .visitor_aggregates
            .get_mut(&TagCategory::Man)
            .unwrap() = 11;
        different
            .room_aggregates
            .insert(RoomId::new(1, 4).unwrap(), 2);
        assert!(matches!(
            store.commit_results(&different, ModeSet::BOTH, 0),
            Err(StoreError::ConflictingCommit { .. }) | Err(StoreError::InvalidRow(_))
        ));
        assert_eq!(store.watermark(NodeId::new(1).unwrap()), 16);
    }

    #[test]
    fn coverage_must_continue_from_watermark() {
        let store = Store::in_memory();
        store
            .commit_results(&table1_result(1), ModeSet::BOTH, 0)
            .unwrap();
        // Same readings again under a new cycle id: a double count.
        let err = store
            .commit_results(&table1_result(2), ModeSet::BOTH, 0)
            .unwrap_err();
        assert!(matches!(
            err,
            StoreError::ConflictingCommit { cycle_id: 2, .. }
        ));
        assert_eq!(store.committed_cycles(), vec![1]);
    }

    #[test]
    fn mode_selection_filters_rows() {
        let store = Store::in_memory();
        let rows = store
            .commit_results(&table1_result(3), ModeSet::only(CountMode::Visitor), 0)
            .unwrap();
        assert!(rows.iter().all(|r| r.mode == CountMode::Visitor));
        assert_eq!(
            store.totals(CountMode::Visitor),
            BTreeMap::from([
                ("man".into(), 10),
                ("other".into(), 12),
                ("woman".into(), 21)
            ])
        );
    }

    #[test]
    fn inconsistent_result_rejected() {
        let store = Store::in_memory();
        let mut r = table1_result(1);
        r.total_readings = 15;
        assert!(matches!(
            store.commit_results(&r, ModeSet::BOTH, 0),
            Err(StoreError::InvalidRow(_))
        ));
    }

    #[test]
    fn schema_reference_has_both_tables() {
        assert!(SQL_SCHEMA.contains("CREATE TABLE nodes"));
        assert!(SQL_SCHEMA.contains("CREATE TABLE results"));
    }
}

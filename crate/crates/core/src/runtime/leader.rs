//! Leader-side steps of a cycle as pure functions.

use std::collections::BTreeMap;

use crate::domain::{CountMode, KeyValuePair, NodeId};
use crate::mapreduce::{
    merge_partials, partition, reduce_pairs, reduce_segment, room_view, sort_pairs, Coverage,
    CycleResult, PartialResult, Segment,
};

use super::{CycleConfig, ReduceReport, RuntimeError};

/// One node's contribution to a cycle: its sorted visitor pairs for the
/// reading range `[from, to)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submission {
    pub origin: NodeId,
    pub from: u64,
    pub to: u64,
    pub pairs: Vec<KeyValuePair>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Consolidated {
    /// Every submitted pair in global sort order.
    pub pairs: Vec<KeyValuePair>,
    /// Responding nodes in ascending id order.
    pub clients: Vec<NodeId>,
    pub coverage: Vec<Coverage>,
}

/// Merges submissions into one sorted list. A later submission from the
/// same origin replaces an earlier one.
pub fn consolidate(submissions: &[Submission]) -> Consolidated {
    let mut by_origin: BTreeMap<NodeId, &Submission> = BTreeMap::new();
    for s in submissions {
        by_origin.insert(s.origin, s);
    }
    let pairs = sort_pairs(
        by_origin
            .values()
            .flat_map(|s| s.pairs.iter().cloned())
            .collect(),
    );
    Consolidated {
        pairs,
        clients: by_origin.keys().copied().collect(),
        coverage: by_origin
            .values()
            .map(|s| Coverage {
                origin: s.origin,
                from: s.from,
                to: s.to,
            })
            .collect(),
    }
}

/// Reduced output for one segment in both modes, with whether its
/// checksum verified on receipt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentOutcome {
    pub index: u32,
    pub verified: bool,
    pub visitor: PartialResult,
    pub room: PartialResult,
}

impl SegmentOutcome {
    /// Rebuilds an outcome from a received report. Keys outside their mode
    /// leave the outcome unverified.
    pub fn from_report(assignee: NodeId, report: &ReduceReport) -> Self {
        let visitor = reduce_pairs(assignee, &report.visitor, CountMode::Visitor);
        let room = reduce_pairs(assignee, &report.room, CountMode::Room);
        let verified = visitor.is_ok() && room.is_ok();
        let empty = |mode| PartialResult {
            assignee,
            mode,
            aggregates: BTreeMap::new(),
            input_pair_count: 0,
        };
        let with_count = |mut p: PartialResult| {
            p.input_pair_count = report.count;
            p
        };
        SegmentOutcome {
            index: report.index,
            verified,
            visitor: visitor
                .map(with_count)
                .unwrap_or_else(|_| empty(CountMode::Visitor)),
            room: room
                .map(with_count)
                .unwrap_or_else(|_| empty(CountMode::Room)),
        }
    }

    pub fn to_report(&self) -> ReduceReport {
        let pairs = |p: &PartialResult| {
            p.aggregates
                .iter()
                .map(|(k, v)| KeyValuePair::new(k.clone(), *v).expect("reduced keys are valid"))
                .collect()
        };
        ReduceReport {
            index: self.index,
            count: self.visitor.input_pair_count,
            visitor: pairs(&self.visitor),
            room: pairs(&self.room),
        }
    }
}

/// Reduces a segment in both modes on this node.
pub fn reduce_locally(segment: &Segment) -> Result<SegmentOutcome, RuntimeError> {
    let visitor = reduce_segment(segment, CountMode::Visitor)?;
    let room = reduce_pairs(
        segment.assignee,
        &room_view(&segment.pairs),
        CountMode::Room,
    )?;
    Ok(SegmentOutcome {
        index: segment.segment_index,
        verified: true,
        visitor,
        room,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrity {
    Intact,
    Corrupt,
}

/// Intact iff every partial verified and the partials account for exactly
/// the dispatched pairs in both modes.
pub fn integrity_check(dispatched: u64, outcomes: &[SegmentOutcome]) -> Integrity {
    if outcomes.iter().any(|o| !o.verified) {
        return Integrity::Corrupt;
    }
    let visitor: u64 = outcomes.iter().map(|o| o.visitor.input_pair_count).sum();
    let room: u64 = outcomes.iter().map(|o| o.room.input_pair_count).sum();
    if visitor == dispatched && room == dispatched {
        Integrity::Intact
    } else {
        Integrity::Corrupt
    }
}

/// Turns the partials gathered for `segments` into a result. Missing or
/// untrustworthy partials are replaced by local reductions; on a failed
/// check the next attempt reduces every segment locally. Returns the
/// result and the segments that fell back.
pub(crate) fn finish_round(
    cycle_id: u32,
    consolidated: &Consolidated,
    segments: &[Segment],
    received: &BTreeMap<u32, SegmentOutcome>,
    retry_limit: u32,
) -> Result<(CycleResult, Vec<u32>), RuntimeError> {
    let dispatched = consolidated.pairs.len() as u64;
    for attempt in 0..retry_limit.max(1) {
        let mut outcomes = Vec::with_capacity(segments.len());
        let mut fallbacks = Vec::new();
        for seg in segments {
            let remote = received.get(&seg.segment_index).filter(|o| {
                attempt == 0
                    && o.verified
                    && o.visitor.input_pair_count == seg.pairs.len() as u64
                    && o.room.input_pair_count == seg.pairs.len() as u64
            });
            match remote {
                Some(o) => outcomes.push(o.clone()),
                None => {
                    outcomes.push(reduce_locally(seg)?);
                    fallbacks.push(seg.segment_index);
                }
            }
        }
        if integrity_check(dispatched, &outcomes) == Integrity::Corrupt {
            continue;
        }
        let visitor: Vec<PartialResult> = outcomes.iter().map(|o| o.visitor.clone()).collect();
        let room: Vec<PartialResult> = outcomes.iter().map(|o| o.room.clone()).collect();
        let result = CycleResult::from_merged(
            cycle_id,
            &merge_partials(&visitor, CountMode::Visitor)?,
            &merge_partials(&room, CountMode::Room)?,
            consolidated.coverage.clone(),
        )?;
        if result.is_consistent() {
            return Ok((result, fallbacks));
        }
    }
    Err(RuntimeError::IntegrityFailure { cycle_id })
}

/// One leader cycle without a network: consolidate, partition, hand each
/// segment to `remote` (which may return nothing, as if the partial were
/// lost), then merge with local fallback.
pub fn leader_cycle(
    cycle_id: u32,
    submissions: &[Submission],
    config: &CycleConfig,
    mut remote: impl FnMut(&Segment) -> Option<SegmentOutcome>,
) -> Result<CycleResult, RuntimeError> {
    let consolidated = consolidate(submissions);
    if consolidated.clients.len() < config.min_responding_nodes {
        return Err(RuntimeError::TooFewResponders {
            got: consolidated.clients.len(),
            need: config.min_responding_nodes,
        });
    }
    let segments = partition(&consolidated.pairs, &consolidated.clients)?;
    let received = segments
        .iter()
        .filter_map(|s| remote(s).map(|o| (s.segment_index, o)))
        .collect();
    finish_round(
        cycle_id,
        &consolidated,
        &segments,
        &received,
        config.retry_limit,
    )
    .map(|(r, _)| r)
}

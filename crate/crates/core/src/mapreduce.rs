//! Map, sort, partition and reduce over sensor readings in both counting
//! modes, plus a single-pass reference used to validate the distributed path.
//!
//! The canonical text form of a pair list is `key=value` entries joined by
//! commas with no whitespace (`man=1,man=3`). Segment checksums are CRC-64
//! (ECMA-182 polynomial) over that text.

use std::collections::BTreeMap;

use crc::{Crc, CRC_64_ECMA_182};
use thiserror::Error;

use crate::domain::{
    pair_order, CountMode, DomainError, KeyValuePair, NodeId, RoomId, SensorReading, TagCategory,
};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapReduceError {
    #[error("no clients to partition across")]
    NoClients,
    #[error("client {0} listed twice")]
    DuplicateClient(NodeId),
    #[error("segment {segment_index} checksum mismatch: expected {expected:016x}, computed {computed:016x}")]
    ChecksumMismatch {
        segment_index: u32,
        expected: u64,
        computed: u64,
    },
    #[error("partials disagree on mode: {0} vs {1}")]
    ModeMismatch(CountMode, CountMode),
    #[error("key {key:?} is not valid in {mode} mode")]
    KeyOutsideMode { key: String, mode: CountMode },
    #[error("segment payload is not valid UTF-8")]
    NotUtf8,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Canonical `key=value,key=value` serialization.
pub fn serialize_pairs(pairs: &[KeyValuePair]) -> String {
    let mut out = String::with_capacity(pairs.len() * 8);
    for (i, p) in pairs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&p.key);
        out.push('=');
        out.push_str(&p.value.to_string());
    }
    out
}

/// Inverse of [`serialize_pairs`]. Also accepts the spaced form
/// `man = 1, man = 3` used in console output.
pub fn parse_pairs(text: &str) -> Result<Vec<KeyValuePair>, DomainError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(|chunk| chunk.parse()).collect()
}

pub fn map_reading(reading: &SensorReading, mode: CountMode) -> KeyValuePair {
    match mode {
        CountMode::Visitor => KeyValuePair::tag(reading.tag, u64::from(reading.room.get())),
        CountMode::Room => KeyValuePair::room(reading.room, 1),
    }
}

/// Stable sort under [`pair_order`].
pub fn sort_pairs(mut pairs: Vec<KeyValuePair>) -> Vec<KeyValuePair> {
    pairs.sort_by(pair_order);
    pairs
}

/// Rewrites visitor-mode pairs (`tag=room`) as room-mode pairs (`RoomN=1`),
/// sorted. Pairs whose value is not a room number are dropped.
pub fn room_view(visitor_pairs: &[KeyValuePair]) -> Vec<KeyValuePair> {
    let pairs = visitor_pairs
        .iter()
        .filter_map(|p| {
            let room = u32::try_from(p.value).ok().filter(|r| *r > 0)?;
            Some(KeyValuePair {
                key: format!("Room{room}"),
                value: 1,
            })
        })
        .collect();
    sort_pairs(pairs)
}

/// A contiguous slice of the consolidated list assigned to one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub assignee: NodeId,
    pub pairs: Vec<KeyValuePair>,
    pub segment_index: u32,
    pub checksum: u64,
}

impl Segment {
    pub fn new(assignee: NodeId, segment_index: u32, pairs: Vec<KeyValuePair>) -> Self {
        let checksum = checksum(serialize_pairs(&pairs).as_bytes());
        Segment {
            assignee,
            pairs,
            segment_index,
            checksum,
        }
    }

    pub fn serialized(&self) -> String {
        serialize_pairs(&self.pairs)
    }

    pub fn verify(&self) -> Result<(), MapReduceError> {
        let computed = checksum(self.serialized().as_bytes());
        if computed != self.checksum {
            return Err(MapReduceError::ChecksumMismatch {
                segment_index: self.segment_index,
                expected: self.checksum,
                computed,
            });
        }
        Ok(())
    }

    /// Rebuilds a segment from its received text form, checking the
    /// checksum on the raw bytes before parsing anything.
    pub fn from_wire(
        assignee: NodeId,
        segment_index: u32,
        bytes: &[u8],
        expected_checksum: u64,
    ) -> Result<Self, MapReduceError> {
        let computed = checksum(bytes);
        if computed != expected_checksum {
            return Err(MapReduceError::ChecksumMismatch {
                segment_index,
                expected: expected_checksum,
                computed,
            });
        }
        let text = std::str::from_utf8(bytes).map_err(|_| MapReduceError::NotUtf8)?;
        Ok(Segment {
            assignee,
            pairs: parse_pairs(text)?,
            segment_index,
            checksum: expected_checksum,
        })
    }
}

/// Splits a sorted list into one contiguous segment per client. Clients are
/// taken in ascending id order; when the split is uneven the lower ids get
/// the extra pair.
pub fn partition(
    pairs: &[KeyValuePair],
    clients: &[NodeId],
) -> Result<Vec<Segment>, MapReduceError> {
    if clients.is_empty() {
        return Err(MapReduceError::NoClients);
    }
    let mut ordered = clients.to_vec();
    ordered.sort_unstable();
    if let Some(w) = ordered.windows(2).find(|w| w[0] == w[1]) {
        return Err(MapReduceError::DuplicateClient(w[0]));
    }
    let base = pairs.len() / ordered.len();
    let extra = pairs.len() % ordered.len();
    let mut start = 0;
    let segments = ordered
        .iter()
        .enumerate()
        .map(|(i, &node)| {
            let len = base + usize::from(i < extra);
            let seg = Segment::new(node, i as u32, pairs[start..start + len].to_vec());
            start += len;
            seg
        })
        .collect();
    Ok(segments)
}

/// Reduced output of one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialResult {
    pub assignee: NodeId,
    pub mode: CountMode,
    pub aggregates: BTreeMap<String, u64>,
    pub input_pair_count: u64,
}

pub fn reduce_segment(segment: &Segment, mode: CountMode) -> Result<PartialResult, MapReduceError> {
    segment.verify()?;
    reduce_pairs(segment.assignee, &segment.pairs, mode)
}

/// Sums values per key. Callers are responsible for integrity checks.
pub fn reduce_pairs(
    assignee: NodeId,
    pairs: &[KeyValuePair],
    mode: CountMode,
) -> Result<PartialResult, MapReduceError> {
    let mut aggregates = BTreeMap::new();
    for p in pairs {
        if !mode.accepts_key(&p.key) {
            return Err(MapReduceError::KeyOutsideMode {
                key: p.key.clone(),
                mode,
            });
        }
        *aggregates.entry(p.key.clone()).or_insert(0) += p.value;
    }
    Ok(PartialResult {
        assignee,
        mode,
        aggregates,
        input_pair_count: pairs.len() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Merged {
    pub aggregates: BTreeMap<String, u64>,
    pub input_pair_count: u64,
}

pub fn merge_partials(
    partials: &[PartialResult],
    mode: CountMode,
) -> Result<Merged, MapReduceError> {
    let mut merged = Merged::default();
    for p in partials {
        if p.mode != mode {
            return Err(MapReduceError::ModeMismatch(mode, p.mode));
        }
        for (k, v) in &p.aggregates {
            *merged.aggregates.entry(k.clone()).or_insert(0) += v;
        }
        merged.input_pair_count += p.input_pair_count;
    }
    Ok(merged)
}

/// Single pass over the readings with no mapping, sorting or distribution.
pub fn sequential_oracle(readings: &[SensorReading], mode: CountMode) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for r in readings {
        let (key, value) = match mode {
            CountMode::Visitor => (r.tag.as_str().to_string(), u64::from(r.room.get())),
            CountMode::Room => (format!("Room{}", r.room.get()), 1),
        };
        *out.entry(key).or_insert(0) += value;
    }
    out
}

/// Map, sort, partition across `clients`, reduce each segment and merge.
pub fn run_distributed(
    readings: &[SensorReading],
    clients: &[NodeId],
    mode: CountMode,
) -> Result<Merged, MapReduceError> {
    let pairs = sort_pairs(readings.iter().map(|r| map_reading(r, mode)).collect());
    let partials = partition(&pairs, clients)?
        .iter()
        .map(|s| reduce_segment(s, mode))
        .collect::<Result<Vec<_>, _>>()?;
    merge_partials(&partials, mode)
}

/// Half-open range of per-origin reading sequence numbers included in a
/// committed cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coverage {
    pub origin: NodeId,
    pub from: u64,
    pub to: u64,
}

impl Coverage {
    pub fn len(&self) -> u64 {
        self.to - self.from
    }

    pub fn is_empty(&self) -> bool {
        self.to == self.from
    }
}

/// Final aggregates of one protocol cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CycleResult {
    pub cycle_id: u32,
    pub visitor_aggregates: BTreeMap<TagCategory, u64>,
    pub room_aggregates: BTreeMap<RoomId, u64>,
    pub total_readings: u64,
    pub coverage: Vec<Coverage>,
}

impl CycleResult {
    /// Assembles a result from the merged outputs of both modes.
    pub fn from_merged(
        cycle_id: u32,
        visitor: &Merged,
        room: &Merged,
        coverage: Vec<Coverage>,
    ) -> Result<Self, MapReduceError> {
        let visitor_aggregates = visitor
            .aggregates
            .iter()
            .map(|(k, v)| Ok((k.parse::<TagCategory>()?, *v)))
            .collect::<Result<_, DomainError>>()?;
        let room_aggregates = room
            .aggregates
            .iter()
            .map(|(k, v)| {
                RoomId::from_key(k)
                    .map(|r| (r, *v))
                    .ok_or_else(|| DomainError::InvalidKey(k.clone()))
            })
            .collect::<Result<_, DomainError>>()?;
        Ok(CycleResult {
            cycle_id,
            visitor_aggregates,
            room_aggregates,
            total_readings: room.input_pair_count,
            coverage,
        })
    }

    /// Checks the two conservation laws tying the aggregates together.
    pub fn is_consistent(&self) -> bool {
        self.room_aggregates.values().sum::<u64>() == self.total_readings
            && self.visitor_aggregates.values().sum::<u64>()
                == self
                    .room_aggregates
                    .iter()
                    .map(|(r, n)| u64::from(r.get()) * n)
                    .sum::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u32) -> NodeId {
        NodeId::new(id).unwrap()
    }

    fn p(k: &str, v: u64) -> KeyValuePair {
        KeyValuePair::new(k, v).unwrap()
    }

    fn reading(tag: TagCategory, room: u32) -> SensorReading {
        SensorReading {
            tag,
            room: RoomId::new(room, 4).unwrap(),
            timestamp: 0,
            reader_id: 0,
        }
    }

    const TABLE1: &str = "man = 1, man = 3, man = 4, man = 2, woman = 3, other = 3, other = 4, other = 3, other = 2, \
                          woman = 1, woman = 4, woman = 2, woman = 2, woman = 3, woman = 2, woman = 4";

    fn table1_readings() -> Vec<SensorReading> {
        parse_pairs(TABLE1)
            .unwrap()
            .into_iter()
            .map(|kv| reading(kv.key.parse().unwrap(), kv.value as u32))
            .collect()
    }

    /// Hand-written oracle: counts by scanning every (tag, room) combination.
    fn brute_force(readings: &[SensorReading], mode: CountMode) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for tag in TagCategory::ALL {
            for room in 1..=4u32 {
                let n = readings
                    .iter()
                    .filter(|r| r.tag == tag && r.room.get() == room)
                    .count() as u64;
                if n == 0 {
                    continue;
                }
                match mode {
                    CountMode::Visitor => {
                        *out.entry(tag.as_str().to_string()).or_insert(0) += n * u64::from(room)
                    }
                    CountMode::Room => *out.entry(format!("Room{room}")).or_insert(0) += n,
                }
            }
        }
        out
    }

    #[test]
    fn map_reading_examples() {
        assert_eq!(
            map_reading(&reading(TagCategory::Man, 1), CountMode::Visitor),
            p("man", 1)
        );
        assert_eq!(
            map_reading(&reading(TagCategory::Woman, 3), CountMode::Room),
            p("Room3", 1)
        );
        assert_eq!(
            map_reading(&reading(TagCategory::Other, 4), CountMode::Visitor),
            p("other", 4)
        );
    }

    #[test]
    fn sort_examples() {
        assert_eq!(
            sort_pairs(vec![p("woman", 3), p("man", 1)]),
            vec![p("man", 1), p("woman", 3)]
        );
        assert!(sort_pairs(vec![]).is_empty());
        let sorted = serialize_pairs(&sort_pairs(parse_pairs(TABLE1).unwrap()));
        assert_eq!(
            sorted,
            "man=1,man=2,man=3,man=4,other=2,other=3,other=3,other=4,\
             woman=1,woman=2,woman=2,woman=2,woman=3,woman=3,woman=4,woman=4"
        );
    }

    #[test]
    fn partition_examples() {
        let pairs = sort_pairs(parse_pairs(TABLE1).unwrap());
        let segs = partition(&pairs, &[node(9), node(2), node(5)]).unwrap();
        let shape: Vec<_> = segs
            .iter()
            .map(|s| (s.assignee.get(), s.pairs.len()))
            .collect();
        assert_eq!(shape, vec![(2, 6), (5, 5), (9, 5)]);
        let rejoined: Vec<_> = segs.iter().flat_map(|s| s.pairs.clone()).collect();
        assert_eq!(rejoined, pairs);
        assert!(segs.iter().all(|s| s.verify().is_ok()));

        let segs = partition(&pairs[..3], &[node(7)]).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].pairs.len(), 3);

        let segs = partition(&pairs[..2], &[node(1), node(2), node(3)]).unwrap();
        let sizes: Vec<_> = segs.iter().map(|s| s.pairs.len()).collect();
        assert_eq!(sizes, vec![1, 1, 0]);

        assert_eq!(partition(&pairs, &[]), Err(MapReduceError::NoClients));
        assert!(matches!(
            partition(&pairs, &[node(1), node(1)]),
            Err(MapReduceError::DuplicateClient(_))
        ));
    }

    #[test]
    fn reduce_examples() {
        let seg = Segment::new(node(1), 0, vec![p("man", 1), p("man", 2), p("man", 3)]);
        let r = reduce_segment(&seg, CountMode::Visitor).unwrap();
        assert_eq!(r.aggregates, BTreeMap::from([("man".to_string(), 6)]));
        assert_eq!(r.input_pair_count, 3);

        let seg = Segment::new(node(1), 0, vec![p("Room1", 1), p("Room1", 1)]);
        let r = reduce_segment(&seg, CountMode::Room).unwrap();
        assert_eq!(r.aggregates, BTreeMap::from([("Room1".to_string(), 2)]));

        let seg = Segment::new(node(1), 0, vec![]);
        let r = reduce_segment(&seg, CountMode::Visitor).unwrap();
        assert!(r.aggregates.is_empty());
        assert_eq!(r.input_pair_count, 0);
    }

    #[test]
    fn reduce_rejects_tampered_segment_and_wrong_mode() {
        let mut seg = Segment::new(node(1), 2, vec![p("man", 1), p("man", 2)]);
        seg.pairs[1].value = 3;
        assert!(matches!(
            reduce_segment(&seg, CountMode::Visitor),
            Err(MapReduceError::ChecksumMismatch {
                segment_index: 2,
                ..
            })
        ));
        let seg = Segment::new(node(1), 0, vec![p("man", 1)]);
        assert!(matches!(
            reduce_segment(&seg, CountMode::Room),
            Err(MapReduceError::KeyOutsideMode { .. })
        ));
    }

    #[test]
    fn merge_examples() {
        let partial = |mode, kv: &[(&str, u64)]| PartialResult {
            assignee: node(1),
            mode,
            aggregates: kv.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            input_pair_count: kv.len() as u64,
        };
        let merged = merge_partials(
            &[
                partial(CountMode::Visitor, &[("man", 6)]),
                partial(
                    CountMode::Visitor,
                    &[("man", 4), ("woman", 21), ("other", 12)],
                ),
            ],
            CountMode::Visitor,
        )
        .unwrap();
        assert_eq!(
            merged.aggregates,
            BTreeMap::from([
                ("man".into(), 10),
                ("woman".into(), 21),
                ("other".into(), 12)
            ])
        );
        assert_eq!(merged.input_pair_count, 4);

        let merged = merge_partials(
            &[
                partial(CountMode::Room, &[]),
                partial(CountMode::Room, &[("Room2", 5)]),
            ],
            CountMode::Room,
        )
        .unwrap();
        assert_eq!(merged.aggregates, BTreeMap::from([("Room2".into(), 5)]));

        assert_eq!(
            merge_partials(&[partial(CountMode::Room, &[])], CountMode::Visitor),
            Err(MapReduceError::ModeMismatch(
                CountMode::Visitor,
                CountMode::Room
            ))
        );
    }

    #[test]
    fn table1_through_three_clients() {
        let readings = table1_readings();
        let clients = [node(1), node(2), node(3)];
        let visitor = run_distributed(&readings, &clients, CountMode::Visitor).unwrap();
        assert_eq!(
            visitor.aggregates,
            BTreeMap::from([
                ("man".into(), 10),
                ("woman".into(), 21),
                ("other".into(), 12)
            ])
        );
        let room = run_distributed(&readings, &clients, CountMode::Room).unwrap();
        let expected = brute_force(&readings, CountMode::Room);
        assert_eq!(
            expected,
            BTreeMap::from([
                ("Room1".into(), 2),
                ("Room2".into(), 5),
                ("Room3".into(), 5),
                ("Room4".into(), 4)
            ])
        );
        assert_eq!(room.aggregates, expected);
        assert_eq!(room.input_pair_count, 16);
    }

    #[test]
    fn oracle_examples() {
        let readings = table1_readings();
        assert_eq!(
            sequential_oracle(&readings, CountMode::Visitor),
            brute_force(&readings, CountMode::Visitor)
        );
        assert!(sequential_oracle(&[], CountMode::Room).is_empty());
        assert_eq!(
            sequential_oracle(&[reading(TagCategory::Man, 1)], CountMode::Visitor),
            BTreeMap::from([("man".into(), 1)])
        );
    }

    #[test]
    fn room_view_remaps() {
        let v = room_view(&[p("woman", 3), p("man", 1), p("other", 3)]);
        assert_eq!(v, vec![p("Room1", 1), p("Room3", 1), p("Room3", 1)]);
    }

    #[test]
    fn cycle_result_consistency() {
        let readings = table1_readings();
        let clients = [node(1)];
        let v = run_distributed(&readings, &clients, CountMode::Visitor).unwrap();
        let r = run_distributed(&readings, &clients, CountMode::Room).unwrap();
        let result = CycleResult::from_merged(4, &v, &r, vec![]).unwrap();
        assert_eq!(result.total_readings, 16);
        assert_eq!(result.visitor_aggregates[&TagCategory::Woman], 21);
        assert!(result.is_consistent());
    }

    #[test]
    fn wire_checksum_catches_every_single_byte_flip() {
        let pairs = sort_pairs(parse_pairs(TABLE1).unwrap());
        let seg = Segment::new(node(3), 1, pairs);
        let bytes = seg.serialized().into_bytes();
        assert_eq!(
            Segment::from_wire(node(3), 1, &bytes, seg.checksum).unwrap(),
            seg
        );
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x20, 0x80, 0xff] {
                let mut tampered = bytes.clone();
                tampered[i] ^= flip;
                assert!(matches!(
                    Segment::from_wire(node(3), 1, &tampered, seg.checksum),
                    Err(MapReduceError::ChecksumMismatch { .. })
                ));
            }
        }
    }
}

//! Seeded RFID reading streams and named fixtures.
//!
//! Visitors arrive uniformly over the run, then walk through a random
//! sequence of rooms (never the same room twice in a row), dwelling a
//! uniform time in each. Each room entrance has two readers, ids
//! `2 * room` and `2 * room + 1`; only entries are read. A doorway double
//! read is a second reading of the same passage from the other reader
//! with the same timestamp.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{
    parse_tag, KeyValuePair, RoomId, SensorReading, TagCategory, DEFAULT_ROOM_COUNT,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimgenError {
    #[error("invalid visitor model: {0}")]
    InvalidModel(String),
    #[error("unknown fixture {0:?}")]
    UnknownFixture(String),
    #[error("fixture {name}: {reason}")]
    BadFixture { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitorModel {
    pub seed: u64,
    pub visitor_count: u32,
    /// Probabilities of man, woman, other.
    pub tag_mix: [f64; 3],
    pub rooms: u32,
    pub dwell_ms: (u64, u64),
    pub double_read_rate: f64,
}

impl Default for VisitorModel {
    fn default() -> Self {
        VisitorModel {
            seed: 0,
            visitor_count: 50,
            tag_mix: [0.4, 0.5, 0.1],
            rooms: DEFAULT_ROOM_COUNT,
            dwell_ms: (200, 1500),
            double_read_rate: 0.02,
        }
    }
}

impl VisitorModel {
    pub fn validate(&self) -> Result<(), SimgenError> {
        let bad = |m: &str| Err(SimgenError::InvalidModel(m.to_string()));
        if self.tag_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("tag probabilities must lie in [0, 1]");
        }
        if (self.tag_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("tag probabilities must sum to 1");
        }
        if self.rooms < 2 {
            return bad("at least two rooms are needed for a walk");
        }
        if self.dwell_ms.0 == 0 || self.dwell_ms.0 > self.dwell_ms.1 {
            return bad("dwell range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.double_read_rate) {
            return bad("double read rate must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerRecord {
    pub sequence: u64,
    pub tag: TagCategory,
    pub room: RoomId,
    pub timestamp: u64,
    pub reader_id: u32,
    /// Second read of a doorway passage already recorded.
    pub duplicate: bool,
}

/// Ground truth for a generated stream, one record per emitted reading in
/// stream order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenerationLedger {
    pub records: Vec<LedgerRecord>,
}

impl GenerationLedger {
    /// Readings that represent real passages.
    pub fn genuine(&self) -> impl Iterator<Item = &LedgerRecord> {
        self.records.iter().filter(|r| !r.duplicate)
    }

    pub fn duplicates(&self) -> usize {
        self.records.iter().filter(|r| r.duplicate).count()
    }
}

/// Generates every entry read landing in `[0, duration_ms)`.
pub fn generate_stream(
    model: &VisitorModel,
    duration_ms: u64,
) -> Result<(Vec<SensorReading>, GenerationLedger), SimgenError> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let tags = [TagCategory::Man, TagCategory::Woman, TagCategory::Other];
    let mix =
        WeightedIndex::new(model.tag_mix).map_err(|e| SimgenError::InvalidModel(e.to_string()))?;

    let mut entries: Vec<(u64, u32, TagCategory, u32)> = Vec::new();
    if duration_ms > 0 {
        for _ in 0..model.visitor_count {
            let tag = tags[mix.sample(&mut rng)];
            let mut t = rng.gen_range(0..duration_ms);
            let visits = rng.gen_range(1..=model.rooms);
            let mut room = 0;
            for _ in 0..visits {
                let next = loop {
                    let r = rng.gen_range(1..=model.rooms);
                    if r != room {
                        break r;
                    }
                };
                room = next;
                if t >= duration_ms {
                    break;
                }
                let reader = 2 * room + rng.gen_range(0..2);
                entries.push((t, room, tag, reader));
                t += rng.gen_range(model.dwell_ms.0..=model.dwell_ms.1);
            }
        }
    }
    // Two passages through one doorway never share a millisecond, so a
    // same-timestamp pair can only be a double read.
    entries.sort();
    let mut used = BTreeSet::new();
    for e in &mut entries {
        while !used.insert((e.1, e.0)) {
            e.0 += 1;
        }
    }
    entries.sort();

    let mut readings = Vec::new();
    let mut ledger = GenerationLedger::default();
    for (timestamp, room, tag, reader) in entries {
        let room = RoomId::new(room, model.rooms).expect("room drawn in range");
        let copies = if rng.gen_bool(model.double_read_rate) {
            2
        } else {
            1
        };
        for copy in 0..copies {
            let reader_id = if copy == 0 { reader } else { reader ^ 1 };
            ledger.records.push(LedgerRecord {
                sequence: readings.len() as u64,
                tag,
                room,
                timestamp,
                reader_id,
                duplicate: copy == 1,
            });
            readings.push(SensorReading {
                tag,
                room,
                timestamp,
                reader_id,
            });
        }
    }
    Ok((readings, ledger))
}

const FIXTURES: [(&str, &str); 2] = [
    ("empty", include_str!("../fixtures/empty.txt")),
    ("table1", include_str!("../fixtures/table1.txt")),
];

pub fn list_fixtures() -> Vec<&'static str> {
    FIXTURES.iter().map(|(n, _)| *n).collect()
}

pub fn fixture_text(name: &str) -> Result<&'static str, SimgenError> {
    FIXTURES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| SimgenError::UnknownFixture(name.to_string()))
}

/// Parses fixture text: `tag=room` pairs separated by commas and newlines,
/// `#` starting a comment line. Reading `i` gets timestamp `i` and the
/// first reader of its room.
pub fn parse_fixture(name: &str, text: &str) -> Result<Vec<SensorReading>, SimgenError> {
    let bad = |reason: String| SimgenError::BadFixture {
        name: name.to_string(),
        reason,
    };
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(|l| l.split(','))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, token)| {
            let pair: KeyValuePair = token.parse().map_err(|e| bad(format!("{e}")))?;
            let tag = parse_tag(&pair.key).map_err(|e| bad(format!("{e}")))?;
            let room = u32::try_from(pair.value)
                .ok()
                .and_then(|v| RoomId::new(v, DEFAULT_ROOM_COUNT).ok())
                .ok_or_else(|| bad(format!("room {} out of range", pair.value)))?;
            Ok(SensorReading {
                tag,
                room,
                timestamp: i as u64,
                reader_id: 2 * room.get(),
            })
        })
        .collect()
}

pub fn replay_fixture(name: &str) -> Result<Vec<SensorReading>, SimgenError> {
    parse_fixture(name, fixture_text(name)?)
}

/// Canonical `tag=room` comma stream for a list of readings.
pub fn fixture_stream(readings: &[SensorReading]) -> String {
    let parts: Vec<String> = readings
        .iter()
        .map(|r| format!("{}={}", r.tag, r.room.get()))
        .collect();
    parts.join(",")
}

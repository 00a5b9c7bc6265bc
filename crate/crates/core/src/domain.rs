//! Value types shared by every layer: tag categories, rooms, readings,
//! key/value pairs and node identifiers.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Number of monitored rooms when nothing else is configured. The fifth room
/// of the reference site hosts special events and is not instrumented.
pub const DEFAULT_ROOM_COUNT: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("unknown tag category {0:?}")]
    UnknownTag(String),
    #[error("room {room} outside 1..={max}")]
    RoomOutOfRange { room: u32, max: u32 },
    #[error("invalid pair key {0:?}")]
    InvalidKey(String),
    #[error("malformed pair {0:?}")]
    MalformedPair(String),
    #[error("node id must be positive")]
    ZeroNodeId,
}

/// Category printed on a visitor badge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TagCategory {
    // Declaration order matches the lexicographic order of the canonical
    // strings so the derived `Ord` is the canonical one.
    Man,
    Other,
    Woman,
}

impl TagCategory {
    pub const ALL: [TagCategory; 3] = [TagCategory::Man, TagCategory::Other, TagCategory::Woman];

    pub fn as_str(self) -> &'static str {
        match self {
            TagCategory::Man => "man",
            TagCategory::Other => "other",
            TagCategory::Woman => "woman",
        }
    }
}

impl fmt::Display for TagCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TagCategory {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_tag(s)
    }
}

/// Case-insensitive parse of a canonical tag token.
pub fn parse_tag(token: &str) -> Result<TagCategory, DomainError> {
    TagCategory::ALL
        .into_iter()
        .find(|c| token.eq_ignore_ascii_case(c.as_str()))
        .ok_or_else(|| DomainError::UnknownTag(token.to_string()))
}

/// 1-based room number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoomId(u32);

impl RoomId {
    pub fn new(room: u32, room_count: u32) -> Result<Self, DomainError> {
        if room == 0 || room > room_count {
            return Err(DomainError::RoomOutOfRange {
                room,
                max: room_count,
            });
        }
        Ok(RoomId(room))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Key used for this room in room-counting mode, e.g. `Room3`.
    pub fn key(self) -> String {
        format!("Room{}", self.0)
    }

    /// Parses `RoomN` without checking it against a room count.
    pub fn from_key(key: &str) -> Option<Self> {
        let digits = key.strip_prefix("Room")?;
        if digits.is_empty()
            || digits.starts_with('0')
            || !digits.bytes().all(|b| b.is_ascii_digit())
        {
            return None;
        }
        digits.parse().ok().map(RoomId)
    }
}

impl fmt::Display for RoomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Room{}", self.0)
    }
}

/// Cluster-wide node identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn new(id: u32) -> Result<Self, DomainError> {
        if id == 0 {
            return Err(DomainError::ZeroNodeId);
        }
        Ok(NodeId(id))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One RFID detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorReading {
    pub tag: TagCategory,
    pub room: RoomId,
    /// Milliseconds on the simulation clock.
    pub timestamp: u64,
    pub reader_id: u32,
}

/// Which aggregate a MapReduce pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CountMode {
    /// Keyed by tag category; values (room numbers) are summed.
    Visitor,
    /// Keyed by `RoomN`; unit values count occurrences.
    Room,
}

impl CountMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CountMode::Visitor => "visitor",
            CountMode::Room => "room",
        }
    }

    /// Whether `key` belongs to this mode's key space.
    pub fn accepts_key(self, key: &str) -> bool {
        match self {
            CountMode::Visitor => TagCategory::ALL.iter().any(|c| c.as_str() == key),
            CountMode::Room => RoomId::from_key(key).is_some(),
        }
    }
}

impl fmt::Display for CountMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CountMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "visitor" => Ok(CountMode::Visitor),
            "room" => Ok(CountMode::Room),
            other => Err(format!("unknown count mode {other:?}")),
        }
    }
}

/// Which counting modes a run commits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModeSet {
    pub visitor: bool,
    pub room: bool,
}

impl ModeSet {
    pub const BOTH: ModeSet = ModeSet {
        visitor: true,
        room: true,
    };

    pub fn only(mode: CountMode) -> Self {
        ModeSet {
            visitor: mode == CountMode::Visitor,
            room: mode == CountMode::Room,
        }
    }

    pub fn contains(self, mode: CountMode) -> bool {
        match mode {
            CountMode::Visitor => self.visitor,
            CountMode::Room => self.room,
        }
    }
}

impl Default for ModeSet {
    fn default() -> Self {
        ModeSet::BOTH
    }
}

impl FromStr for ModeSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "both" => Ok(ModeSet::BOTH),
            other => other.parse().map(ModeSet::only),
        }
    }
}

impl fmt::Display for ModeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.visitor, self.room) {
            (true, true) => f.write_str("both"),
            (true, false) => f.write_str("visitor"),
            (false, true) => f.write_str("room"),
            (false, false) => f.write_str("none"),
        }
    }
}

/// The intermediate MapReduce unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyValuePair {
    pub key: String,
    pub value: u64,
}

impl KeyValuePair {
    /// Builds a pair after checking the key is a tag or a `RoomN` key.
    pub fn new(key: impl Into<String>, value: u64) -> Result<Self, DomainError> {
        let key = key.into();
        if !(CountMode::Visitor.accepts_key(&key) || CountMode::Room.accepts_key(&key)) {
            return Err(DomainError::InvalidKey(key));
        }
        Ok(KeyValuePair { key, value })
    }

    pub fn tag(tag: TagCategory, value: u64) -> Self {
        KeyValuePair {
            key: tag.as_str().to_string(),
            value,
        }
    }

    pub fn room(room: RoomId, value: u64) -> Self {
        KeyValuePair {
            key: room.key(),
            value,
        }
    }
}

impl fmt::Display for KeyValuePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key, self.value)
    }
}

impl FromStr for KeyValuePair {
    type Err = DomainError;

    /// Accepts `key=value` with optional whitespace around both sides.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| DomainError::MalformedPair(s.to_string()))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
            return Err(DomainError::MalformedPair(s.to_string()));
        }
        let value = value
            .parse()
            .map_err(|_| DomainError::MalformedPair(s.to_string()))?;
        // Tags are accepted in any case but stored canonically.
        match parse_tag(key) {
            Ok(tag) => Ok(KeyValuePair::tag(tag, value)),
            Err(_) => KeyValuePair::new(key, value),
        }
    }
}

/// Lexicographic on key, then ascending value.
pub fn pair_order(a: &KeyValuePair, b: &KeyValuePair) -> Ordering {
    a.key.cmp(&b.key).then(a.value.cmp(&b.value))
}

impl PartialOrd for KeyValuePair {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for KeyValuePair {
    fn cmp(&self, other: &Self) -> Ordering {
        pair_order(self, other)
    }
}

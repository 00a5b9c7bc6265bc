//! Text payloads carried inside protocol datagrams.
//!
//! | kind           | payload                                            |
//! |----------------|----------------------------------------------------|
//! | DATA_SUBMIT    | `<from>-<to>\|<part>/<total>\|<pairs>`             |
//! | REGISTER_ACK   | `<part>/<total>`                                   |
//! | SEGMENT_ASSIGN | `<index>\|<part>/<total>\|<crc>\|<pairs>`          |
//! | REDUCE_RESULT  | `<index>\|<count>\|<visitor>\|<room>\|<crc>`       |
//! | CYCLE_SUCCESS  | `<origin>:<from>-<to>,...`                         |
//! | CYCLE_ABORT    | free text                                          |
//!
//! `<pairs>` is the canonical comma stream and `<crc>` is 16 lowercase hex
//! digits. A list too large for one datagram is split into parts whose
//! texts, joined with commas, give back the whole list.

use crate::domain::{KeyValuePair, NodeId};
use crate::mapreduce::{checksum, parse_pairs, serialize_pairs, Coverage};
use crate::transport::MAX_PAYLOAD;

use super::RuntimeError;

/// Room left in each datagram for the non-pair prefix.
const PREFIX_RESERVE: usize = 64;

fn wire_err(what: &str, payload: &str) -> RuntimeError {
    let shown: String = payload.chars().take(60).collect();
    RuntimeError::Wire(format!("{what}: {shown:?}"))
}

fn parse_part(s: &str, payload: &str) -> Result<(u32, u32), RuntimeError> {
    let (p, t) = s.split_once('/').ok_or_else(|| wire_err("part", payload))?;
    let part: u32 = p.parse().map_err(|_| wire_err("part", payload))?;
    let total: u32 = t.parse().map_err(|_| wire_err("part", payload))?;
    if total == 0 || part >= total {
        return Err(wire_err("part out of range", payload));
    }
    Ok((part, total))
}

fn parse_range(s: &str, payload: &str) -> Result<(u64, u64), RuntimeError> {
    let (a, b) = s
        .split_once('-')
        .ok_or_else(|| wire_err("range", payload))?;
    let from: u64 = a.parse().map_err(|_| wire_err("range", payload))?;
    let to: u64 = b.parse().map_err(|_| wire_err("range", payload))?;
    if to < from {
        return Err(wire_err("inverted range", payload));
    }
    Ok((from, to))
}

fn parse_hex(s: &str, payload: &str) -> Result<u64, RuntimeError> {
    if s.len() != 16 {
        return Err(wire_err("checksum", payload));
    }
    u64::from_str_radix(s, 16).map_err(|_| wire_err("checksum", payload))
}

/// Splits a pair list into datagram-sized texts. Always returns at least
/// one (possibly empty) chunk.
pub fn chunk_pairs(pairs: &[KeyValuePair], max_pairs: Option<usize>) -> Vec<String> {
    let budget = MAX_PAYLOAD - PREFIX_RESERVE;
    let max_pairs = max_pairs.unwrap_or(usize::MAX);
    let mut chunks = Vec::new();
    let mut cur = String::new();
    let mut n = 0;
    for p in pairs {
        let text = p.to_string();
        let extra = text.len() + usize::from(n > 0);
        if n > 0 && (n >= max_pairs || cur.len() + extra > budget) {
            chunks.push(std::mem::take(&mut cur));
            n = 0;
        }
        if n > 0 {
            cur.push(',');
        }
        cur.push_str(&text);
        n += 1;
    }
    if n > 0 || chunks.is_empty() {
        chunks.push(cur);
    }
    chunks
}

/// Joins chunk texts back into the canonical text of the whole list.
pub(crate) fn join_chunks<'a>(chunks: impl IntoIterator<Item = &'a str>) -> String {
    let parts: Vec<&str> = chunks.into_iter().filter(|c| !c.is_empty()).collect();
    parts.join(",")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitChunk {
    pub from: u64,
    pub to: u64,
    pub part: u32,
    pub total: u32,
    pub text: String,
}

impl SubmitChunk {
    pub fn encode(&self) -> String {
        format!(
            "{}-{}|{}/{}|{}",
            self.from, self.to, self.part, self.total, self.text
        )
    }

    pub fn decode(payload: &str) -> Result<Self, RuntimeError> {
        let mut it = payload.splitn(3, '|');
        let (Some(range), Some(part), Some(text)) = (it.next(), it.next(), it.next()) else {
            return Err(wire_err("submit", payload));
        };
        let (from, to) = parse_range(range, payload)?;
        let (part, total) = parse_part(part, payload)?;
        Ok(SubmitChunk {
            from,
            to,
            part,
            total,
            text: text.to_string(),
        })
    }
}

pub(crate) fn encode_ack(part: u32, total: u32) -> String {
    format!("{part}/{total}")
}

pub(crate) fn decode_ack(payload: &str) -> Result<(u32, u32), RuntimeError> {
    parse_part(payload, payload)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentChunk {
    pub index: u32,
    pub part: u32,
    pub total: u32,
    pub checksum: u64,
    pub text: String,
}

impl SegmentChunk {
    pub fn encode(&self) -> String {
        format!(
            "{}|{}/{}|{:016x}|{}",
            self.index, self.part, self.total, self.checksum, self.text
        )
    }

    pub fn decode(payload: &str) -> Result<Self, RuntimeError> {
        let mut it = payload.splitn(4, '|');
        let (Some(index), Some(part), Some(crc), Some(text)) =
            (it.next(), it.next(), it.next(), it.next())
        else {
            return Err(wire_err("segment", payload));
        };
        let (part, total) = parse_part(part, payload)?;
        Ok(SegmentChunk {
            index: index
                .parse()
                .map_err(|_| wire_err("segment index", payload))?,
            part,
            total,
            checksum: parse_hex(crc, payload)?,
            text: text.to_string(),
        })
    }
}

/// A client's reduced output for one segment, in both modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReduceReport {
    pub index: u32,
    pub count: u64,
    pub visitor: Vec<KeyValuePair>,
    pub room: Vec<KeyValuePair>,
}

impl ReduceReport {
    fn body(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.index,
            self.count,
            serialize_pairs(&self.visitor),
            serialize_pairs(&self.room)
        )
    }

    pub fn encode(&self) -> String {
        let body = self.body();
        let crc = checksum(body.as_bytes());
        format!("{body}|{crc:016x}")
    }

    /// Checks the trailing checksum against the raw body before parsing it.
    pub fn decode(payload: &str) -> Result<Self, RuntimeError> {
        let (body, crc) = payload
            .rsplit_once('|')
            .ok_or_else(|| wire_err("result", payload))?;
        let expected = parse_hex(crc, payload)?;
        let computed = checksum(body.as_bytes());
        if computed != expected {
            return Err(RuntimeError::MapReduce(
                crate::mapreduce::MapReduceError::ChecksumMismatch {
                    segment_index: body
                        .split('|')
                        .next()
                        .and_then(|s| s.parse().ok())
                        .unwrap_or(u32::MAX),
                    expected,
                    computed,
                },
            ));
        }
        let mut it = body.splitn(4, '|');
        let (Some(index), Some(count), Some(visitor), Some(room)) =
            (it.next(), it.next(), it.next(), it.next())
        else {
            return Err(wire_err("result", payload));
        };
        let pairs = |s: &str| parse_pairs(s).map_err(|_| wire_err("result pairs", payload));
        Ok(ReduceReport {
            index: index
                .parse()
                .map_err(|_| wire_err("result index", payload))?,
            count: count
                .parse()
                .map_err(|_| wire_err("result count", payload))?,
            visitor: pairs(visitor)?,
            room: pairs(room)?,
        })
    }
}

pub fn encode_coverage(coverage: &[Coverage]) -> String {
    let parts: Vec<String> = coverage
        .iter()
        .map(|c| format!("{}:{}-{}", c.origin, c.from, c.to))
        .collect();
    parts.join(",")
}

pub fn decode_coverage(payload: &str) -> Result<Vec<Coverage>, RuntimeError> {
    if payload.is_empty() {
        return Ok(Vec::new());
    }
    payload
        .split(',')
        .map(|item| {
            let (origin, range) = item
                .split_once(':')
                .ok_or_else(|| wire_err("coverage", payload))?;
            let origin = origin
                .parse::<u32>()
                .ok()
                .and_then(|n| NodeId::new(n).ok())
                .ok_or_else(|| wire_err("coverage origin", payload))?;
            let (from, to) = parse_range(range, payload)?;
            Ok(Coverage { origin, from, to })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TagCategory;

    fn pairs(n: usize) -> Vec<KeyValuePair> {
        (0..n)
            .map(|i| KeyValuePair::tag(TagCategory::ALL[i % 3], (i % 4 + 1) as u64))
            .collect()
    }

    #[test]
    fn chunks_rejoin_to_the_canonical_text() {
        for n in [0, 1, 5, 3000] {
            let ps = pairs(n);
            for cap in [None, Some(1), Some(7)] {
                let chunks = chunk_pairs(&ps, cap);
                assert!(!chunks.is_empty());
                assert!(chunks
                    .iter()
                    .all(|c| c.len() + PREFIX_RESERVE <= MAX_PAYLOAD));
                if let Some(cap) = cap {
                    assert!(chunks.iter().all(|c| c.split(',').count() <= cap));
                }
                assert_eq!(
                    join_chunks(chunks.iter().map(String::as_str)),
                    serialize_pairs(&ps)
                );
            }
        }
        assert!(chunk_pairs(&pairs(3000), None).len() > 1);
    }

    #[test]
    fn submit_and_segment_roundtrip() {
        let s = SubmitChunk {
            from: 3,
            to: 9,
            part: 1,
            total: 2,
            text: "man=1,woman=2".into(),
        };
        assert_eq!(s.encode(), "3-9|1/2|man=1,woman=2");
        assert_eq!(SubmitChunk::decode(&s.encode()).unwrap(), s);
        for bad in ["3-9|2/2|", "9-3|0/1|", "3-9|0/0|", "x", "3-9"] {
            assert!(SubmitChunk::decode(bad).is_err(), "{bad}");
        }
        let g = SegmentChunk {
            index: 2,
            part: 0,
            total: 1,
            checksum: 0xabc,
            text: String::new(),
        };
        assert_eq!(g.encode(), "2|0/1|0000000000000abc|");
        assert_eq!(SegmentChunk::decode(&g.encode()).unwrap(), g);
        assert_eq!(decode_ack(&encode_ack(4, 9)).unwrap(), (4, 9));
    }

    #[test]
    fn report_checksum_catches_any_flip() {
        let r = ReduceReport {
            index: 1,
            count: 5,
            visitor: vec![KeyValuePair::tag(TagCategory::Man, 4)],
            room: vec![KeyValuePair::new("Room4", 1).unwrap()],
        };
        let enc = r.encode();
        assert_eq!(ReduceReport::decode(&enc).unwrap(), r);
        let bytes = enc.as_bytes();
        for i in 0..bytes.len() {
            let mut b = bytes.to_vec();
            b[i] ^= 0x01;
            if let Ok(s) = std::str::from_utf8(&b) {
                assert!(ReduceReport::decode(s).is_err(), "flip at {i} accepted");
            }
        }
    }

    #[test]
    fn coverage_roundtrip() {
        let id = |n| NodeId::new(n).unwrap();
        let cov = vec![
            Coverage {
                origin: id(1),
                from: 0,
                to: 16,
            },
            Coverage {
                origin: id(3),
                from: 4,
                to: 4,
            },
        ];
        assert_eq!(encode_coverage(&cov), "1:0-16,3:4-4");
        assert_eq!(decode_coverage(&encode_coverage(&cov)).unwrap(), cov);
        assert_eq!(decode_coverage("").unwrap(), vec![]);
        assert!(decode_coverage("0:1-2").is_err());
    }
}

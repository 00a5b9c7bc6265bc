//! Registry-arbitrated leader election.
//!
//! Every node records `(id, address, role, last_seen)` in the shared node
//! table. The leader is the live node with the highest id unless an
//! operator override names a live node. A record is live while its
//! `last_seen` is within the liveness window (two check intervals).
//!
//! "Operational" means a node answers a PING carrying a random 64-bit nonce
//! with a PONG echoing it; [`AvailabilityProbe`] holds that exchange so the
//! blocking [`check_server_available`] and the event-driven runtime share it.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::domain::NodeId;
use crate::store::{NodeTableRow, Store, StoreError};
use crate::transport::{parse_address, Message, MessageKind, RecvOutcome, Transport};

pub const DEFAULT_PROBE_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElectionError {
    #[error("no live nodes in the registry")]
    EmptyRegistry,
    #[error("override node {0} is not live")]
    OverrideNotLive(NodeId),
    #[error("node {node_id} is registered from {existing}, refusing {requested}")]
    AddressConflict {
        node_id: NodeId,
        existing: String,
        requested: String,
    },
    #[error("bad address {0:?}")]
    BadAddress(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Leader,
    Follower,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Leader => "leader",
            Role::Follower => "follower",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub address: String,
    pub role: Role,
    pub last_seen: u64,
}

impl NodeRecord {
    pub fn to_row(&self) -> NodeTableRow {
        NodeTableRow {
            node_id: self.node_id.get(),
            network_props: format!("{};{};{}", self.address, self.role, self.last_seen),
        }
    }

    pub fn from_row(row: &NodeTableRow) -> Result<Self, StoreError> {
        let bad =
            || StoreError::InvalidRow(format!("node {}: {:?}", row.node_id, row.network_props));
        let node_id = NodeId::new(row.node_id).map_err(|_| bad())?;
        let mut parts = row.network_props.split(';');
        let (Some(address), Some(role), Some(seen), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        parse_address(address).map_err(|_| bad())?;
        let role = match role {
            "leader" => Role::Leader,
            "follower" => Role::Follower,
            _ => return Err(bad()),
        };
        Ok(NodeRecord {
            node_id,
            address: address.to_string(),
            role,
            last_seen: seen.parse().map_err(|_| bad())?,
        })
    }

    pub fn is_live(&self, at: u64, liveness_window_ms: u64) -> bool {
        at.saturating_sub(self.last_seen) <= liveness_window_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RegistrySnapshot {
    pub records: Vec<NodeRecord>,
    pub taken_at: u64,
}

impl RegistrySnapshot {
    pub fn live(&self, liveness_window_ms: u64) -> impl Iterator<Item = &NodeRecord> {
        self.records
            .iter()
            .filter(move |r| r.is_live(self.taken_at, liveness_window_ms))
    }

    pub fn get(&self, id: NodeId) -> Option<&NodeRecord> {
        self.records.iter().find(|r| r.node_id == id)
    }

    /// Drops the given ids, e.g. nodes that just failed a probe.
    pub fn without(&self, excluded: &[NodeId]) -> RegistrySnapshot {
        RegistrySnapshot {
            records: self
                .records
                .iter()
                .filter(|r| !excluded.contains(&r.node_id))
                .cloned()
                .collect(),
            taken_at: self.taken_at,
        }
    }

    /// The record currently holding the leader role, if any.
    pub fn leader(&self) -> Option<&NodeRecord> {
        self.records.iter().find(|r| r.role == Role::Leader)
    }
}

/// Liveness window for a given availability-check interval.
pub fn liveness_window(check_interval_ms: u64) -> u64 {
    2 * check_interval_ms
}

/// Inserts a follower record or refreshes an existing one. A fresh record
/// under the same id but a different address is a conflict; a stale one is
/// taken over.
pub fn register_node(
    store: &Store,
    node_id: NodeId,
    address: &str,
    now: u64,
    liveness_window_ms: u64,
) -> Result<NodeRecord, ElectionError> {
    parse_address(address).map_err(|_| ElectionError::BadAddress(address.to_string()))?;
    store.transact_nodes(|rows| {
        let existing = rows
            .iter()
            .find(|r| r.node_id == node_id.get())
            .map(NodeRecord::from_row)
            .transpose()?;
        let record = match existing {
            Some(rec) if rec.address == address => NodeRecord {
                last_seen: now.max(rec.last_seen),
                ..rec
            },
            Some(rec) if rec.is_live(now, liveness_window_ms) => {
                return Err(ElectionError::AddressConflict {
                    node_id,
                    existing: rec.address,
                    requested: address.to_string(),
                })
            }
            _ => NodeRecord {
                node_id,
                address: address.to_string(),
                role: Role::Follower,
                last_seen: now,
            },
        };
        Ok((vec![record.to_row()], record))
    })
}

/// Marks `node_id` as leader and demotes any other leader record, in one
/// transaction.
pub fn claim_leadership(store: &Store, node_id: NodeId, now: u64) -> Result<(), ElectionError> {
    set_role(store, node_id, Role::Leader, now)
}

/// Records that `node_id` follows someone else.
pub fn step_down(store: &Store, node_id: NodeId, now: u64) -> Result<(), ElectionError> {
    set_role(store, node_id, Role::Follower, now)
}

fn set_role(store: &Store, node_id: NodeId, role: Role, now: u64) -> Result<(), ElectionError> {
    store.transact_nodes(|rows| {
        let mut updates = Vec::new();
        for row in rows {
            let mut rec = NodeRecord::from_row(row)?;
            if rec.node_id == node_id {
                if rec.role == role && rec.last_seen >= now {
                    continue;
                }
                rec.role = role;
                rec.last_seen = rec.last_seen.max(now);
            } else if role == Role::Leader && rec.role == Role::Leader {
                rec.role = Role::Follower;
            } else {
                continue;
            }
            updates.push(rec.to_row());
        }
        Ok::<_, ElectionError>((updates, ()))
    })
}

/// Picks the leader: the override if it is live, otherwise the highest
/// live id.
pub fn elect_leader(
    snapshot: &RegistrySnapshot,
    override_id: Option<NodeId>,
    liveness_window_ms: u64,
) -> Result<NodeId, ElectionError> {
    let best = snapshot.live(liveness_window_ms).map(|r| r.node_id).max();
    let Some(best) = best else {
        return Err(ElectionError::EmptyRegistry);
    };
    match override_id {
        None => Ok(best),
        Some(id) if snapshot.live(liveness_window_ms).any(|r| r.node_id == id) => Ok(id),
        Some(id) => Err(ElectionError::OverrideNotLive(id)),
    }
}

/// Like [`elect_leader`] but falls back to the highest live id when the
/// override is not live.
pub fn elect_with_fallback(
    snapshot: &RegistrySnapshot,
    override_id: Option<NodeId>,
    liveness_window_ms: u64,
) -> Result<NodeId, ElectionError> {
    match elect_leader(snapshot, override_id, liveness_window_ms) {
        Err(ElectionError::OverrideNotLive(_)) => elect_leader(snapshot, None, liveness_window_ms),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Availability {
    Available,
    Unavailable,
}

pub fn ping(sender: NodeId, cycle_id: u32, nonce: u64) -> Message {
    Message::new(
        MessageKind::Ping,
        sender.get(),
        cycle_id,
        nonce.to_be_bytes().to_vec(),
    )
}

/// The PONG answering `ping`.
pub fn pong(responder: NodeId, ping: &Message) -> Message {
    Message::new(
        MessageKind::Pong,
        responder.get(),
        ping.cycle_id,
        ping.payload.clone(),
    )
}

pub fn nonce_of(msg: &Message) -> Option<u64> {
    let bytes: [u8; 8] = msg.payload.as_slice().try_into().ok()?;
    Some(u64::from_be_bytes(bytes))
}

/// One availability check against a single target: a bounded number of
/// PING attempts, each with a fresh nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvailabilityProbe {
    pub target: NodeId,
    pub target_addr: String,
    pub nonce: u64,
    pub attempt: u32,
    pub retries: u32,
    pub sent_at: u64,
}

impl AvailabilityProbe {
    pub fn start(
        target: NodeId,
        target_addr: &str,
        retries: u32,
        now: u64,
        rng: &mut impl Rng,
    ) -> Self {
        AvailabilityProbe {
            target,
            target_addr: target_addr.to_string(),
            nonce: rng.gen(),
            attempt: 1,
            retries: retries.max(1),
            sent_at: now,
        }
    }

    pub fn ping(&self, sender: NodeId, cycle_id: u32) -> Message {
        ping(sender, cycle_id, self.nonce)
    }

    pub fn matches(&self, msg: &Message) -> bool {
        msg.kind == MessageKind::Pong && nonce_of(msg) == Some(self.nonce)
    }

    /// Called when an attempt times out. Returns `false` once every attempt
    /// is spent; otherwise arms the next attempt with a new nonce.
    pub fn retry(&mut self, now: u64, rng: &mut impl Rng) -> bool {
        if self.attempt >= self.retries {
            return false;
        }
        self.attempt += 1;
        self.nonce = rng.gen();
        self.sent_at = now;
        true
    }
}

/// Blocking availability check over any transport.
pub fn check_server_available(
    transport: &dyn Transport,
    sender: NodeId,
    leader_address: &str,
    timeout_ms: u64,
    retries: u32,
    rng: &mut impl Rng,
) -> Availability {
    assert!(timeout_ms > 0, "availability timeout must be positive");
    let leader = NodeId::new(u32::MAX).expect("nonzero");
    let mut probe = AvailabilityProbe::start(leader, leader_address, retries, 0, rng);
    loop {
        if transport
            .send(leader_address, &probe.ping(sender, 0))
            .is_err()
        {
            return Availability::Unavailable;
        }
        // Wait out this attempt, skipping unrelated traffic.
        let mut budget = timeout_ms;
        let started = std::time::Instant::now();
        loop {
            match transport.recv(budget) {
                Ok(RecvOutcome::Message(d)) if probe.matches(&d.message) => {
                    return Availability::Available
                }
                Ok(RecvOutcome::Message(_)) => {}
                Ok(RecvOutcome::Timeout) | Err(_) => break,
            }
            let spent = started.elapsed().as_millis() as u64;
            // Simulated transports do not consume wall time; keep going
            // until they report a timeout.
            budget = timeout_ms.saturating_sub(spent).max(1);
        }
        if !probe.retry(0, rng) {
            return Availability::Unavailable;
        }
    }
}

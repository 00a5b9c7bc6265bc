//! Deterministic in-process datagram network.
//!
//! The clock only moves when the owner calls [`SimNetwork::advance_to`] or
//! when a standalone [`SimEndpoint::recv`] waits. Every send draws exactly
//! one loss sample and one latency sample from a seeded ChaCha stream, so a
//! run is a pure function of the seed and the order of sends.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    decode_message, encode_message, Datagram, Message, NetConfig, RecvOutcome, SendReceipt,
    Transport, TransportError,
};

type Responder = Box<dyn FnMut(&Datagram) -> Vec<(String, Message)> + Send>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

/// What happened to one send. `deliver_at` is `None` for drops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub sent_at: u64,
    pub deliver_at: Option<u64>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct InFlight {
    deliver_at: u64,
    seq: u64,
    to: String,
    from: String,
    frame: Vec<u8>,
}

#[derive(Default)]
struct EndpointState {
    open: bool,
    inbox: VecDeque<(u64, Datagram)>,
}

struct Partition {
    members: BTreeSet<String>,
    until: u64,
}

struct SimState {
    now: u64,
    rng: ChaCha8Rng,
    loss_rate: f64,
    latency: (u64, u64),
    next_seq: u64,
    in_flight: BinaryHeap<Reverse<InFlight>>,
    endpoints: BTreeMap<String, EndpointState>,
    partitions: Vec<Partition>,
    responders: BTreeMap<String, Responder>,
    stats: NetStats,
    log: Vec<DeliveryRecord>,
}

impl SimState {
    fn blocked(&self, from: &str, to: &str) -> bool {
        self.partitions
            .iter()
            .filter(|p| p.until > self.now)
            .any(|p| p.members.contains(from) != p.members.contains(to))
    }

    fn send(&mut self, from: &str, to: &str, msg: &Message) -> Result<SendReceipt, TransportError> {
        if !self.endpoints.get(from).is_some_and(|e| e.open) {
            return Err(TransportError::EndpointClosed);
        }
        let frame = encode_message(msg)?;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.sent += 1;
        let lost = self.rng.gen::<f64>() < self.loss_rate;
        let latency = self.rng.gen_range(self.latency.0..=self.latency.1);
        let dropped = lost || self.blocked(from, to);
        let deliver_at = (!dropped).then_some(self.now + latency);
        self.log.push(DeliveryRecord {
            seq,
            from: from.to_string(),
            to: to.to_string(),
            sent_at: self.now,
            deliver_at,
        });
        let bytes = frame.len();
        match deliver_at {
            Some(deliver_at) => self.in_flight.push(Reverse(InFlight {
                deliver_at,
                seq,
                to: to.to_string(),
                from: from.to_string(),
                frame,
            })),
            None => self.stats.dropped += 1,
        }
        Ok(SendReceipt { bytes })
    }

    /// Moves every frame due at or before `t` into its inbox, in
    /// (delivery time, send order) order.
    fn advance_to(&mut self, t: u64) {
        while let Some(Reverse(head)) = self.in_flight.peek() {
            if head.deliver_at > t {
                break;
            }
            let Reverse(f) = self.in_flight.pop().expect("peeked");
            self.now = self.now.max(f.deliver_at);
            self.deliver(f);
        }
        self.now = self.now.max(t);
    }

    fn deliver(&mut self, f: InFlight) {
        let open = self.endpoints.get(&f.to).is_some_and(|e| e.open);
        let message = match decode_message(&f.frame) {
            Ok(m) if open => m,
            _ => {
                self.stats.dropped += 1;
                return;
            }
        };
        self.stats.delivered += 1;
        let datagram = Datagram {
            from: f.from,
            message,
        };
        if let Some(mut responder) = self.responders.remove(&f.to) {
            for (dest, reply) in responder(&datagram) {
                // Replies from a responder cannot fail on size; they are
                // protocol messages built by tests.
                let _ = self.send(&f.to, &dest, &reply);
            }
            self.responders.insert(f.to, responder);
            return;
        }
        if let Some(ep) = self.endpoints.get_mut(&f.to) {
            ep.inbox.push_back((f.deliver_at, datagram));
        }
    }

    fn next_delivery_to(&self, addr: &str) -> Option<u64> {
        self.in_flight
            .iter()
            .filter(|Reverse(f)| f.to == addr)
            .map(|Reverse(f)| f.deliver_at)
            .min()
    }
}

/// Shared handle to a simulated network.
#[derive(Clone)]
pub struct SimNetwork {
    state: Arc<Mutex<SimState>>,
}

impl SimNetwork {
    pub fn new(cfg: &NetConfig) -> Self {
        SimNetwork {
            state: Arc::new(Mutex::new(SimState {
                now: 0,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                loss_rate: cfg.loss_rate.clamp(0.0, 1.0),
                latency: cfg.latency_ms,
                next_seq: 0,
                in_flight: BinaryHeap::new(),
                endpoints: BTreeMap::new(),
                partitions: Vec::new(),
                responders: BTreeMap::new(),
                stats: NetStats::default(),
                log: Vec::new(),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        // A panic while holding the lock leaves the state usable; the
        // simulation is single-writer.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Opens an endpoint. Re-binding a closed address reopens it with an
    /// empty inbox.
    pub fn bind(&self, addr: &str) -> Result<SimEndpoint, TransportError> {
        super::parse_address(addr)?;
        let mut s = self.lock();
        let ep = s.endpoints.entry(addr.to_string()).or_default();
        if ep.open {
            return Err(TransportError::AddressInUse(addr.to_string()));
        }
        ep.open = true;
        ep.inbox.clear();
        Ok(SimEndpoint {
            net: self.clone(),
            addr: addr.to_string(),
        })
    }

    /// Closes an endpoint; frames in flight to it are dropped on arrival.
    pub fn close(&self, addr: &str) {
        if let Some(ep) = self.lock().endpoints.get_mut(addr) {
            ep.open = false;
            ep.inbox.clear();
        }
    }

    pub fn now(&self) -> u64 {
        self.lock().now
    }

    pub fn advance_to(&self, t: u64) {
        self.lock().advance_to(t);
    }

    pub fn next_delivery_at(&self) -> Option<u64> {
        self.lock().in_flight.peek().map(|Reverse(f)| f.deliver_at)
    }

    pub fn set_loss_rate(&self, p: f64) {
        self.lock().loss_rate = p.clamp(0.0, 1.0);
    }

    /// Cuts `members` off from everyone else until `until`.
    pub fn partition(&self, members: impl IntoIterator<Item = String>, until: u64) {
        let mut s = self.lock();
        let members = members.into_iter().collect();
        s.partitions.push(Partition { members, until });
    }

    /// Handles every frame delivered to `addr` with `f` instead of queueing
    /// it; returned messages are sent from `addr`.
    pub fn set_responder<F>(&self, addr: &str, f: F)
    where
        F: FnMut(&Datagram) -> Vec<(String, Message)> + Send + 'static,
    {
        let mut s = self.lock();
        s.endpoints.entry(addr.to_string()).or_default().open = true;
        s.responders.insert(addr.to_string(), Box::new(f));
    }

    pub fn stats(&self) -> NetStats {
        self.lock().stats
    }

    pub fn delivery_log(&self) -> Vec<DeliveryRecord> {
        self.lock().log.clone()
    }
}

/// One bound address on a [`SimNetwork`].
#[derive(Clone)]
pub struct SimEndpoint {
    net: SimNetwork,
    addr: String,
}

impl SimEndpoint {
    /// Next frame already delivered, without moving the clock.
    pub fn try_recv(&self) -> Result<Option<Datagram>, TransportError> {
        let mut s = self.net.lock();
        let ep = s
            .endpoints
            .get_mut(&self.addr)
            .filter(|e| e.open)
            .ok_or(TransportError::EndpointClosed)?;
        Ok(ep.inbox.pop_front().map(|(_, d)| d))
    }

    pub fn network(&self) -> &SimNetwork {
        &self.net
    }
}

impl Transport for SimEndpoint {
    fn local_addr(&self) -> &str {
        &self.addr
    }

    fn send(&self, dest: &str, msg: &Message) -> Result<SendReceipt, TransportError> {
        self.net.lock().send(&self.addr, dest, msg)
    }

    /// Returns a delivered frame if one is waiting. Otherwise, when used
    /// outside a harness, waiting advances the shared clock: up to the next
    /// delivery to this endpoint if it lands within `timeout_ms`, or by the
    /// full timeout.
    fn recv(&self, timeout_ms: u64) -> Result<RecvOutcome, TransportError> {
        let mut s = self.net.lock();
        let deadline = s.now + timeout_ms;
        loop {
            let ep = s
                .endpoints
                .get_mut(&self.addr)
                .filter(|e| e.open)
                .ok_or(TransportError::EndpointClosed)?;
            if let Some((_, d)) = ep.inbox.pop_front() {
                return Ok(RecvOutcome::Message(d));
            }
            match s.next_delivery_to(&self.addr) {
                Some(t) if t <= deadline => s.advance_to(t),
                _ => {
                    // Responders may still generate traffic for us; step
                    // through every delivery up to the deadline.
                    match s.in_flight.peek().map(|Reverse(f)| f.deliver_at) {
                        Some(t) if t <= deadline => s.advance_to(t),
                        _ => {
                            s.advance_to(deadline);
                            return Ok(RecvOutcome::Timeout);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::MessageKind;
    use super::*;

    fn cfg(loss: f64, seed: u64) -> NetConfig {
        NetConfig {
            loss_rate: loss,
            latency_ms: (40, 90),
            seed,
            ..Default::default()
        }
    }

    fn ping(n: u32) -> Message {
        Message::new(MessageKind::Ping, n, 0, Vec::new())
    }

    #[test]
    fn lossless_delivers_in_delivery_time_order() {
        let net = SimNetwork::new(&cfg(0.0, 1));
        let a = net.bind("a.sim:1").unwrap();
        let b = net.bind("b.sim:1").unwrap();
        a.send("b.sim:1", &ping(1)).unwrap();
        a.send("b.sim:1", &ping(2)).unwrap();
        let log = net.delivery_log();
        let mut expected: Vec<_> = log.iter().map(|r| (r.deliver_at.unwrap(), r.seq)).collect();
        expected.sort();
        let mut got = Vec::new();
        while let RecvOutcome::Message(d) = b.recv(1000).unwrap() {
            got.push(d.message.sender);
        }
        assert_eq!(got.len(), 2);
        let order: Vec<u32> = expected.iter().map(|(_, seq)| *seq as u32 + 1).collect();
        assert_eq!(got, order);
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let net = SimNetwork::new(&cfg(1.0, 1));
        let a = net.bind("a.sim:1").unwrap();
        let b = net.bind("b.sim:1").unwrap();
        for i in 0..50 {
            a.send("b.sim:1", &ping(i)).unwrap();
        }
        assert_eq!(b.recv(10_000).unwrap(), RecvOutcome::Timeout);
        assert_eq!(net.stats().delivered, 0);
        assert_eq!(net.stats().dropped, 50);
    }

    #[test]
    fn empty_network_times_out_and_advances_clock() {
        let net = SimNetwork::new(&cfg(0.0, 1));
        let b = net.bind("b.sim:1").unwrap();
        assert_eq!(b.recv(10).unwrap(), RecvOutcome::Timeout);
        assert_eq!(net.now(), 10);
    }

    #[test]
    fn recv_orders_by_delivery_time() {
        let net = SimNetwork::new(&NetConfig {
            latency_ms: (0, 500),
            ..cfg(0.0, 9)
        });
        let a = net.bind("a.sim:1").unwrap();
        let b = net.bind("b.sim:1").unwrap();
        for i in 0..20 {
            a.send("b.sim:1", &ping(i)).unwrap();
        }
        let mut last = 0;
        let mut n = 0;
        while let RecvOutcome::Message(_) = b.recv(1000).unwrap() {
            assert!(net.now() >= last);
            last = net.now();
            n += 1;
        }
        assert_eq!(n, 20);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let run = |seed| {
            let net = SimNetwork::new(&cfg(0.3, seed));
            let a = net.bind("a.sim:1").unwrap();
            net.bind("b.sim:1").unwrap();
            for i in 0..1000 {
                a.send("b.sim:1", &ping(i)).unwrap();
            }
            net.delivery_log()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn closed_endpoint_rejects_and_drops() {
        let net = SimNetwork::new(&cfg(0.0, 1));
        let a = net.bind("a.sim:1").unwrap();
        let b = net.bind("b.sim:1").unwrap();
        a.send("b.sim:1", &ping(1)).unwrap();
        net.close("b.sim:1");
        assert_eq!(b.recv(0), Err(TransportError::EndpointClosed));
        net.advance_to(1000);
        assert_eq!(net.stats().delivered, 0);
        net.close("a.sim:1");
        assert_eq!(
            a.send("b.sim:1", &ping(1)),
            Err(TransportError::EndpointClosed)
        );
        assert!(net.bind("a.sim:1").is_ok());
        assert!(matches!(
            net.bind("a.sim:1"),
            Err(TransportError::AddressInUse(_))
        ));
    }

    #[test]
    fn partitions_block_cross_traffic_until_expiry() {
        let net = SimNetwork::new(&cfg(0.0, 1));
        let a = net.bind("a.sim:1").unwrap();
        let b = net.bind("b.sim:1").unwrap();
        net.partition(["a.sim:1".to_string()], 500);
        a.send("b.sim:1", &ping(1)).unwrap();
        assert_eq!(b.recv(400).unwrap(), RecvOutcome::Timeout);
        net.advance_to(500);
        a.send("b.sim:1", &ping(2)).unwrap();
        assert!(matches!(b.recv(200).unwrap(), RecvOutcome::Message(_)));
    }

    #[test]
    fn responder_replies() {
        let net = SimNetwork::new(&cfg(0.0, 1));
        let a = net.bind("a.sim:1").unwrap();
        net.set_responder("srv.sim:1", |d| {
            vec![(
                d.from.clone(),
                Message::new(MessageKind::Pong, 9, 0, d.message.payload.clone()),
            )]
        });
        a.send("srv.sim:1", &Message::new(MessageKind::Ping, 1, 0, vec![7]))
            .unwrap();
        match a.recv(500).unwrap() {
            RecvOutcome::Message(d) => {
                assert_eq!(d.message.kind, MessageKind::Pong);
                assert_eq!(d.message.payload, vec![7]);
                assert_eq!(d.from, "srv.sim:1");
            }
            RecvOutcome::Timeout => panic!("no pong"),
        }
    }

    #[test]
    fn delivery_fraction_tracks_loss_rate() {
        for p in [0.1, 0.3, 0.5] {
            let net = SimNetwork::new(&cfg(p, 77));
            let a = net.bind("a.sim:1").unwrap();
            net.bind("b.sim:1").unwrap();
            for i in 0..10_000 {
                a.send("b.sim:1", &ping(i)).unwrap();
            }
            net.advance_to(1_000);
            let frac = net.stats().delivered as f64 / 10_000.0;
            assert!((frac - (1.0 - p)).abs() <= 0.02, "p={p} frac={frac}");
        }
    }
}

//! Datagram transport: the wire codec and two interchangeable backends.
//!
//! [`SimNetwork`] is an in-process network on a virtual millisecond clock
//! with seeded loss and latency. [`UdpEndpoint`] wraps a real socket. Both
//! implement [`Transport`] and carry exactly the same frames.

mod codec;
mod sim;
mod udp;

pub use codec::{
    decode_message, encode_message, Message, MessageKind, HEADER_LEN, MAX_DATAGRAM, MAX_PAYLOAD,
    PROTOCOL_VERSION,
};
pub use sim::{DeliveryRecord, NetStats, SimEndpoint, SimNetwork};
pub use udp::UdpEndpoint;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("payload of {0} bytes exceeds the datagram limit")]
    PayloadTooLarge(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("endpoint closed")]
    EndpointClosed,
    #[error("address {0} already bound")]
    AddressInUse(String),
    #[error("bad address {0:?}")]
    BadAddress(String),
    #[error("io: {0}")]
    Io(String),
}

/// A received frame and the address it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub from: String,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecvOutcome {
    Message(Datagram),
    Timeout,
}

/// A send was accepted for transmission. Delivery is not guaranteed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub bytes: usize,
}

pub trait Transport: Send + Sync {
    fn local_addr(&self) -> &str;
    fn send(&self, dest: &str, msg: &Message) -> Result<SendReceipt, TransportError>;
    /// Waits up to `timeout_ms` for the next datagram.
    fn recv(&self, timeout_ms: u64) -> Result<RecvOutcome, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Simulated,
    Udp,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" | "simulated" => Ok(Backend::Simulated),
            "udp" => Ok(Backend::Udp),
            other => Err(format!("unknown backend {other:?} (expected sim or udp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub loss_rate: f64,
    /// Inclusive uniform one-way latency range.
    pub latency_ms: (u64, u64),
    pub seed: u64,
    pub mode: Backend,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            loss_rate: 0.0,
            latency_ms: (40, 90),
            seed: 0,
            mode: Backend::Simulated,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(format!("loss_rate {} outside [0, 1]", self.loss_rate));
        }
        if self.latency_ms.0 > self.latency_ms.1 {
            return Err(format!(
                "latency range min {} exceeds max {}",
                self.latency_ms.0, self.latency_ms.1
            ));
        }
        Ok(())
    }
}

/// Splits `host:port`, rejecting an empty host or a non-numeric port.
pub fn parse_address(addr: &str) -> Result<(&str, u16), TransportError> {
    let (host, port) = addr
        .rsplit_once(':')
        .ok_or_else(|| TransportError::BadAddress(addr.to_string()))?;
    if host.is_empty() || host.contains(|c: char| c.is_whitespace() || c == ';' || c == ',') {
        return Err(TransportError::BadAddress(addr.to_string()));
    }
    let port = port
        .parse()
        .map_err(|_| TransportError::BadAddress(addr.to_string()))?;
    Ok((host, port))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_parsing() {
        assert_eq!(parse_address("10.0.0.5:7000").unwrap(), ("10.0.0.5", 7000));
        assert_eq!(parse_address("node3.sim:1").unwrap(), ("node3.sim", 1));
        assert!(parse_address("10.0.0.5").is_err());
        assert!(parse_address(":7000").is_err());
        assert!(parse_address("host:99999").is_err());
        assert!(parse_address("a;b:1").is_err());
    }

    #[test]
    fn net_config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let bad = NetConfig {
            loss_rate: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NetConfig {
            latency_ms: (9, 3),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

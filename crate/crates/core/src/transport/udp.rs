use std::io::ErrorKind;
use std::net::UdpSocket;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use super::{
    decode_message, encode_message, Datagram, Message, RecvOutcome, SendReceipt, Transport,
    TransportError, MAX_DATAGRAM,
};

/// Real UDP socket endpoint.
pub struct UdpEndpoint {
    socket: UdpSocket,
    addr: String,
    closed: AtomicBool,
}

impl UdpEndpoint {
    pub fn bind(addr: &str) -> Result<Self, TransportError> {
        super::parse_address(addr)?;
        let socket = UdpSocket::bind(addr).map_err(|e| TransportError::Io(e.to_string()))?;
        let addr = socket
            .local_addr()
            .map_err(|e| TransportError::Io(e.to_string()))?
            .to_string();
        Ok(UdpEndpoint {
            socket,
            addr,
            closed: AtomicBool::new(false),
        })
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }

    fn check_open(&self) -> Result<(), TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::EndpointClosed);
        }
        Ok(())
    }
}

impl Transport for UdpEndpoint {
    fn local_addr(&self) -> &str {
        &self.addr
    }

    fn send(&self, dest: &str, msg: &Message) -> Result<SendReceipt, TransportError> {
        self.check_open()?;
        let frame = encode_message(msg)?;
        self.socket
            .send_to(&frame, dest)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(SendReceipt { bytes: frame.len() })
    }

    fn recv(&self, timeout_ms: u64) -> Result<RecvOutcome, TransportError> {
        self.check_open()?;
        // A zero read timeout means "block forever" for std sockets.
        self.socket
            .set_read_timeout(Some(Duration::from_millis(timeout_ms.max(1))))
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let mut buf = [0u8; MAX_DATAGRAM + 1];
        match self.socket.recv_from(&mut buf) {
            Ok((n, from)) => Ok(RecvOutcome::Message(Datagram {
                from: from.to_string(),
                message: decode_message(&buf[..n])?,
            })),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                Ok(RecvOutcome::Timeout)
            }
            Err(e) => Err(TransportError::Io(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::MessageKind;
    use super::*;

    #[test]
    fn loopback_roundtrip() {
        let a = UdpEndpoint::bind("127.0.0.1:0").unwrap();
        let b = UdpEndpoint::bind("127.0.0.1:0").unwrap();
        let m = Message::new(MessageKind::DataSubmit, 3, 7, b"man=1".to_vec());
        a.send(b.local_addr(), &m).unwrap();
        match b.recv(2000).unwrap() {
            RecvOutcome::Message(d) => {
                assert_eq!(d.message, m);
                assert_eq!(d.from, a.local_addr());
            }
            RecvOutcome::Timeout => panic!("datagram not received"),
        }
        assert_eq!(b.recv(10).unwrap(), RecvOutcome::Timeout);
        b.close();
        assert_eq!(b.recv(10), Err(TransportError::EndpointClosed));
    }
}

//! Message delivery between clients and servers.
//!
//! Both the in-process loopback and the TCP transport move encoded frames,
//! so traces, byte counts and decode errors are identical between them.

mod endpoint;
pub mod frame;
pub mod meter;
pub mod tcp;

use std::io;
use std::time::Duration;

use thiserror::Error;

pub use endpoint::{loopback_mesh, Endpoint};
pub use frame::{decode_frame, encode_frame, FrameDecoder, FrameError, Message, MessageKind};
pub use meter::{KindTally, Meter, MeterSnapshot, Party, RoundTally, Trace, WireCounters};
pub use tcp::{accept_clients, connect_to_servers, tcp_mesh};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{at}: no message within {after:?}")]
    Timeout { at: Party, after: Duration },
    #[error("{at}: connection closed{}", peer.map(|p| format!(" by {p}")).unwrap_or_default())]
    ConnectionClosed { at: Party, peer: Option<Party> },
    #[error("{at}: no link to {peer}")]
    UnknownPeer { at: Party, peer: Party },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::ring::{FixedPointConfig, RingVector};

    fn payload(v: u128) -> Message {
        let cfg = FixedPointConfig::new(64, 16).unwrap();
        let p = RingVector::from_values(cfg, vec![v, v + 1]).unwrap();
        Message::new(MessageKind::ShareUpload, 1, 1, Some(p)).unwrap()
    }

    fn exchange(clients: &mut [Endpoint], servers: &mut [Endpoint]) {
        let t = Duration::from_secs(5);
        clients[0].send(Party::Server(2), &payload(7)).unwrap();
        let (from, msg) = servers[1].recv(t).unwrap();
        assert_eq!((from, msg), (Party::Client(1), payload(7)));
        let done = Message::control(MessageKind::RoundComplete, 1, 2).unwrap();
        servers[1].send(Party::Client(2), &done).unwrap();
        assert_eq!(clients[1].recv(t).unwrap(), (Party::Server(2), done));
    }

    #[test]
    fn loopback_delivers_and_counts() {
        let meter = Arc::new(Meter::with_trace());
        let (mut c, mut s) = loopback_mesh(2, 2, meter.clone());
        exchange(&mut c, &mut s);
        let snap = meter.snapshot();
        assert_eq!(snap.round(1).payload_messages(), 1);
        assert_eq!(snap.round(1).kind(MessageKind::RoundComplete).messages, 1);
        assert_eq!(meter.counters(Party::Client(1)).bytes_sent, 24 + 16);
        assert_eq!(meter.counters(Party::Server(2)).bytes_received, 24 + 16);
        assert_eq!(meter.trace().unwrap().len(), 2);
    }

    #[test]
    fn tcp_matches_loopback_trace() {
        let lm = Arc::new(Meter::with_trace());
        let (mut c, mut s) = loopback_mesh(2, 2, lm.clone());
        exchange(&mut c, &mut s);
        let tm = Arc::new(Meter::with_trace());
        let (mut c, mut s) = tcp_mesh(2, 2, tm.clone(), Duration::from_secs(5)).unwrap();
        exchange(&mut c, &mut s);
        assert_eq!(lm.trace(), tm.trace());
        assert_eq!(lm.snapshot(), tm.snapshot());
    }

    #[test]
    fn silent_endpoint_times_out() {
        let (mut c, _s) = loopback_mesh(1, 1, Arc::new(Meter::new()));
        let err = c[0].recv(Duration::from_millis(20)).unwrap_err();
        assert!(matches!(err, TransportError::Timeout { .. }));
        let err = c[0].send(Party::Server(9), &payload(1)).unwrap_err();
        assert!(matches!(err, TransportError::UnknownPeer { .. }));
    }

    #[test]
    fn tcp_reports_closed_peers() {
        let (mut c, s) = tcp_mesh(1, 1, Arc::new(Meter::new()), Duration::from_secs(5)).unwrap();
        drop(s);
        let err = c[0].recv(Duration::from_secs(5)).unwrap_err();
        assert!(matches!(err, TransportError::ConnectionClosed { .. }), "{err}");
    }
}

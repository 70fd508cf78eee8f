use std::collections::BTreeMap;
use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Duration;

use super::frame::{decode_frame, encode_frame, FrameError, Message};
use super::meter::{Meter, Party};
use super::TransportError;

pub(crate) enum Inbound {
    Frame(Party, Vec<u8>),
    Closed(Party),
    Failed(FrameError),
}

enum Outgoing {
    Channel(Sender<Inbound>),
    Stream(TcpStream),
}

/// One participant's view of the network: a sending half per peer and a
/// single inbox fed by all peers.
pub struct Endpoint {
    me: Party,
    peers: BTreeMap<Party, Outgoing>,
    inbox: Receiver<Inbound>,
    meter: Arc<Meter>,
}

impl Endpoint {
    pub(crate) fn new(me: Party, inbox: Receiver<Inbound>, meter: Arc<Meter>) -> Self {
        Self {
            me,
            peers: BTreeMap::new(),
            inbox,
            meter,
        }
    }

    pub(crate) fn add_channel_peer(&mut self, peer: Party, tx: Sender<Inbound>) {
        self.peers.insert(peer, Outgoing::Channel(tx));
    }

    pub(crate) fn add_stream_peer(&mut self, peer: Party, stream: TcpStream) {
        self.peers.insert(peer, Outgoing::Stream(stream));
    }

    pub fn party(&self) -> Party {
        self.me
    }

    pub fn peers(&self) -> impl Iterator<Item = Party> + '_ {
        self.peers.keys().copied()
    }

    pub fn meter(&self) -> &Arc<Meter> {
        &self.meter
    }

    /// Sends `msg` to `to`; returns the frame size in bytes.
    pub fn send(&mut self, to: Party, msg: &Message) -> Result<usize, TransportError> {
        let me = self.me;
        let link = self
            .peers
            .get_mut(&to)
            .ok_or(TransportError::UnknownPeer { at: me, peer: to })?;
        let frame = encode_frame(msg);
        self.meter.on_send(me, to, msg.kind(), msg.round(), &frame);
        let len = frame.len();
        match link {
            Outgoing::Channel(tx) => tx
                .send(Inbound::Frame(me, frame))
                .map_err(|_| TransportError::ConnectionClosed { at: me, peer: Some(to) })?,
            Outgoing::Stream(s) => s.write_all(&frame).map_err(|source| TransportError::Io {
                context: format!("{me} sending to {to}"),
                source,
            })?,
        }
        Ok(len)
    }

    /// Blocks up to `timeout` for the next message from any peer.
    pub fn recv(&mut self, timeout: Duration) -> Result<(Party, Message), TransportError> {
        let me = self.me;
        match self.inbox.recv_timeout(timeout) {
            Ok(Inbound::Frame(from, bytes)) => {
                let msg = decode_frame(&bytes)?;
                self.meter.on_recv(me, msg.round(), bytes.len());
                Ok((from, msg))
            }
            Ok(Inbound::Closed(peer)) => Err(TransportError::ConnectionClosed { at: me, peer: Some(peer) }),
            Ok(Inbound::Failed(e)) => Err(TransportError::Frame(e)),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout { at: me, after: timeout }),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::ConnectionClosed { at: me, peer: None }),
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        for link in self.peers.values() {
            if let Outgoing::Stream(s) = link {
                let _ = s.shutdown(Shutdown::Write);
            }
        }
    }
}

/// In-process endpoints for `m` clients and `n` servers, every client
/// linked to every server. Frames are encoded and decoded exactly as on a
/// socket.
pub fn loopback_mesh(m: usize, n: usize, meter: Arc<Meter>) -> (Vec<Endpoint>, Vec<Endpoint>) {
    let make = |party: Party| {
        let (tx, rx) = mpsc::channel();
        (Endpoint::new(party, rx, meter.clone()), tx)
    };
    let (mut clients, ctx): (Vec<_>, Vec<_>) = (1..=m as u32).map(|i| make(Party::Client(i))).unzip();
    let (mut servers, stx): (Vec<_>, Vec<_>) = (1..=n as u32).map(|j| make(Party::Server(j))).unzip();
    for c in &mut clients {
        for (s, tx) in servers.iter().map(Endpoint::party).zip(&stx) {
            c.add_channel_peer(s, tx.clone());
        }
    }
    for s in &mut servers {
        for (c, tx) in clients.iter().map(Endpoint::party).zip(&ctx) {
            s.add_channel_peer(c, tx.clone());
        }
    }
    (clients, servers)
}

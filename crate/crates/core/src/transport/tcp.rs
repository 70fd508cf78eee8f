//! Stream-socket links: one persistent TCP connection per (client, server)
//! pair, opened with a `ROUND_BEGIN` handshake in each direction that
//! names the connecting party. Handshakes are not metered.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::endpoint::{Endpoint, Inbound};
use super::frame::{decode_frame, encode_frame, FrameDecoder, Message, MessageKind, HEADER_LEN};
use super::meter::{Meter, Party};
use super::TransportError;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> TransportError {
    let context = context.into();
    move |source| TransportError::Io { context, source }
}

fn handshake_frame(sender: u32) -> Vec<u8> {
    encode_frame(&Message::control(MessageKind::RoundBegin, 0, sender).expect("control frame"))
}

fn read_handshake(stream: &mut TcpStream, deadline: Instant) -> Result<u32, TransportError> {
    let wait = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
    stream
        .set_read_timeout(Some(wait))
        .map_err(io_err("setting handshake timeout"))?;
    let mut buf = [0u8; HEADER_LEN];
    stream.read_exact(&mut buf).map_err(io_err("reading handshake"))?;
    stream.set_read_timeout(None).map_err(io_err("clearing timeout"))?;
    let msg = decode_frame(&buf)?;
    if msg.kind() != MessageKind::RoundBegin || msg.round() != 0 {
        return Err(TransportError::Handshake(format!("unexpected {:?} frame", msg.kind())));
    }
    Ok(msg.sender())
}

fn spawn_reader(mut stream: TcpStream, peer: Party, inbox: Sender<Inbound>) {
    thread::spawn(move || {
        let mut decoder = FrameDecoder::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = match stream.read(&mut buf) {
                Ok(0) | Err(_) => {
                    let _ = inbox.send(Inbound::Closed(peer));
                    return;
                }
                Ok(n) => n,
            };
            decoder.push(&buf[..n]);
            loop {
                match decoder.next_frame() {
                    Ok(Some(frame)) => {
                        if inbox.send(Inbound::Frame(peer, frame)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = inbox.send(Inbound::Failed(e));
                        return;
                    }
                }
            }
        }
    });
}

fn attach(endpoint: &mut Endpoint, inbox: &Sender<Inbound>, peer: Party, stream: TcpStream) -> Result<(), TransportError> {
    stream.set_nodelay(true).map_err(io_err("setting TCP_NODELAY"))?;
    let reader = stream.try_clone().map_err(io_err("cloning stream"))?;
    spawn_reader(reader, peer, inbox.clone());
    endpoint.add_stream_peer(peer, stream);
    Ok(())
}

/// Accepts one connection from each of the `m` clients on `listener`.
pub fn accept_clients(
    server: u32,
    listener: &TcpListener,
    m: usize,
    meter: Arc<Meter>,
    timeout: Duration,
) -> Result<Endpoint, TransportError> {
    let me = Party::Server(server);
    let deadline = Instant::now() + timeout;
    let (tx, rx) = mpsc::channel();
    let mut endpoint = Endpoint::new(me, rx, meter);
    listener.set_nonblocking(true).map_err(io_err("configuring listener"))?;
    let mut joined = 0;
    while joined < m {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false).map_err(io_err("configuring stream"))?;
                let client = read_handshake(&mut stream, deadline)?;
                let peer = Party::Client(client);
                if client == 0 || client as usize > m || endpoint.peers().any(|p| p == peer) {
                    return Err(TransportError::Handshake(format!("unexpected client id {client}")));
                }
                stream
                    .write_all(&handshake_frame(server))
                    .map_err(io_err("answering handshake"))?;
                attach(&mut endpoint, &tx, peer, stream)?;
                joined += 1;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TransportError::Timeout { at: me, after: timeout });
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(io_err("accepting")(e)),
        }
    }
    Ok(endpoint)
}

/// Connects client `client` to every server; `servers[j - 1]` is server `j`.
/// Retries refused connections until `timeout` so servers may start late.
pub fn connect_to_servers(
    client: u32,
    servers: &[SocketAddr],
    meter: Arc<Meter>,
    timeout: Duration,
) -> Result<Endpoint, TransportError> {
    let me = Party::Client(client);
    let deadline = Instant::now() + timeout;
    let (tx, rx) = mpsc::channel();
    let mut endpoint = Endpoint::new(me, rx, meter);
    for (j, addr) in servers.iter().enumerate() {
        let expected = j as u32 + 1;
        let mut stream = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(20)),
                Err(e) => return Err(io_err(format!("{me} connecting to {addr}"))(e)),
            }
        };
        stream
            .write_all(&handshake_frame(client))
            .map_err(io_err("sending handshake"))?;
        let server = read_handshake(&mut stream, deadline)?;
        if server != expected {
            return Err(TransportError::Handshake(format!(
                "{addr} answered as server {server}, expected {expected}"
            )));
        }
        attach(&mut endpoint, &tx, Party::Server(server), stream)?;
    }
    Ok(endpoint)
}

/// Full client/server mesh over localhost sockets inside one process.
pub fn tcp_mesh(
    m: usize,
    n: usize,
    meter: Arc<Meter>,
    timeout: Duration,
) -> Result<(Vec<Endpoint>, Vec<Endpoint>), TransportError> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err("binding listener"))?;
    let addrs = listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err("reading listener address"))?;
    thread::scope(|scope| {
        let accepting: Vec<_> = listeners
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let meter = meter.clone();
                scope.spawn(move || accept_clients(j as u32 + 1, l, m, meter, timeout))
            })
            .collect();
        let clients = (1..=m as u32)
            .map(|i| connect_to_servers(i, &addrs, meter.clone(), timeout))
            .collect::<Result<Vec<_>, _>>();
        let servers = accepting
            .into_iter()
            .map(|h| h.join().expect("accept thread panicked"))
            .collect::<Result<Vec<_>, _>>();
        Ok((clients?, servers?))
    })
}

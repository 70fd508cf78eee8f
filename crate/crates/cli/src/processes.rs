use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::Arc;
use std::thread;

use fedshare_core::experiment::{prepare_data, ExperimentConfig, ExperimentError, ExperimentOutcome};
use fedshare_core::nn::evaluate_samples;
use fedshare_core::protocol::{
    assemble_rounds, client_actor, server_actor, ClientRoundReport, ClientState, ProtocolError, ServerRoundReport,
    ServerState,
};
use fedshare_core::transport::{accept_clients, connect_to_servers, Meter, MeterSnapshot, TransportError};
use serde::{Deserialize, Serialize};

const LISTEN_PREFIX: &str = "listening ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Failure {
    pub message: String,
    pub exit_code: i32,
    /// Caused by another participant's failure.
    pub secondary: bool,
}

/// What a participant process prints as its last stdout line.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ParticipantReport {
    pub clients: Vec<ClientRoundReport>,
    pub servers: Vec<ServerRoundReport>,
    pub meter: MeterSnapshot,
    pub failure: Option<Failure>,
}

fn failure(e: ProtocolError) -> Failure {
    let secondary = matches!(
        e,
        ProtocolError::Aborted { .. } | ProtocolError::Transport(TransportError::ConnectionClosed { .. })
    );
    let e: ExperimentError = e.into();
    Failure {
        message: e.to_string(),
        exit_code: e.exit_code(),
        secondary,
    }
}

/// Body of a participant process. Servers print their listening address
/// first; every participant ends with one JSON report line.
pub fn participant(cfg: &ExperimentConfig, role: Role, id: u32, servers: &[SocketAddr]) -> Result<(), ExperimentError> {
    let rc = cfg.round_config()?;
    let meter = Arc::new(Meter::new());
    let mut report = ParticipantReport::default();
    let mut stdout = std::io::stdout();
    match role {
        Role::Server => {
            let port = if cfg.listen_base_port == 0 {
                0
            } else {
                cfg.listen_base_port + id as u16 - 1
            };
            let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| TransportError::Io {
                context: format!("server {id} binding port {port}"),
                source: e,
            })?;
            let addr = listener.local_addr().map_err(|e| TransportError::Io {
                context: "reading listener address".into(),
                source: e,
            })?;
            writeln!(stdout, "{LISTEN_PREFIX}{addr}").and_then(|_| stdout.flush()).ok();
            let result = accept_clients(id, &listener, rc.m, meter.clone(), rc.timeout)
                .map_err(ProtocolError::from)
                .and_then(|mut ep| {
                    let mut state = ServerState::new(id);
                    server_actor(&mut state, &mut ep, &rc, &mut |r| report.servers.push(r))
                });
            report.failure = result.err().map(failure);
        }
        Role::Client => {
            let data = prepare_data(cfg)?;
            let test = data.test;
            let local = data
                .clients
                .into_iter()
                .nth(id as usize - 1)
                .ok_or_else(|| ExperimentError::Config(format!("no client {id}")))?;
            let eval = |p: &_| evaluate_samples(p, &test, rc.train.exec).unwrap_or(f64::NAN);
            let result = ClientState::new(id, local, &rc).and_then(|mut state| {
                let mut ep = connect_to_servers(id, servers, meter.clone(), rc.timeout)?;
                let evaluator: Option<&(dyn Fn(&_) -> f64 + Sync)> = if id == 1 { Some(&eval) } else { None };
                client_actor(&mut state, &mut ep, &rc, evaluator, &mut |r, _, _| {
                    if let Some(acc) = r.test_accuracy {
                        eprintln!("round {}: test accuracy {acc:.4}", r.round);
                    }
                    report.clients.push(r);
                })
            });
            report.failure = result.err().map(failure);
        }
    }
    report.meter = meter.snapshot();
    let line = serde_json::to_string(&report).expect("report serializes");
    writeln!(stdout, "{line}").and_then(|_| stdout.flush()).ok();
    Ok(())
}

fn spawn(cfg_json: &str, role: Role, id: u32, servers: &[SocketAddr]) -> Result<Child, ExperimentError> {
    let exe = std::env::current_exe().map_err(|e| ExperimentError::Config(format!("locating executable: {e}")))?;
    let mut cmd = Command::new(exe);
    cmd.arg("participant")
        .arg("--role")
        .arg(serde_json::to_value(role).expect("role").as_str().expect("string"))
        .arg("--id")
        .arg(id.to_string())
        .arg("--config-json")
        .arg(cfg_json);
    if !servers.is_empty() {
        let list: Vec<String> = servers.iter().map(ToString::to_string).collect();
        cmd.arg("--servers").arg(list.join(","));
    }
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| {
            TransportError::Io {
                context: format!("spawning {role:?} {id}"),
                source: e,
            }
            .into()
        })
}

fn collect(child: Child, reader: Option<BufReader<ChildStdout>>) -> thread::JoinHandle<Option<ParticipantReport>> {
    thread::spawn(move || {
        let mut child = child;
        let mut text = String::new();
        match reader {
            Some(mut r) => r.read_to_string(&mut text).ok()?,
            None => child.stdout.take()?.read_to_string(&mut text).ok()?,
        };
        let _ = child.wait();
        text.lines().rev().find_map(|l| serde_json::from_str(l).ok())
    })
}

/// Runs the protocol with every participant in its own OS process and
/// merges their reports. Timings and traffic counts come from the children.
pub fn run_processes(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let rc = cfg.round_config()?;
    let data = prepare_data(cfg)?;
    let mut cfg = cfg.clone();
    if cfg.data_dir.is_none() {
        cfg.data_dir = cfg.resolved_data_dir().ok();
    }
    let cfg_json = serde_json::to_string(&cfg).expect("config serializes");

    let mut started: Vec<(Child, Option<BufReader<ChildStdout>>)> = Vec::new();
    let mut addrs = Vec::new();
    let launch = (|| {
        for j in 1..=rc.n as u32 {
            let mut child = spawn(&cfg_json, Role::Server, j, &[])?;
            let mut reader = BufReader::new(child.stdout.take().expect("piped stdout"));
            started.push((child, None));
            let mut line = String::new();
            reader.read_line(&mut line).ok();
            let addr = line
                .trim()
                .strip_prefix(LISTEN_PREFIX)
                .and_then(|a| a.parse().ok())
                .ok_or_else(|| TransportError::Handshake(format!("server {j} did not report a listening address")))?;
            addrs.push(addr);
            started.last_mut().expect("just pushed").1 = Some(reader);
        }
        for i in 1..=rc.m as u32 {
            started.push((spawn(&cfg_json, Role::Client, i, &addrs)?, None));
        }
        Ok::<_, ExperimentError>(())
    })();
    if let Err(e) = launch {
        for (mut child, _) in started {
            let _ = child.kill();
            let _ = child.wait();
        }
        return Err(e);
    }
    let handles: Vec<_> = started.into_iter().map(|(child, reader)| collect(child, reader)).collect();

    let mut merged = MeterSnapshot::default();
    let (mut clients, mut servers) = (Vec::new(), Vec::new());
    let mut failures = Vec::new();
    for h in handles {
        match h.join().expect("collector panicked") {
            Some(report) => {
                merged.merge(&report.meter);
                clients.extend(report.clients);
                servers.extend(report.servers);
                failures.extend(report.failure);
            }
            None => failures.push(Failure {
                message: "participant exited without a report".into(),
                exit_code: 4,
                secondary: true,
            }),
        }
    }
    let rounds = assemble_rounds(&rc, &merged, &clients, &servers);
    let error = failures
        .into_iter()
        .min_by_key(|f| f.secondary)
        .map(|f| ExperimentError::Remote {
            message: f.message,
            exit_code: f.exit_code,
        });
    Ok(ExperimentOutcome {
        rounds,
        final_model: None,
        train_samples: data.train_samples(),
        test_samples: data.test.len(),
        error,
    })
}

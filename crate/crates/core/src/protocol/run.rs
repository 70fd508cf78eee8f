use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::state::{ClientState, ServerState};
use super::{ProtocolError, RoundConfig};
use crate::data::Dataset;
use crate::nn::ModelParams;
use crate::sharing::{ShareTag, ShareVector};
use crate::transport::{
    loopback_mesh, tcp_mesh, Endpoint, Message, MessageKind, Meter, MeterSnapshot, Party, Trace, TransportError,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Loopback,
    Sockets,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(TransportKind::Loopback),
            "sockets" | "tcp" => Ok(TransportKind::Sockets),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

pub type Evaluator<'a> = &'a (dyn Fn(&ModelParams) -> f64 + Sync);

#[derive(Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub transport: TransportKind,
    /// Scores the aggregate after every round (evaluated by client 1).
    pub evaluator: Option<Evaluator<'a>>,
    /// Keep every client's local model and every aggregate.
    pub capture_models: bool,
    pub trace: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundReport {
    pub client: u32,
    pub round: u32,
    pub train_ms: f64,
    pub share_ms: f64,
    pub wait_ms: f64,
    pub evaluate_ms: f64,
    pub wall_ms: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerRoundReport {
    pub server: u32,
    pub round: u32,
    pub aggregate_ms: f64,
}

/// Wall-clock measurements; slowest participant per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTimings {
    pub wall_ms: f64,
    pub train_ms: f64,
    pub share_ms: f64,
    pub wait_ms: f64,
    pub aggregate_ms: f64,
    pub evaluate_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub test_accuracy: Option<f64>,
    /// `SHARE_UPLOAD` plus `SIGMA_BROADCAST` frames.
    pub messages: u64,
    pub bytes: u64,
    pub share_uploads: u64,
    pub sigma_broadcasts: u64,
    pub control_messages: u64,
    /// Payload frames sent by client `i` at index `i - 1`.
    pub client_sends: Vec<u64>,
    pub server_sends: Vec<u64>,
    pub timings: RoundTimings,
}

#[derive(Debug)]
pub struct RunOutput {
    pub final_model: ModelParams,
    pub rounds: Vec<RoundRecord>,
    pub meter: MeterSnapshot,
    pub trace: Option<Trace>,
    /// `local_models[k][i]`: client `i + 1`'s model before aggregation in
    /// round `k + 1`. Empty unless captured.
    pub local_models: Vec<Vec<ModelParams>>,
    /// Aggregate after each round. Empty unless captured.
    pub aggregates: Vec<ModelParams>,
}

#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct RunError {
    #[source]
    pub source: ProtocolError,
    /// Records for the rounds every client completed.
    pub partial: Vec<RoundRecord>,
}

impl From<ProtocolError> for RunError {
    fn from(source: ProtocolError) -> Self {
        Self {
            source,
            partial: Vec::new(),
        }
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn abort_peers(ep: &mut Endpoint, round: u32) {
    let me = ep.party().id();
    let peers: Vec<Party> = ep.peers().collect();
    if let Ok(msg) = Message::control(MessageKind::Abort, round, me) {
        for p in peers {
            let _ = ep.send(p, &msg);
        }
    }
}

fn recv_or_incomplete(
    ep: &mut Endpoint,
    rc: &RoundConfig,
    round: u32,
    have: usize,
    need: usize,
) -> Result<(Party, Message), ProtocolError> {
    match ep.recv(rc.timeout) {
        Ok(v) => Ok(v),
        Err(TransportError::Timeout { at, .. }) => Err(ProtocolError::IncompleteRound {
            round,
            party: at,
            have,
            need,
        }),
        Err(e) => Err(e.into()),
    }
}

fn unexpected(ep: &Endpoint, from: Party, msg: &Message) -> ProtocolError {
    if msg.kind() == MessageKind::Abort {
        ProtocolError::Aborted { by: from }
    } else {
        ProtocolError::UnexpectedMessage {
            party: ep.party(),
            kind: msg.kind(),
            from,
        }
    }
}

/// Per-round callback: the client's report, its local model and the new aggregate.
pub type RoundHook<'a> = &'a mut dyn FnMut(ClientRoundReport, &ModelParams, &ModelParams);

/// Runs every round for one client. On failure the client's peers are sent
/// `ABORT` before the error is returned.
pub fn client_actor(
    state: &mut ClientState,
    ep: &mut Endpoint,
    rc: &RoundConfig,
    evaluator: Option<Evaluator<'_>>,
    on_round: RoundHook<'_>,
) -> Result<(), ProtocolError> {
    let res = client_loop(state, ep, rc, evaluator, on_round);
    if res.is_err() {
        abort_peers(ep, state.completed() + 1);
    }
    res
}

fn client_loop(
    state: &mut ClientState,
    ep: &mut Endpoint,
    rc: &RoundConfig,
    evaluator: Option<Evaluator<'_>>,
    on_round: RoundHook<'_>,
) -> Result<(), ProtocolError> {
    let id = state.id();
    for round in 1..=rc.iter as u32 {
        let start = Instant::now();
        let upload = state.client_round(rc)?;
        let train_ms = ms(start);

        let t = Instant::now();
        for share in upload.shares {
            let to = Party::Server(share.party);
            ep.send(to, &Message::new(MessageKind::ShareUpload, round, id, Some(share.payload))?)?;
        }
        let share_ms = ms(t);

        let t = Instant::now();
        let mut slots: Vec<Option<ShareVector>> = vec![None; rc.n];
        let mut have = 0;
        while have < rc.n {
            let (from, msg) = recv_or_incomplete(ep, rc, round, have, rc.n)?;
            let slot = match from {
                Party::Server(j)
                    if msg.kind() == MessageKind::SigmaBroadcast
                        && msg.round() == round
                        && msg.sender() == j
                        && (1..=rc.n as u32).contains(&j) =>
                {
                    &mut slots[j as usize - 1]
                }
                _ => return Err(unexpected(ep, from, &msg)),
            };
            if slot.is_some() {
                return Err(unexpected(ep, from, &msg));
            }
            *slot = Some(ShareVector {
                party: from.id(),
                tag: ShareTag::aggregate(round),
                payload: msg.into_payload().expect("payload kind"),
            });
            have += 1;
        }
        let sigmas: Vec<ShareVector> = slots.into_iter().map(|s| s.expect("filled")).collect();
        state.finish_round(&sigmas, rc)?;
        let wait_ms = ms(t);

        let t = Instant::now();
        let test_accuracy = evaluator.map(|f| f(state.weights()));
        let evaluate_ms = if test_accuracy.is_some() { ms(t) } else { 0.0 };
        let report = ClientRoundReport {
            client: id,
            round,
            train_ms,
            share_ms,
            wait_ms,
            evaluate_ms,
            wall_ms: ms(start),
            test_accuracy,
        };
        on_round(report, &upload.local, state.weights());
    }
    let done = Message::control(MessageKind::RoundComplete, rc.iter as u32, id)?;
    for j in 1..=rc.n as u32 {
        ep.send(Party::Server(j), &done)?;
    }
    Ok(())
}

/// Runs every round for one server, then waits for each client's
/// `ROUND_COMPLETE`.
pub fn server_actor(
    state: &mut ServerState,
    ep: &mut Endpoint,
    rc: &RoundConfig,
    on_round: &mut dyn FnMut(ServerRoundReport),
) -> Result<(), ProtocolError> {
    let res = server_loop(state, ep, rc, on_round);
    if res.is_err() {
        abort_peers(ep, state.round());
    }
    res
}

fn server_loop(
    state: &mut ServerState,
    ep: &mut Endpoint,
    rc: &RoundConfig,
    on_round: &mut dyn FnMut(ServerRoundReport),
) -> Result<(), ProtocolError> {
    let id = state.id();
    for round in 1..=rc.iter as u32 {
        while state.received() < rc.m {
            let (from, msg) = recv_or_incomplete(ep, rc, round, state.received(), rc.m)?;
            match from {
                Party::Client(i) if msg.kind() == MessageKind::ShareUpload && msg.sender() == i => {
                    let share = ShareVector {
                        party: id,
                        tag: ShareTag::new(msg.round(), i),
                        payload: msg.into_payload().expect("payload kind"),
                    };
                    state.accept(share, rc)?;
                }
                _ => return Err(unexpected(ep, from, &msg)),
            }
        }
        let t = Instant::now();
        let sigma = state.masked_sigma(rc)?;
        let aggregate_ms = ms(t);
        let msg = Message::new(MessageKind::SigmaBroadcast, round, id, Some(sigma.payload))?;
        for i in 1..=rc.m as u32 {
            ep.send(Party::Client(i), &msg)?;
        }
        on_round(ServerRoundReport {
            server: id,
            round,
            aggregate_ms,
        });
    }
    let mut finished = vec![false; rc.m];
    let mut have = 0;
    while have < rc.m {
        let (from, msg) = match recv_or_incomplete(ep, rc, rc.iter as u32, have, rc.m) {
            Err(ProtocolError::Transport(TransportError::ConnectionClosed {
                peer: Some(Party::Client(i)),
                ..
            })) if (1..=rc.m as u32).contains(&i) && finished[i as usize - 1] => continue,
            other => other?,
        };
        match from {
            Party::Client(i)
                if msg.kind() == MessageKind::RoundComplete
                    && (1..=rc.m as u32).contains(&i)
                    && !finished[i as usize - 1] =>
            {
                finished[i as usize - 1] = true;
                have += 1;
            }
            _ => return Err(unexpected(ep, from, &msg)),
        }
    }
    Ok(())
}

fn max_of<T>(items: &[&T], f: impl Fn(&T) -> f64) -> f64 {
    items.iter().map(|x| f(x)).fold(0.0, f64::max)
}

/// Builds one record per round that every client finished, from the merged
/// meter and the participants' reports.
pub fn assemble_rounds(
    rc: &RoundConfig,
    meter: &MeterSnapshot,
    clients: &[ClientRoundReport],
    servers: &[ServerRoundReport],
) -> Vec<RoundRecord> {
    (1..=rc.iter as u32)
        .map_while(|round| {
            let cr: Vec<&ClientRoundReport> = clients.iter().filter(|r| r.round == round).collect();
            if cr.len() < rc.m {
                return None;
            }
            let sr: Vec<&ServerRoundReport> = servers.iter().filter(|r| r.round == round).collect();
            let lead = cr.iter().find(|r| r.client == 1).copied().unwrap_or(cr[0]);
            let tally = meter.round(round);
            let control = MessageKind::ALL
                .iter()
                .filter(|k| !k.has_payload())
                .map(|k| tally.kind(*k).messages)
                .sum();
            Some(RoundRecord {
                round,
                test_accuracy: lead.test_accuracy,
                messages: tally.payload_messages(),
                bytes: tally.payload_bytes(),
                share_uploads: tally.kind(MessageKind::ShareUpload).messages,
                sigma_broadcasts: tally.kind(MessageKind::SigmaBroadcast).messages,
                control_messages: control,
                client_sends: (1..=rc.m as u32)
                    .map(|i| tally.payload_sent_by(Party::Client(i)))
                    .collect(),
                server_sends: (1..=rc.n as u32)
                    .map(|j| tally.payload_sent_by(Party::Server(j)))
                    .collect(),
                timings: RoundTimings {
                    wall_ms: lead.wall_ms,
                    train_ms: max_of(&cr, |r| r.train_ms),
                    share_ms: max_of(&cr, |r| r.share_ms),
                    wait_ms: max_of(&cr, |r| r.wait_ms),
                    aggregate_ms: max_of(&sr, |r| r.aggregate_ms),
                    evaluate_ms: lead.evaluate_ms,
                },
            })
        })
        .collect()
}

/// Secondary failures caused by another participant's abort rank last.
fn root_cause_rank(e: &ProtocolError) -> u8 {
    match e {
        ProtocolError::Aborted { .. } => 2,
        ProtocolError::Transport(TransportError::ConnectionClosed { .. }) => 1,
        _ => 0,
    }
}

struct ClientOutcome {
    result: Result<(), ProtocolError>,
    reports: Vec<ClientRoundReport>,
    locals: Vec<ModelParams>,
    aggregates: Vec<ModelParams>,
    weights: ModelParams,
}

/// Runs all `iter` rounds with `m` client and `n` server actors on their
/// own threads, connected by the chosen transport.
pub fn run_protocol(rc: &RoundConfig, datasets: Vec<Dataset>, opts: &RunOptions<'_>) -> Result<RunOutput, RunError> {
    rc.validate()?;
    if datasets.len() != rc.m {
        return Err(ProtocolError::Config(format!("{} datasets for {} clients", datasets.len(), rc.m)).into());
    }
    let clients = datasets
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i as u32 + 1, d, rc))
        .collect::<Result<Vec<_>, _>>()?;
    let meter = Arc::new(if opts.trace { Meter::with_trace() } else { Meter::new() });
    let (client_eps, server_eps) = match opts.transport {
        TransportKind::Loopback => loopback_mesh(rc.m, rc.n, meter.clone()),
        TransportKind::Sockets => tcp_mesh(rc.m, rc.n, meter.clone(), rc.timeout).map_err(ProtocolError::from)?,
    };

    let (client_out, server_out) = thread::scope(|scope| {
        let client_handles: Vec<_> = clients
            .into_iter()
            .zip(client_eps)
            .map(|(mut st, mut ep)| {
                scope.spawn(move || {
                    let evaluator = if st.id() == 1 { opts.evaluator } else { None };
                    let (mut reports, mut locals, mut aggregates) = (Vec::new(), Vec::new(), Vec::new());
                    let lead = st.id() == 1;
                    let result = client_actor(&mut st, &mut ep, rc, evaluator, &mut |rep, local, agg| {
                        reports.push(rep);
                        if opts.capture_models {
                            locals.push(local.clone());
                            if lead {
                                aggregates.push(agg.clone());
                            }
                        }
                    });
                    ClientOutcome {
                        result,
                        reports,
                        locals,
                        aggregates,
                        weights: st.weights().clone(),
                    }
                })
            })
            .collect();
        let server_handles: Vec<_> = server_eps
            .into_iter()
            .enumerate()
            .map(|(j, mut ep)| {
                scope.spawn(move || {
                    let mut st = ServerState::new(j as u32 + 1);
                    let mut reports = Vec::new();
                    let result = server_actor(&mut st, &mut ep, rc, &mut |r| reports.push(r));
                    (result, reports)
                })
            })
            .collect();
        let c: Vec<ClientOutcome> = client_handles.into_iter().map(|h| h.join().expect("client panicked")).collect();
        let s: Vec<_> = server_handles.into_iter().map(|h| h.join().expect("server panicked")).collect();
        (c, s)
    });

    let mut errors = Vec::new();
    let mut client_reports = Vec::new();
    let mut local_models: Vec<Vec<ModelParams>> = Vec::new();
    let mut aggregates = Vec::new();
    let mut final_model = None;
    for out in client_out {
        if let Err(e) = out.result {
            errors.push(e);
        }
        client_reports.extend(out.reports);
        for (k, local) in out.locals.into_iter().enumerate() {
            if local_models.len() <= k {
                local_models.push(Vec::new());
            }
            local_models[k].push(local);
        }
        if aggregates.is_empty() {
            aggregates = out.aggregates;
        }
        final_model.get_or_insert(out.weights);
    }
    let mut server_reports = Vec::new();
    for (result, reports) in server_out {
        if let Err(e) = result {
            errors.push(e);
        }
        server_reports.extend(reports);
    }
    let snapshot = meter.snapshot();
    let rounds = assemble_rounds(rc, &snapshot, &client_reports, &server_reports);
    if let Some(source) = errors.into_iter().min_by_key(root_cause_rank) {
        return Err(RunError {
            source,
            partial: rounds,
        });
    }
    Ok(RunOutput {
        final_model: final_model.expect("m >= 1"),
        rounds,
        meter: snapshot,
        trace: meter.trace(),
        local_models,
        aggregates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_clients, synthetic_dataset};
    use crate::nn::evaluate_samples;
    use crate::ring::FixedPointConfig;

    fn setup(m: usize, n: usize, iter: usize) -> (RoundConfig, Vec<Dataset>, Dataset) {
        let rc = RoundConfig::new(m, n, iter, FixedPointConfig::new(128, 32).unwrap(), 9);
        let data = synthetic_dataset(3, 400, 10).unwrap();
        let test = data.head(100);
        let train = data.select(&(100..400).collect::<Vec<_>>());
        (rc, partition_clients(&train, m).unwrap(), test)
    }

    #[test]
    fn loopback_run_counts_messages_and_learns() {
        let (rc, parts, test) = setup(3, 2, 2);
        let eval = |p: &ModelParams| evaluate_samples(p, &test, rc.train.exec).unwrap();
        let opts = RunOptions {
            evaluator: Some(&eval),
            ..Default::default()
        };
        let out = run_protocol(&rc, parts, &opts).unwrap();
        assert_eq!(out.rounds.len(), 2);
        for r in &out.rounds {
            assert_eq!(r.messages, 2 * 3 * 2);
            assert_eq!(r.share_uploads, 6);
            assert_eq!(r.sigma_broadcasts, 6);
            assert_eq!(r.client_sends, vec![2, 2, 2]);
            assert_eq!(r.server_sends, vec![3, 3]);
            assert!(r.test_accuracy.unwrap() > 0.5);
        }
        assert_eq!(out.rounds[1].control_messages, 6);
    }

    #[test]
    fn runs_are_reproducible_and_transport_independent() {
        let (rc, parts, _) = setup(2, 3, 2);
        let opts = RunOptions {
            capture_models: true,
            ..Default::default()
        };
        let a = run_protocol(&rc, parts.clone(), &opts).unwrap();
        let b = run_protocol(&rc, parts.clone(), &opts).unwrap();
        assert_eq!(a.final_model, b.final_model);
        let tcp = RunOptions {
            transport: TransportKind::Sockets,
            ..opts
        };
        let c = run_protocol(&rc, parts, &tcp).unwrap();
        assert_eq!(a.final_model, c.final_model);
        assert_eq!(a.meter, c.meter);
        assert_eq!(a.local_models.len(), 2);
        assert_eq!(a.local_models[0].len(), 2);
        assert_eq!(a.aggregates.len(), 2);
        assert_eq!(a.aggregates[1], a.final_model);
    }

    #[test]
    fn single_server_degenerates_to_plain_aggregation() {
        let (rc, parts, _) = setup(2, 1, 1);
        let out = run_protocol(&rc, parts, &RunOptions::default()).unwrap();
        assert_eq!(out.rounds[0].messages, 4);
        assert!(out.final_model.all_finite());
    }

    #[test]
    fn rejects_dataset_count_mismatch() {
        let (rc, mut parts, _) = setup(2, 2, 1);
        parts.pop();
        let err = run_protocol(&rc, parts, &RunOptions::default()).unwrap_err();
        assert!(matches!(err.source, ProtocolError::Config(_)));
    }
}

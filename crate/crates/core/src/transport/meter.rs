//! Message and byte accounting, plus optional per-link frame traces.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::frame::MessageKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "role", content = "id", rename_all = "lowercase")]
pub enum Party {
    Client(u32),
    Server(u32),
}

impl Party {
    pub fn id(self) -> u32 {
        match self {
            Party::Client(i) | Party::Server(i) => i,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Client(i) => write!(f, "client {i}"),
            Party::Server(j) => write!(f, "server {j}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireCounters {
    pub messages_sent: u64,
    pub messages_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl WireCounters {
    fn merge(&mut self, o: &WireCounters) {
        self.messages_sent += o.messages_sent;
        self.messages_received += o.messages_received;
        self.bytes_sent += o.bytes_sent;
        self.bytes_received += o.bytes_received;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTally {
    pub messages: u64,
    pub bytes: u64,
}

/// Everything sent during one protocol round, keyed by the round field of
/// the frames.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTally {
    pub per_kind: BTreeMap<MessageKind, KindTally>,
    #[serde(with = "pairs")]
    pub per_party: BTreeMap<Party, WireCounters>,
    /// Payload frames sent, by sender.
    #[serde(with = "pairs")]
    pub payload_sent: BTreeMap<Party, u64>,
}

impl RoundTally {
    /// Count of `SHARE_UPLOAD` plus `SIGMA_BROADCAST` frames.
    pub fn payload_messages(&self) -> u64 {
        self.payload_tally().messages
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_tally().bytes
    }

    fn payload_tally(&self) -> KindTally {
        self.per_kind
            .iter()
            .filter(|(k, _)| k.has_payload())
            .fold(KindTally::default(), |a, (_, t)| KindTally {
                messages: a.messages + t.messages,
                bytes: a.bytes + t.bytes,
            })
    }

    pub fn kind(&self, kind: MessageKind) -> KindTally {
        self.per_kind.get(&kind).copied().unwrap_or_default()
    }

    pub fn party(&self, party: Party) -> WireCounters {
        self.per_party.get(&party).copied().unwrap_or_default()
    }

    pub fn payload_sent_by(&self, party: Party) -> u64 {
        self.payload_sent.get(&party).copied().unwrap_or_default()
    }

    fn merge(&mut self, other: &RoundTally) {
        for (k, t) in &other.per_kind {
            let e = self.per_kind.entry(*k).or_default();
            e.messages += t.messages;
            e.bytes += t.bytes;
        }
        for (p, c) in &other.per_party {
            self.per_party.entry(*p).or_default().merge(c);
        }
        for (p, c) in &other.payload_sent {
            *self.payload_sent.entry(*p).or_default() += c;
        }
    }
}

/// Serialises a map as a list of `(key, value)` pairs.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K, V, S>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error>
    where
        K: Serialize,
        V: Serialize,
        S: Serializer,
    {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Directed link `(from, to)` mapped to the frames sent on it, in order.
pub type Trace = BTreeMap<(Party, Party), Vec<Vec<u8>>>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSnapshot {
    pub rounds: BTreeMap<u32, RoundTally>,
    #[serde(with = "pairs")]
    pub totals: BTreeMap<Party, WireCounters>,
}

impl MeterSnapshot {
    /// Combines counts observed by separate processes.
    pub fn merge(&mut self, other: &MeterSnapshot) {
        for (r, t) in &other.rounds {
            self.rounds.entry(*r).or_default().merge(t);
        }
        for (p, c) in &other.totals {
            self.totals.entry(*p).or_default().merge(c);
        }
    }

    pub fn round(&self, round: u32) -> RoundTally {
        self.rounds.get(&round).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Default)]
struct MeterState {
    snapshot: MeterSnapshot,
    trace: Option<Trace>,
}

/// Shared, thread-safe counters for every endpoint of a run.
///
/// Sends are attributed to the sender and receives to the receiver, so a
/// meter shared by all endpoints of an in-process run sees each message
/// once on each side.
#[derive(Debug, Default)]
pub struct Meter {
    state: Mutex<MeterState>,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_trace() -> Self {
        let m = Self::default();
        m.state.lock().unwrap().trace = Some(Trace::new());
        m
    }

    pub(crate) fn on_send(&self, from: Party, to: Party, kind: MessageKind, round: u32, frame: &[u8]) {
        let bytes = frame.len() as u64;
        let mut st = self.state.lock().unwrap();
        let tally = st.snapshot.rounds.entry(round).or_default();
        let k = tally.per_kind.entry(kind).or_default();
        k.messages += 1;
        k.bytes += bytes;
        if kind.has_payload() {
            *tally.payload_sent.entry(from).or_default() += 1;
        }
        let p = tally.per_party.entry(from).or_default();
        p.messages_sent += 1;
        p.bytes_sent += bytes;
        let t = st.snapshot.totals.entry(from).or_default();
        t.messages_sent += 1;
        t.bytes_sent += bytes;
        if let Some(trace) = st.trace.as_mut() {
            trace.entry((from, to)).or_default().push(frame.to_vec());
        }
    }

    pub(crate) fn on_recv(&self, at: Party, round: u32, bytes: usize) {
        let bytes = bytes as u64;
        let mut st = self.state.lock().unwrap();
        let p = st.snapshot.rounds.entry(round).or_default().per_party.entry(at).or_default();
        p.messages_received += 1;
        p.bytes_received += bytes;
        let t = st.snapshot.totals.entry(at).or_default();
        t.messages_received += 1;
        t.bytes_received += bytes;
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        self.state.lock().unwrap().snapshot.clone()
    }

    pub fn counters(&self, party: Party) -> WireCounters {
        self.state
            .lock()
            .unwrap()
            .snapshot
            .totals
            .get(&party)
            .copied()
            .unwrap_or_default()
    }

    pub fn trace(&self) -> Option<Trace> {
        self.state.lock().unwrap().trace.clone()
    }
}

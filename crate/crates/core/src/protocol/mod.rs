//! Client and aggregator state machines and the round loop that drives them.
//!
//! Each round every client trains locally, encodes its flattened model and
//! sends one additive share to each server. Server `j` sums the `m` shares it
//! holds, multiplies by `encode(1/D)`, truncates its own result, masks it
//! with its slice of a zero-sharing known only to the servers and returns
//! it to every client. Clients add the `n` sigmas, decode and continue from
//! the resulting average.

mod run;
mod state;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::nn::{Arch, NnError, TrainConfig};
use crate::ring::{encode, FixedPointConfig, RingElement, RingError};
use crate::sharing::SharingError;
use crate::transport::{FrameError, MessageKind, Party, TransportError};

pub use run::{
    assemble_rounds, client_actor, run_protocol, server_actor, ClientRoundReport, Evaluator, RoundRecord, RoundTimings,
    RunError, RunOptions, RunOutput, ServerRoundReport, TransportKind,
};
pub use state::{compute_final_model, initial_weights, sigma_mask, ClientState, ClientUpload, LocalTrainer, ServerState};

/// Integer bits a protocol ring must keep above `2 * l_f`.
pub const MIN_HEADROOM_BITS: u32 = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivisorMode {
    /// Divide by the client count `m`, giving the federated average.
    #[default]
    Clients,
    /// Divide by the server count `n`.
    Servers,
}

impl std::str::FromStr for DivisorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clients" | "m" => Ok(DivisorMode::Clients),
            "servers" | "n" => Ok(DivisorMode::Servers),
            other => Err(format!("unknown divisor mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub m: usize,
    pub n: usize,
    pub iter: usize,
    pub cfg: FixedPointConfig,
    pub arch: Arch,
    pub train: TrainConfig,
    pub divisor_mode: DivisorMode,
    pub seed: u64,
    pub timeout: Duration,
}

impl RoundConfig {
    pub fn new(m: usize, n: usize, iter: usize, cfg: FixedPointConfig, seed: u64) -> Self {
        Self {
            m,
            n,
            iter,
            cfg,
            arch: Arch::mnist(),
            train: TrainConfig::default(),
            divisor_mode: DivisorMode::Clients,
            seed,
            timeout: Duration::from_secs(600),
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |msg: String| Err(ProtocolError::Config(msg));
        if self.m < 1 || self.n < 1 || self.iter < 1 {
            return bad(format!("m, n and iter must be at least 1 (got {}, {}, {})", self.m, self.n, self.iter));
        }
        if self.iter > u32::MAX as usize || self.m > u32::MAX as usize || self.n > u32::MAX as usize {
            return bad("participant or round count exceeds 32 bits".into());
        }
        let (l, lf) = (self.cfg.ring_bits(), self.cfg.frac_bits());
        if l < 2 * lf + MIN_HEADROOM_BITS {
            return bad(format!(
                "ring of {l} bits cannot hold products with {} fractional bits plus {MIN_HEADROOM_BITS} integer bits; use l >= {}",
                2 * lf,
                2 * lf + MIN_HEADROOM_BITS
            ));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        match self.divisor_mode {
            DivisorMode::Clients => self.m,
            DivisorMode::Servers => self.n,
        }
    }

    /// `encode(1 / D)`.
    pub fn inverse_divisor(&self) -> Result<RingElement, RingError> {
        encode(1.0 / self.divisor() as f64, self.cfg)
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("round {round}: {party} holds {have} of {need} expected messages")]
    IncompleteRound {
        round: u32,
        party: Party,
        have: usize,
        need: usize,
    },
    #[error("round {round}: second share from client {owner}")]
    DuplicateShare { round: u32, owner: u32 },
    #[error("{party} expected round {expected}, got {found}")]
    WrongRound { party: Party, expected: u32, found: u32 },
    #[error("{party} received a share addressed to party {addressed}")]
    Misrouted { party: Party, addressed: u32 },
    #[error("{party} received an unexpected {kind:?} from {from}")]
    UnexpectedMessage {
        party: Party,
        kind: MessageKind,
        from: Party,
    },
    #[error("run aborted by {by}")]
    Aborted { by: Party },
    #[error("all {iter} rounds already completed")]
    RoundsExhausted { iter: usize },
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

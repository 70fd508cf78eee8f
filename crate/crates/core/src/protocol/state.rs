use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use super::{ProtocolError, RoundConfig};
use crate::data::{Dataset, SubsetSampler};
use crate::nn::{init_params, train, ModelParams};
use crate::ring::RingVector;
use crate::seed::stream;
use crate::sharing::{
    reconstruct_truncated_with, split_secret_shares_with, zero_sharing, SharingError, ShareTag, ShareVector,
};
use crate::transport::{MessageKind, Party};

/// A client's private data and the randomness that drives its local
/// training. Shared by the protocol client and the plaintext oracles so
/// both see identical local models.
#[derive(Clone, Debug)]
pub struct LocalTrainer {
    id: u32,
    data: Dataset,
    sampler: SubsetSampler,
    rng: ChaCha20Rng,
}

impl LocalTrainer {
    pub fn new(id: u32, data: Dataset, rc: &RoundConfig) -> Result<Self, ProtocolError> {
        let sampler = SubsetSampler::per_round(data.len(), rc.iter)?;
        Ok(Self {
            id,
            data,
            sampler,
            rng: stream(rc.seed, "train", &[id as u64]),
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    /// Trains a copy of `weights` on the next `len / iter` block of local data.
    pub fn train_round(&mut self, weights: &ModelParams, rc: &RoundConfig) -> Result<ModelParams, ProtocolError> {
        let idx = self.sampler.next_indices(&mut self.rng).to_vec();
        let batch = self.data.batch(&idx);
        Ok(train(weights, &batch, &rc.train, &mut self.rng)?)
    }
}

/// Initial weights, identical for every client of a run.
pub fn initial_weights(rc: &RoundConfig) -> ModelParams {
    init_params(&rc.arch, &mut stream(rc.seed, "init", &[]))
}

#[derive(Clone, Debug)]
pub struct ClientUpload {
    pub local: ModelParams,
    /// `shares[j - 1]` goes to server `j`.
    pub shares: Vec<ShareVector>,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    trainer: LocalTrainer,
    weights: ModelParams,
    completed: u32,
    share_rng: ChaCha20Rng,
}

impl ClientState {
    pub fn new(id: u32, data: Dataset, rc: &RoundConfig) -> Result<Self, ProtocolError> {
        Ok(Self {
            trainer: LocalTrainer::new(id, data, rc)?,
            weights: initial_weights(rc),
            completed: 0,
            share_rng: stream(rc.seed, "share", &[id as u64]),
        })
    }

    pub fn id(&self) -> u32 {
        self.trainer.id
    }

    pub fn weights(&self) -> &ModelParams {
        &self.weights
    }

    /// Rounds finished so far; the next round is `completed() + 1`.
    pub fn completed(&self) -> u32 {
        self.completed
    }

    /// Local training on this round's subset, then one share per server.
    pub fn client_round(&mut self, rc: &RoundConfig) -> Result<ClientUpload, ProtocolError> {
        if self.completed as usize >= rc.iter {
            return Err(ProtocolError::RoundsExhausted { iter: rc.iter });
        }
        let local = self.trainer.train_round(&self.weights, rc)?;
        let encoded = RingVector::encode_with(&local.flatten(), rc.cfg, rc.train.exec)?;
        let tag = ShareTag::new(self.completed + 1, self.id());
        let shares = split_secret_shares_with(&encoded, rc.n, tag, &mut self.share_rng, rc.train.exec)?;
        Ok(ClientUpload { local, shares })
    }

    /// Adopts the aggregate reconstructed from the servers' sigmas.
    pub fn finish_round(&mut self, sigmas: &[ShareVector], rc: &RoundConfig) -> Result<(), ProtocolError> {
        self.weights = compute_final_model(sigmas, rc)?;
        self.completed += 1;
        Ok(())
    }
}

/// Decodes `sum_j sigma_j` into model weights.
pub fn compute_final_model(sigmas: &[ShareVector], rc: &RoundConfig) -> Result<ModelParams, ProtocolError> {
    let sum = reconstruct_truncated_with(sigmas, rc.train.exec)?;
    Ok(ModelParams::unflatten(&sum.decode(), &rc.arch)?)
}

/// Server `server`'s slice of the round's zero-sharing. All servers derive
/// the same sharing from the run seed, so the slices cancel in the sum.
pub fn sigma_mask(rc: &RoundConfig, round: u32, server: u32, len: usize) -> Result<RingVector, ProtocolError> {
    let mut rng = stream(rc.seed, "sigma-mask", &[round as u64]);
    let mut parts = zero_sharing(rc.n, len, rc.cfg, &mut rng)?;
    Ok(parts.swap_remove(server as usize - 1))
}

#[derive(Clone, Debug)]
pub struct ServerState {
    id: u32,
    round: u32,
    received: BTreeMap<u32, ShareVector>,
}

impl ServerState {
    pub fn new(id: u32) -> Self {
        Self {
            id,
            round: 1,
            received: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    /// The round whose shares are being collected.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn received(&self) -> usize {
        self.received.len()
    }

    pub fn accept(&mut self, share: ShareVector, rc: &RoundConfig) -> Result<(), ProtocolError> {
        let me = Party::Server(self.id);
        if share.tag.round != self.round {
            return Err(ProtocolError::WrongRound {
                party: me,
                expected: self.round,
                found: share.tag.round,
            });
        }
        if share.party != self.id {
            return Err(ProtocolError::Misrouted {
                party: me,
                addressed: share.party,
            });
        }
        let owner = share.tag.owner;
        if owner == 0 || owner as usize > rc.m {
            return Err(ProtocolError::UnexpectedMessage {
                party: me,
                kind: MessageKind::ShareUpload,
                from: Party::Client(owner),
            });
        }
        if self.received.contains_key(&owner) {
            return Err(ProtocolError::DuplicateShare {
                round: self.round,
                owner,
            });
        }
        if let Some(first) = self.received.values().next() {
            if first.payload.len() != share.payload.len() || first.payload.cfg() != share.payload.cfg() {
                return Err(SharingError::LengthMismatch {
                    expected: first.payload.len(),
                    found: share.payload.len(),
                }
                .into());
            }
        }
        self.received.insert(owner, share);
        Ok(())
    }

    /// `truncate(sum_i share_i * encode(1/D))` over this server's shares.
    /// Closes the round.
    pub fn federated_sum(&mut self, rc: &RoundConfig) -> Result<RingVector, ProtocolError> {
        if self.received.len() != rc.m {
            return Err(ProtocolError::IncompleteRound {
                round: self.round,
                party: Party::Server(self.id),
                have: self.received.len(),
                need: rc.m,
            });
        }
        let exec = rc.train.exec;
        let mut shares = std::mem::take(&mut self.received).into_values();
        let mut acc = shares.next().expect("m >= 1").payload;
        for s in shares {
            acc.add_assign_with(&s.payload, exec)?;
        }
        let sigma = acc.scale_with(rc.inverse_divisor()?, exec)?.truncate_with(exec);
        self.round += 1;
        Ok(sigma)
    }

    /// [`federated_sum`](Self::federated_sum) re-randomised with this
    /// server's mask slice, ready to broadcast.
    pub fn masked_sigma(&mut self, rc: &RoundConfig) -> Result<ShareVector, ProtocolError> {
        let round = self.round;
        let mut sigma = self.federated_sum(rc)?;
        sigma.add_assign_with(&sigma_mask(rc, round, self.id, sigma.len())?, rc.train.exec)?;
        Ok(ShareVector {
            party: self.id,
            tag: ShareTag::aggregate(round),
            payload: sigma,
        })
    }
}

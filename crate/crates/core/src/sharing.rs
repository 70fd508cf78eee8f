//! n-out-of-n additive secret sharing over [`RingVector`]s.
//!
//! Shares `1..n-1` are uniform ring vectors drawn from the caller's RNG and
//! share `n` is forced by `secret - sum(others)`. The first `n - 1` shares
//! are therefore a function of the randomness alone, which is what lets any
//! `n - 1` of them reveal nothing about the secret.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::exec::Execution;
use crate::ring::{FixedPointConfig, RingError, RingVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SharingError {
    #[error("party count must be at least 1, got {0}")]
    InvalidPartyCount(usize),
    #[error("cannot share an empty vector")]
    EmptySecret,
    #[error("no share for party {party}")]
    MissingShare { party: u32 },
    #[error("party {party} appears more than once")]
    DuplicateParty { party: u32 },
    #[error("share lengths differ: {expected} vs {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("shares belong to different groups: {expected:?} vs {found:?}")]
    GroupMismatch { expected: ShareTag, found: ShareTag },
    #[error(transparent)]
    Ring(#[from] RingError),
}

/// Identifies the sharing a share belongs to.
///
/// `owner` is the client id whose model was shared; aggregate shares
/// (server sigmas) use [`ShareTag::AGGREGATE_OWNER`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ShareTag {
    pub round: u32,
    pub owner: u32,
}

impl ShareTag {
    pub const AGGREGATE_OWNER: u32 = 0;

    pub fn new(round: u32, owner: u32) -> Self {
        Self { round, owner }
    }

    pub fn aggregate(round: u32) -> Self {
        Self::new(round, Self::AGGREGATE_OWNER)
    }
}

/// One party's additive share, `[a]_j`. Party indices are 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShareVector {
    pub party: u32,
    pub tag: ShareTag,
    pub payload: RingVector,
}

pub fn split_secret_shares<R: RngCore + ?Sized>(
    secret: &RingVector,
    n: usize,
    tag: ShareTag,
    rng: &mut R,
) -> Result<Vec<ShareVector>, SharingError> {
    split_secret_shares_with(secret, n, tag, rng, Execution::default())
}

/// As [`split_secret_shares`]. Randomness is always drawn sequentially
/// (share 1 element by element, then share 2, ...); only the final
/// subtraction is split across threads.
pub fn split_secret_shares_with<R: RngCore + ?Sized>(
    secret: &RingVector,
    n: usize,
    tag: ShareTag,
    rng: &mut R,
    exec: Execution,
) -> Result<Vec<ShareVector>, SharingError> {
    if n < 1 {
        return Err(SharingError::InvalidPartyCount(n));
    }
    if secret.is_empty() {
        return Err(SharingError::EmptySecret);
    }
    let cfg = secret.cfg();
    let mut last = secret.clone();
    let mut shares = Vec::with_capacity(n);
    for party in 1..n {
        let r = RingVector::random(cfg, secret.len(), rng);
        last.sub_assign_with(&r, exec)?;
        shares.push(ShareVector {
            party: party as u32,
            tag,
            payload: r,
        });
    }
    shares.push(ShareVector {
        party: n as u32,
        tag,
        payload: last,
    });
    Ok(shares)
}

/// Checks that `shares` form one complete group: same tag, same ring,
/// equal lengths, and party indices exactly `1..=shares.len()`.
pub fn validate_group(shares: &[ShareVector]) -> Result<(), SharingError> {
    let first = shares.first().ok_or(SharingError::MissingShare { party: 1 })?;
    let mut seen = BTreeSet::new();
    for s in shares {
        if s.tag != first.tag {
            return Err(SharingError::GroupMismatch {
                expected: first.tag,
                found: s.tag,
            });
        }
        if s.payload.len() != first.payload.len() {
            return Err(SharingError::LengthMismatch {
                expected: first.payload.len(),
                found: s.payload.len(),
            });
        }
        if s.payload.cfg() != first.payload.cfg() {
            return Err(RingError::ConfigMismatch {
                left: first.payload.cfg(),
                right: s.payload.cfg(),
            }
            .into());
        }
        if !seen.insert(s.party) {
            return Err(SharingError::DuplicateParty { party: s.party });
        }
    }
    if let Some(party) = (1..=shares.len() as u32).find(|p| !seen.contains(p)) {
        return Err(SharingError::MissingShare { party });
    }
    Ok(())
}

pub fn reconstruct(shares: &[ShareVector]) -> Result<RingVector, SharingError> {
    reconstruct_with(shares, Execution::default())
}

pub fn reconstruct_with(shares: &[ShareVector], exec: Execution) -> Result<RingVector, SharingError> {
    validate_group(shares)?;
    let mut acc = RingVector::zeros(shares[0].payload.cfg(), shares[0].payload.len());
    for s in shares {
        acc.add_assign_with(&s.payload, exec)?;
    }
    Ok(acc)
}

/// Reconstructs a group whose shares were each truncated locally.
///
/// The sum is read modulo `2^(l - l_f)` and sign-extended, see
/// [`RingVector::narrow`].
pub fn reconstruct_truncated(shares: &[ShareVector]) -> Result<RingVector, SharingError> {
    reconstruct_truncated_with(shares, Execution::default())
}

pub fn reconstruct_truncated_with(shares: &[ShareVector], exec: Execution) -> Result<RingVector, SharingError> {
    Ok(reconstruct_with(shares, exec)?.narrow_with(exec))
}

/// `n` vectors summing to zero; the first `n - 1` are uniform.
pub fn zero_sharing<R: RngCore + ?Sized>(
    n: usize,
    len: usize,
    cfg: FixedPointConfig,
    rng: &mut R,
) -> Result<Vec<RingVector>, SharingError> {
    if n < 1 {
        return Err(SharingError::InvalidPartyCount(n));
    }
    let mut last = RingVector::zeros(cfg, len);
    let mut out = Vec::with_capacity(n);
    for _ in 1..n {
        let r = RingVector::random(cfg, len, rng);
        last.sub_assign(&r)?;
        out.push(r);
    }
    out.push(last);
    Ok(out)
}

/// Adds a fresh zero-sharing to a complete share group.
pub fn rerandomize<R: RngCore + ?Sized>(
    mut shares: Vec<ShareVector>,
    rng: &mut R,
) -> Result<Vec<ShareVector>, SharingError> {
    validate_group(&shares)?;
    let (cfg, len) = (shares[0].payload.cfg(), shares[0].payload.len());
    shares.sort_by_key(|s| s.party);
    let zeros = zero_sharing(shares.len(), len, cfg, rng)?;
    for (s, z) in shares.iter_mut().zip(&zeros) {
        s.payload.add_assign(z)?;
    }
    Ok(shares)
}

/// Outcome of a share-local truncation sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TruncationStats {
    pub trials: usize,
    /// Largest `|sum_j truncate(share_j) - truncate(sum_j share_j)|` in ring units.
    pub max_small_error: u128,
    /// Trials whose narrowed error exceeded `n` units.
    pub large_errors: usize,
    /// Trials whose error exceeded `n` units when the truncated shares are
    /// summed modulo `2^l` without narrowing.
    pub wide_large_errors: usize,
}

/// Monte Carlo estimate of the error introduced by truncating each share
/// locally instead of truncating the reconstructed value.
///
/// Each trial draws a secret with `|secret| < 2^magnitude_bits` (in ring
/// units), shares it among `n` parties and compares both truncation orders.
/// Trials use independent seeded streams so the sweep is reproducible under
/// any execution strategy.
pub fn truncation_sweep(
    cfg: FixedPointConfig,
    n: usize,
    magnitude_bits: u32,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<TruncationStats, SharingError> {
    if n < 1 {
        return Err(SharingError::InvalidPartyCount(n));
    }
    let bound = 1i128 << magnitude_bits.min(126);
    let errors = exec.map_indices(trials, 64 * n, |t| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let raw = (cfg.sample(&mut rng) as i128).rem_euclid(2 * bound) - bound;
        let secret = RingVector::from_values(cfg, vec![cfg.from_signed(raw)]).expect("reduced");
        let shares = split_secret_shares_with(&secret, n, ShareTag::new(1, 1), &mut rng, Execution::Sequential)
            .expect("valid party count");
        let truncated: Vec<ShareVector> = shares
            .into_iter()
            .map(|s| ShareVector {
                payload: s.payload.truncate_with(Execution::Sequential),
                ..s
            })
            .collect();
        let wide = reconstruct_with(&truncated, Execution::Sequential).expect("complete group");
        let narrow = wide.narrow_with(Execution::Sequential);
        let global = secret.truncate_with(Execution::Sequential).as_slice()[0];
        let err = |v: &RingVector| cfg.to_signed(cfg.reduce(v.as_slice()[0].wrapping_sub(global))).unsigned_abs();
        (err(&narrow), err(&wide))
    });
    let mut stats = TruncationStats {
        trials,
        ..Default::default()
    };
    for (e, wide) in errors {
        if e > n as u128 {
            stats.large_errors += 1;
        } else {
            stats.max_small_error = stats.max_small_error.max(e);
        }
        if wide > n as u128 {
            stats.wide_large_errors += 1;
        }
    }
    Ok(stats)
}

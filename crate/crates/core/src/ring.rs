//! Fixed-point embedding of reals into the integer ring `Z_{2^l}`.
//!
//! A real `x` is stored as `round(x * 2^l_f)` reduced mod `2^l`, with the
//! upper half of the ring read as negative (two's complement). Elements are
//! held in a `u128` so the same code serves every width `2 <= l <= 128`.
//!
//! Multiplying two encoded values yields `2 * l_f` fractional bits; callers
//! must follow [`ring_scale`] with [`truncate`] before decoding.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

pub const MAX_RING_BITS: u32 = 128;

const CHUNK: usize = 8192;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RingError {
    #[error("value {value} is not representable with {int_bits} integer bits")]
    Overflow { value: f64, int_bits: u32 },
    #[error("invalid fixed-point layout: l={l}, l_f={frac_bits}")]
    InvalidConfig { l: u32, frac_bits: u32 },
    #[error("ring configurations differ: {left:?} vs {right:?}")]
    ConfigMismatch {
        left: FixedPointConfig,
        right: FixedPointConfig,
    },
    #[error("element {value} does not fit in a {l}-bit ring")]
    ValueOutOfRange { value: u128, l: u32 },
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Ring width and fractional-bit layout: `l = l_x + l_f + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawConfig", into = "RawConfig")]
pub struct FixedPointConfig {
    l: u32,
    frac_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct RawConfig {
    l: u32,
    l_f: u32,
}

impl TryFrom<RawConfig> for FixedPointConfig {
    type Error = RingError;
    fn try_from(raw: RawConfig) -> Result<Self, RingError> {
        FixedPointConfig::new(raw.l, raw.l_f)
    }
}

impl From<FixedPointConfig> for RawConfig {
    fn from(cfg: FixedPointConfig) -> Self {
        RawConfig {
            l: cfg.l,
            l_f: cfg.frac_bits,
        }
    }
}

impl FixedPointConfig {
    /// `l` total bits, `frac_bits` of them fractional; requires
    /// `2 <= l <= 128` and `1 <= frac_bits <= l - 2`.
    pub fn new(l: u32, frac_bits: u32) -> Result<Self, RingError> {
        if !(2..=MAX_RING_BITS).contains(&l) || frac_bits < 1 || frac_bits > l - 2 {
            return Err(RingError::InvalidConfig { l, frac_bits });
        }
        Ok(Self { l, frac_bits })
    }

    /// Builds the config from its integer and fractional parts.
    pub fn from_parts(int_bits: u32, frac_bits: u32) -> Result<Self, RingError> {
        Self::new(int_bits + frac_bits + 1, frac_bits)
    }

    pub fn ring_bits(&self) -> u32 {
        self.l
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn int_bits(&self) -> u32 {
        self.l - self.frac_bits - 1
    }

    pub fn mask(&self) -> u128 {
        if self.l == 128 {
            u128::MAX
        } else {
            (1u128 << self.l) - 1
        }
    }

    /// Smallest positive representable value, `2^-l_f`.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn reduce(&self, v: u128) -> u128 {
        v & self.mask()
    }

    /// Two's-complement reading of a reduced element.
    pub fn to_signed(&self, v: u128) -> i128 {
        let shift = 128 - self.l;
        ((v << shift) as i128) >> shift
    }

    pub fn from_signed(&self, v: i128) -> u128 {
        self.reduce(v as u128)
    }

    /// Uniform element of the ring. Draws one `u64` for `l <= 64`, two otherwise.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> u128 {
        let lo = rng.next_u64() as u128;
        let v = if self.l <= 64 {
            lo
        } else {
            lo | ((rng.next_u64() as u128) << 64)
        };
        self.reduce(v)
    }

    pub fn element(&self, value: u128) -> Result<RingElement, RingError> {
        RingElement::new(value, *self)
    }

    fn check(&self, other: &FixedPointConfig) -> Result<(), RingError> {
        if self != other {
            return Err(RingError::ConfigMismatch {
                left: *self,
                right: *other,
            });
        }
        Ok(())
    }

    fn encode_raw(&self, x: f64) -> Result<u128, RingError> {
        let overflow = || RingError::Overflow {
            value: x,
            int_bits: self.int_bits(),
        };
        if !x.is_finite() || x.abs() >= (self.int_bits() as f64).exp2() {
            return Err(overflow());
        }
        // f64::round breaks ties away from zero.
        let scaled = (x * (self.frac_bits as f64).exp2()).round();
        let half = ((self.l - 1) as f64).exp2();
        if scaled >= half || scaled < -half {
            return Err(overflow());
        }
        Ok(self.from_signed(scaled as i128))
    }

    fn decode_raw(&self, v: u128) -> f64 {
        self.to_signed(v) as f64 * self.ulp()
    }

    fn truncate_raw(&self, v: u128) -> u128 {
        self.from_signed(self.to_signed(v) >> self.frac_bits)
    }

    fn narrow_raw(&self, v: u128) -> u128 {
        let shift = 128 - (self.l - self.frac_bits);
        self.from_signed(((v << shift) as i128) >> shift)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RingElement {
    value: u128,
    cfg: FixedPointConfig,
}

impl RingElement {
    pub fn new(value: u128, cfg: FixedPointConfig) -> Result<Self, RingError> {
        if value > cfg.mask() {
            return Err(RingError::ValueOutOfRange { value, l: cfg.l });
        }
        Ok(Self { value, cfg })
    }

    pub fn zero(cfg: FixedPointConfig) -> Self {
        Self { value: 0, cfg }
    }

    pub fn value(&self) -> u128 {
        self.value
    }

    pub fn cfg(&self) -> FixedPointConfig {
        self.cfg
    }

    pub fn signed(&self) -> i128 {
        self.cfg.to_signed(self.value)
    }
}

/// `round(x * 2^l_f) mod 2^l`; fails when `|x| >= 2^l_x`.
pub fn encode(x: f64, cfg: FixedPointConfig) -> Result<RingElement, RingError> {
    Ok(RingElement {
        value: cfg.encode_raw(x)?,
        cfg,
    })
}

pub fn decode(r: RingElement) -> f64 {
    r.cfg.decode_raw(r.value)
}

pub fn ring_add(a: RingElement, b: RingElement) -> Result<RingElement, RingError> {
    a.cfg.check(&b.cfg)?;
    Ok(RingElement {
        value: a.cfg.reduce(a.value.wrapping_add(b.value)),
        cfg: a.cfg,
    })
}

pub fn ring_sub(a: RingElement, b: RingElement) -> Result<RingElement, RingError> {
    a.cfg.check(&b.cfg)?;
    Ok(RingElement {
        value: a.cfg.reduce(a.value.wrapping_sub(b.value)),
        cfg: a.cfg,
    })
}

pub fn ring_mul(a: RingElement, b: RingElement) -> Result<RingElement, RingError> {
    a.cfg.check(&b.cfg)?;
    Ok(RingElement {
        value: a.cfg.reduce(a.value.wrapping_mul(b.value)),
        cfg: a.cfg,
    })
}

/// Signed arithmetic shift right by `l_f` (floor toward negative infinity).
pub fn truncate(r: RingElement) -> RingElement {
    RingElement {
        value: r.cfg.truncate_raw(r.value),
        cfg: r.cfg,
    }
}

/// Elementwise `v_i * c`; the result carries `2 * l_f` fractional bits.
pub fn ring_scale(v: &RingVector, c: RingElement) -> Result<RingVector, RingError> {
    v.scale(c)
}

/// A vector of elements sharing one [`FixedPointConfig`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RingVector {
    elems: Vec<u128>,
    cfg: FixedPointConfig,
}

impl RingVector {
    pub fn zeros(cfg: FixedPointConfig, len: usize) -> Self {
        Self {
            elems: vec![0; len],
            cfg,
        }
    }

    pub fn from_values(cfg: FixedPointConfig, elems: Vec<u128>) -> Result<Self, RingError> {
        if let Some(&value) = elems.iter().find(|&&v| v > cfg.mask()) {
            return Err(RingError::ValueOutOfRange { value, l: cfg.l });
        }
        Ok(Self { elems, cfg })
    }

    pub fn random<R: RngCore + ?Sized>(cfg: FixedPointConfig, len: usize, rng: &mut R) -> Self {
        Self {
            elems: (0..len).map(|_| cfg.sample(rng)).collect(),
            cfg,
        }
    }

    pub fn encode(xs: &[f64], cfg: FixedPointConfig) -> Result<Self, RingError> {
        Self::encode_with(xs, cfg, Execution::default())
    }

    pub fn encode_with(xs: &[f64], cfg: FixedPointConfig, exec: Execution) -> Result<Self, RingError> {
        let mut elems = vec![0u128; xs.len()];
        let failures: std::sync::Mutex<Option<(usize, RingError)>> = std::sync::Mutex::new(None);
        exec.for_each_chunk_mut(&mut elems, CHUNK, 4, |ci, out| {
            let base = ci * CHUNK;
            for (k, slot) in out.iter_mut().enumerate() {
                match cfg.encode_raw(xs[base + k]) {
                    Ok(v) => *slot = v,
                    Err(e) => {
                        let mut f = failures.lock().unwrap();
                        // report the lowest failing index regardless of scheduling
                        if f.as_ref().is_none_or(|(i, _)| base + k < *i) {
                            *f = Some((base + k, e));
                        }
                        return;
                    }
                }
            }
        });
        match failures.into_inner().unwrap() {
            Some((_, e)) => Err(e),
            None => Ok(Self { elems, cfg }),
        }
    }

    pub fn decode(&self) -> Vec<f64> {
        self.elems.iter().map(|&v| self.cfg.decode_raw(v)).collect()
    }

    pub fn cfg(&self) -> FixedPointConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn as_slice(&self) -> &[u128] {
        &self.elems
    }

    pub fn into_values(self) -> Vec<u128> {
        self.elems
    }

    pub fn get(&self, i: usize) -> Option<RingElement> {
        self.elems.get(i).map(|&value| RingElement {
            value,
            cfg: self.cfg,
        })
    }

    fn check_compatible(&self, other: &RingVector) -> Result<(), RingError> {
        self.cfg.check(&other.cfg)?;
        if self.len() != other.len() {
            return Err(RingError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    fn zip_in_place(&mut self, other: &RingVector, exec: Execution, op: fn(u128, u128) -> u128) -> Result<(), RingError> {
        self.check_compatible(other)?;
        let mask = self.cfg.mask();
        let rhs = &other.elems;
        exec.for_each_chunk_mut(&mut self.elems, CHUNK, 1, |ci, out| {
            let base = ci * CHUNK;
            for (k, a) in out.iter_mut().enumerate() {
                *a = op(*a, rhs[base + k]) & mask;
            }
        });
        Ok(())
    }

    pub fn add_assign(&mut self, other: &RingVector) -> Result<(), RingError> {
        self.add_assign_with(other, Execution::default())
    }

    pub fn add_assign_with(&mut self, other: &RingVector, exec: Execution) -> Result<(), RingError> {
        self.zip_in_place(other, exec, u128::wrapping_add)
    }

    pub fn sub_assign(&mut self, other: &RingVector) -> Result<(), RingError> {
        self.sub_assign_with(other, Execution::default())
    }

    pub fn sub_assign_with(&mut self, other: &RingVector, exec: Execution) -> Result<(), RingError> {
        self.zip_in_place(other, exec, u128::wrapping_sub)
    }

    pub fn add(&self, other: &RingVector) -> Result<RingVector, RingError> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &RingVector) -> Result<RingVector, RingError> {
        let mut out = self.clone();
        out.sub_assign(other)?;
        Ok(out)
    }

    pub fn scale(&self, c: RingElement) -> Result<RingVector, RingError> {
        self.scale_with(c, Execution::default())
    }

    pub fn scale_with(&self, c: RingElement, exec: Execution) -> Result<RingVector, RingError> {
        self.cfg.check(&c.cfg)?;
        let mut out = self.clone();
        let (mask, c) = (self.cfg.mask(), c.value);
        exec.for_each_chunk_mut(&mut out.elems, CHUNK, 2, |_, chunk| {
            for a in chunk {
                *a = a.wrapping_mul(c) & mask;
            }
        });
        Ok(out)
    }

    /// Keeps the low `l - l_f` bits of every element and sign-extends them.
    ///
    /// A sum of individually truncated shares is only meaningful modulo
    /// `2^(l - l_f)`: every wrap of the untruncated share sum leaves a
    /// multiple of `2^(l - l_f)` behind. Narrowing discards exactly that.
    pub fn narrow(&self) -> RingVector {
        self.narrow_with(Execution::default())
    }

    pub fn narrow_with(&self, exec: Execution) -> RingVector {
        let cfg = self.cfg;
        let mut out = self.clone();
        exec.for_each_chunk_mut(&mut out.elems, CHUNK, 1, |_, c| {
            for v in c {
                *v = cfg.narrow_raw(*v);
            }
        });
        out
    }

    pub fn truncate(&self) -> RingVector {
        self.truncate_with(Execution::default())
    }

    pub fn truncate_with(&self, exec: Execution) -> RingVector {
        let mut out = self.clone();
        let cfg = self.cfg;
        exec.for_each_chunk_mut(&mut out.elems, CHUNK, 1, |_, chunk| {
            for a in chunk {
                *a = cfg.truncate_raw(*a);
            }
        });
        out
    }
}

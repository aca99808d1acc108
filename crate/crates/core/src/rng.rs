//! Keyed, counter-based pseudorandomness.
//!
//! Every random quantity in a run is a pure function of a [`Seed64`] and a
//! counter, so clients and the federator can regenerate identical perturbation
//! directions from `(base seed, t, l, r)` without exchanging any state.
//!
//! The generator is SplitMix64 evaluated in counter form: output `i` of key `k`
//! is `mix64(k + (i + 1) * GAMMA)`. Gaussian variates use Box–Muller over a
//! fixed pair of counters, with the transcendental functions taken from the
//! pure-Rust `libm` port so the bits do not depend on the platform libm.

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::DenseVector;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

const DOMAIN_DIRECTION: u64 = 0x6469_7265_6374_696f;

/// Bit widths of the packed `(t, l, r)` index used by [`derive_seed`].
pub const EPOCH_BITS: u32 = 24;
pub const LOCAL_EPOCH_BITS: u32 = 16;
pub const DIRECTION_BITS: u32 = 24;

/// The SplitMix64 output finalizer. A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed64(pub u64);

impl Seed64 {
    /// Domain-separated derivation of a child seed from an arbitrary list of
    /// integers. Used for mini-batches, partitions and synthetic data; the
    /// perturbation directions go through [`derive_seed`] instead.
    pub fn derive(self, domain: u64, parts: &[u64]) -> Seed64 {
        let mut h = mix64(self.0 ^ mix64(domain.wrapping_add(GAMMA)));
        for &p in parts {
            h = mix64(h ^ mix64(p.wrapping_add(GAMMA)));
        }
        Seed64(h)
    }

    pub fn rng(self) -> KeyedRng {
        KeyedRng::new(self)
    }
}

/// Seed of the `r`-th perturbation direction of local epoch `l` in global
/// epoch `t`.
///
/// The triple is packed into disjoint bit fields (`t < 2^24`, `l < 2^16`,
/// `r < 2^24`) and pushed through bijective mixing steps, so for a fixed base
/// seed distinct triples always give distinct seeds.
///
/// # Panics
///
/// If an index does not fit its bit field.
pub fn derive_seed(base: Seed64, t: u64, l: u64, r: u64) -> Seed64 {
    assert!(t < 1 << EPOCH_BITS, "global epoch index {t} out of range");
    assert!(l < 1 << LOCAL_EPOCH_BITS, "local epoch index {l} out of range");
    assert!(r < 1 << DIRECTION_BITS, "direction index {r} out of range");
    let packed = (t << (LOCAL_EPOCH_BITS + DIRECTION_BITS)) | (l << DIRECTION_BITS) | r;
    Seed64(mix64(base.0 ^ mix64(packed ^ DOMAIN_DIRECTION)))
}

/// Counter-based generator keyed by a seed.
#[derive(Debug, Clone)]
pub struct KeyedRng {
    key: u64,
    counter: u64,
}

impl KeyedRng {
    pub fn new(seed: Seed64) -> Self {
        Self {
            key: seed.0,
            counter: 0,
        }
    }

    /// The `i`-th raw output of the stream keyed by `key`.
    #[inline]
    pub fn word_at(key: u64, i: u64) -> u64 {
        mix64(key.wrapping_add(i.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    /// Uniform double in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        unit_open_high(self.next_u64())
    }

    /// Unbiased integer in `[0, bound)`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        // Lemire's multiply-and-reject.
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }
}

impl RngCore for KeyedRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let w = Self::word_at(self.key, self.counter);
        self.counter = self.counter.wrapping_add(1);
        w
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

#[inline]
fn unit_open_high(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn unit_open_low(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Box–Muller pair from counters `2q` and `2q + 1` of the stream.
#[inline]
fn normal_pair(key: u64, q: u64) -> (f64, f64) {
    let u1 = unit_open_low(KeyedRng::word_at(key, 2 * q));
    let u2 = unit_open_high(KeyedRng::word_at(key, 2 * q + 1));
    let radius = libm::sqrt(-2.0 * libm::log(u1));
    let (s, c) = libm::sincos(std::f64::consts::TAU * u2);
    (radius * c, radius * s)
}

/// Random-access stream of iid standard normals keyed by a seed.
///
/// Coordinate `p` is a pure function of `(seed, p)`, which is what allows
/// in-place perturbation to regenerate a direction one coordinate at a time.
#[derive(Debug, Clone)]
pub struct NormalStream {
    key: u64,
    next: u64,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: Seed64) -> Self {
        Self {
            key: seed.0,
            next: 0,
            spare: None,
        }
    }

    /// The `p`-th normal of the stream.
    pub fn at(seed: Seed64, p: u64) -> f64 {
        let (a, b) = normal_pair(seed.0, p / 2);
        if p % 2 == 0 {
            a
        } else {
            b
        }
    }
}

impl Iterator for NormalStream {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        if let Some(s) = self.spare.take() {
            return Some(s);
        }
        let (a, b) = normal_pair(self.key, self.next);
        self.next += 1;
        self.spare = Some(b);
        Some(a)
    }
}

/// Distribution of the perturbation directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    /// Uniform on the unit sphere; the estimator carries a factor `d`.
    #[serde(rename = "sphere")]
    SphereUniform,
    /// iid standard normal coordinates; no dimension factor.
    #[serde(rename = "gaussian")]
    GaussianIid,
}

impl DirectionKind {
    /// Multiplier applied to the directional difference quotient.
    pub fn estimator_scale(self, dim: usize) -> f64 {
        match self {
            DirectionKind::SphereUniform => dim as f64,
            DirectionKind::GaussianIid => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DirectionKind::SphereUniform => "sphere",
            DirectionKind::GaussianIid => "gaussian",
        }
    }
}

/// Samples a perturbation direction of dimension `dim`.
pub fn sample_direction(seed: Seed64, dim: usize, kind: DirectionKind) -> Result<DenseVector> {
    if dim == 0 {
        return Err(Error::InvalidDimension(dim));
    }
    let mut entries: Vec<f64> = NormalStream::new(seed).take(dim).collect();
    if kind == DirectionKind::SphereUniform {
        let norm = sphere_norm(&entries);
        for x in &mut entries {
            *x /= norm;
        }
    }
    Ok(DenseVector::from_vec(entries))
}

#[inline]
fn sphere_norm(entries: &[f64]) -> f64 {
    norm_from_squared_sum(entries.iter().map(|x| x * x).sum::<f64>())
}

/// A zero draw has probability zero; it is left unnormalized.
#[inline]
pub(crate) fn norm_from_squared_sum(sq: f64) -> f64 {
    if sq > 0.0 {
        sq.sqrt()
    } else {
        1.0
    }
}

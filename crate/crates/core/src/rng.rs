//! Counter-based, splittable random streams.
//!
//! A stream is keyed by a 64-bit seed and a [`StreamId`] `(run, client,
//! iteration)`. The id is folded into a ChaCha8 stream number with the
//! SplitMix64 finalizer, so the draws a client makes at a given iteration do
//! not depend on how many draws any other client or iteration consumed.
//!
//! Mappings from raw 64-bit words:
//! - uniform `[0, 1)`: top 53 bits times `2^-53`;
//! - normal: Box-Muller with `u1 = 1 - uniform()` (so `u1 > 0`), cosine branch
//!   only, one standard normal per two words;
//! - index in `[0, n)`: Lemire multiply-shift with rejection (unbiased);
//! - Bernoulli(p): `uniform() < p`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Client slot reserved for draws made by the coordinating server or by the
/// optimizer itself (block coins, shared sample indices).
pub const SERVER: u64 = u64::MAX;

/// Run slot used by the synthetic data generators.
pub const DATAGEN_RUN: u64 = 0xD47A_6E11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub run: u64,
    pub client: u64,
    pub iteration: u64,
}

impl StreamId {
    pub fn new(run: u64, client: u64, iteration: u64) -> Self {
        StreamId { run, client, iteration }
    }

    fn fold(&self) -> u64 {
        let mut h = splitmix64(self.run);
        h = splitmix64(h ^ self.client);
        splitmix64(h ^ self.iteration)
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&splitmix64(seed.wrapping_add(i as u64)).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(id.fold());
        RngStream { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

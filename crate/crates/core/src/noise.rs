//! Counter-based Gaussian increment streams.
//!
//! Every random number in the laboratory is a pure function of
//! `(seed, stream_id, counter)`. Replicas get distinct stream ids, so
//! ensembles are reproducible bit for bit regardless of scheduling order or
//! worker count, and any single path can be replayed in isolation.
//!
//! The generator is a keyed SplitMix64 walk: the 64-bit counter advances by
//! the golden-gamma constant from a key derived from `(seed, stream_id)`,
//! and each output is the SplitMix64 finalizer of that state. Uniforms map
//! to normals through the fixed inverse-CDF transform in [`crate::math`];
//! no rejection step, so the counter advances by exactly one per draw.

use serde::{Deserialize, Serialize};

use crate::math::normal_quantile;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible stream of Gaussian/uniform variates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    #[serde(skip)]
    key: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut s = Self {
            seed,
            stream_id,
            counter: 0,
            key: 0,
        };
        s.key = Self::derive_key(seed, stream_id);
        s
    }

    fn derive_key(seed: u64, stream_id: u64) -> u64 {
        // Two mixing rounds so that neighbouring (seed, stream) pairs land on
        // unrelated walks.
        mix64(seed ^ mix64(stream_id.wrapping_mul(GOLDEN_GAMMA) ^ 0x5851_F42D_4C95_7F2D))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Rebuild the derived key after deserialization.
    pub fn rekey(&mut self) {
        self.key = Self::derive_key(self.seed, self.stream_id);
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform on the open interval (0, 1); never returns an endpoint, so it
    /// is always a valid quantile argument.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal variate via the fixed inverse-CDF transform.
    #[inline]
    pub fn next_standard_normal(&mut self) -> f64 {
        normal_quantile(self.next_uniform())
    }

    /// Fill `dw` with a Brownian increment over a step of length `h`,
    /// i.e. i.i.d. N(0, h) coordinates.
    #[inline]
    pub fn fill_wiener(&mut self, h: f64, dw: &mut [f64]) {
        let s = h.sqrt();
        for w in dw.iter_mut() {
            *w = s * self.next_standard_normal();
        }
    }
}

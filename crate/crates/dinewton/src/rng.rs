//! Portable seeded random number generation.
//!
//! All randomness in the crate flows through [`PortableRng`], a ChaCha8 stream
//! cipher generator. Independent substreams are derived from a single seed by
//! the ChaCha stream index, so instances are bit-reproducible across runs and
//! platforms. Normal deviates are produced by Box-Muller on top of the uniform
//! stream rather than a library sampler, so another implementation only has to
//! match the distributions, not the exact bit stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Substream used for anchor positions of a localization instance.
pub const STREAM_ANCHORS: u64 = 0;
/// Substream used for measurement noise of a localization instance.
pub const STREAM_NOISE: u64 = 1;
/// Substream used for per-node initial iterates.
pub const STREAM_INIT: u64 = 2;
/// Substream used for power-method start vectors.
pub const STREAM_POWER: u64 = 3;

/// Seeded ChaCha8 generator with named substreams.
pub struct PortableRng {
    inner: ChaCha8Rng,
}

impl PortableRng {
    /// Generator for (`seed`, `stream`). Streams with different indices are
    /// statistically independent.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform draw in the half-open interval (0, 1].
    ///
    /// The open lower end keeps `ln(u)` finite for Box-Muller.
    pub fn uniform_oc(&mut self) -> f64 {
        let u = self.inner.next_u64() >> 11; // 53 random bits
        (u as f64 + 1.0) / (1u64 << 53) as f64
    }

    /// Standard normal deviate via Box-Muller.
    pub fn standard_normal(&mut self) -> f64 {
        let (z0, _) = self.normal_pair();
        z0
    }

    /// A pair of independent standard normal deviates.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_oc();
        let u2 = self.uniform_oc();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Uniform draw in [-1, 1).
    pub fn uniform_symmetric(&mut self) -> f64 {
        2.0 * (self.inner.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 1.0
    }
}

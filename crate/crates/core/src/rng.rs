//! Counter-based random streams.
//!
//! A `SeededStream` is a ChaCha8 keystream selected by `(seed, stream_id)`. Every sampler
//! consumes a fixed number of 64-bit words per sample, so sample `k` starts at word
//! offset `k * words` and is a pure function of `(seed, stream_id, k)`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl SeededStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        SeededStream { seed, stream_id }
    }

    /// Independent child stream, e.g. one per family member or per Gram model.
    pub fn child(&self, id: u64) -> Self {
        SeededStream {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(id.wrapping_add(1))),
        }
    }

    /// Cursor positioned at the first word of sample `k`, for samplers that draw
    /// exactly `uniforms_per_sample` values per sample.
    pub fn cursor(&self, k: u64, uniforms_per_sample: usize) -> Cursor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        // ChaCha word positions count 32-bit words; each uniform takes two.
        rng.set_word_pos(2 * k as u128 * uniforms_per_sample as u128);
        Cursor { rng }
    }
}

pub struct Cursor {
    rng: ChaCha8Rng,
}

impl Cursor {
    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for u in out.iter_mut() {
            *u = self.uniform();
        }
    }
}

/// Two standard normals from two uniforms (Box-Muller).
#[inline]
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let rad = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (rad * c, rad * s)
}

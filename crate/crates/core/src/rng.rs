//! Named, independently seeded random streams.
//!
//! Every consumer of randomness (parameter init, data sampling, noise draws,
//! evaluation) owns its own ChaCha stream derived from the master seed and
//! the stream name, so perturbing one consumer never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut key = [0u8; 32];
    let mut state = seed ^ h;
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Serializable snapshot of a stream's exact position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<StreamRng> {
        let bad = |m: &str| Error::Checkpoint {
            section: "rng".into(),
            message: m.into(),
        };
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex characters"));
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| bad("seed is not hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// `n × d` matrix of standard normal draws.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

/// Uniform integer timesteps in `[lo, hi]`.
pub fn uniform_steps<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

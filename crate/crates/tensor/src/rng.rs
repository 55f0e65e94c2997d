//! Counter-based randomness.
//!
//! A [`RngState`] is a ChaCha8 keystream identified by `(seed, stream)` and
//! positioned by a word counter, so any state can be saved, restored, or
//! split into independent per-sample streams without a shared generator.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::tensor::Tensor;

/// Clamp for uniform draws feeding `-ln(-ln u)`.
pub const GUMBEL_EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`RngState`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    /// Word position; a decimal string because it is a `u128`.
    pub word_pos: String,
}

fn mix(mut z: u64) -> u64 {
    // SplitMix64 finaliser.
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.inner.get_stream()
    }

    /// Independent child stream; depends only on this state's identity and
    /// `tag`, never on how far this state has advanced.
    pub fn derive(&self, tag: u64) -> RngState {
        RngState::with_stream(self.seed, mix(self.stream() ^ mix(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Rejection sampling keeps the draw exactly uniform.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.stream(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Option<Self> {
        let pos: u128 = snap.word_pos.parse().ok()?;
        let mut s = RngState::with_stream(snap.seed, snap.stream);
        s.inner.set_word_pos(pos);
        Some(s)
    }
}

/// Maps a uniform draw to a standard Gumbel sample, clamping `u` into
/// `[GUMBEL_EPS, 1 - GUMBEL_EPS]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
    -(-u.ln()).ln()
}

/// Tensor of i.i.d. standard Gumbel noise.
pub fn sample_gumbel<T: Element>(shape: &[usize], rng: &mut RngState) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(gumbel_from_uniform(rng.uniform())))
}

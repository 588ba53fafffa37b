//! Portable deterministic random number generation.
//!
//! Everything random in this crate draws from [`SplitMix64`], a named,
//! publicly specified 64-bit generator (Steele, Lea & Flood 2014; the
//! `splitmix64` reference implementation by Vigna). It is a pure function of
//! its 64-bit state, so sequences are reproducible across platforms and
//! builds.
//!
//! Stream discipline:
//! - parameter initialization consumes one draw per weight, in registry
//!   order, biases excluded;
//! - batch sampling derives a fresh generator per optimization step from
//!   `(seed, step)`, so step k's segments can be regenerated without
//!   replaying steps 0..k;
//! - waveform generation consumes exactly one draw per emitted sample,
//!   in both the naive and the cached path.

/// SplitMix64 generator. One `u64` of state, one output per step.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent generator for a keyed substream, e.g. one per
    /// training step. The key is mixed through the same finalizer as the
    /// output function so nearby keys give unrelated streams.
    pub fn derive(seed: u64, key: u64) -> Self {
        let mut root = SplitMix64::new(seed);
        let a = root.next_u64();
        SplitMix64::new(a ^ mix(key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        mix(self.state)
    }

    /// Uniform f64 in [0, 1) using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in (-bound, bound).
    pub fn uniform(&mut self, bound: f64) -> f64 {
        bound * (2.0 * self.next_f64() - 1.0)
    }

    /// Uniform integer in [0, n). n must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 53-bit multiply-shift; n is far below 2^53 everywhere we sample.
        (self.next_f64() * n as f64) as usize % n
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

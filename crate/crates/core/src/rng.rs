//! The single random source used everywhere (phantoms, initialization,
//! shuffling, dropout).
//!
//! The generator is ChaCha8 (`rand_chacha`), seeded with `seed_from_u64(seed)`
//! and then switched to word stream `stream`. Derived draws are fixed here
//! rather than delegated to `rand`'s distribution code so that the byte-level
//! outputs are a documented function of `(seed, stream)`:
//!
//! * `uniform()`: top 53 bits of `next_u64()` scaled by 2⁻⁵³, in `[0, 1)`.
//! * `normal()`: Box–Muller cosine branch over two fresh uniforms
//!   (`u1` mapped to `(0, 1]`), no caching of the sine branch.
//! * `below(n)`: `floor(uniform() · n)`.
//! * `shuffle`: Fisher–Yates from the last index down, using `below(i + 1)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream identifiers that keep independent consumers from sharing draws.
pub mod streams {
    pub const INIT_A: u64 = 1 << 32;
    pub const INIT_B: u64 = (1 << 32) + 1;
    pub const INIT_C: u64 = (1 << 32) + 2;
    pub const SHUFFLE: u64 = 2 << 32;
    pub const DROPOUT: u64 = 3 << 32;
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    /// Inclusive integer range.
    pub fn int_in(&mut self, lo: u32, hi: u32) -> u32 {
        lo + self.below((hi - lo) as usize + 1) as u32
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

//! Counter-based pseudo-random generator used for every random draw in the
//! crate (corpus generation, parameter init, noise, masking, sampling).
//!
//! Output `k` (1-based) of a stream with key `K` is `mix64(K + k * GAMMA)`
//! with wrapping arithmetic, where `mix64` is the SplitMix64 finalizer:
//!
//! ```text
//! GAMMA = 0x9E3779B97F4A7C15
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Stream keys are derived as `mix64(seed ^ mix64(label + GAMMA))`, so every
//! component gets an independent stream from a single user seed. Bounded
//! integers use rejection sampling (`x >= (2^64 - n) mod n`, then `x mod n`)
//! and unit floats take the top 53 bits. These rules are the whole contract;
//! another implementation following them reproduces corpora bit for bit.

use rand::RngCore;

pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream key from a seed and a label.
pub fn derive_key(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label.wrapping_add(GAMMA)))
}

/// Hashes a string label (FNV-1a) for use with [`derive_key`].
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn from_key(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    pub fn new(seed: u64, label: &str) -> Self {
        Self::from_key(derive_key(seed, label_hash(label)))
    }

    /// Child stream, independent of the parent's position.
    pub fn fork(&self, label: &str) -> Self {
        Self::from_key(derive_key(self.key, label_hash(label)))
    }

    pub fn fork_index(&self, index: u64) -> Self {
        Self::from_key(derive_key(self.key, index))
    }

    #[inline]
    pub fn next(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.below(hi - lo + 1)
    }

    /// Uniform float in `[0, 1)`.
    #[inline]
    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Standard normal draw (Box-Muller, one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

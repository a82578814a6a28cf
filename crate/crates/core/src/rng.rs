// SPDX-License-Identifier: MIT OR Apache-2.0

//! Portable counter-based random numbers.
//!
//! Every random draw in the crate comes from [`CounterRng`], a SplitMix64
//! stream. The `i`-th output for seed `s` is
//!
//! ```text
//! z = s + (i + 1) * 0x9E3779B97F4A7C15        (wrapping u64)
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! ```
//!
//! Uniform floats take the top 53 bits: `(out >> 11) * 2^-53`, in `[0, 1)`.
//! Gaussians use Box–Muller on two consecutive uniforms `u1, u2`, returning
//! `sqrt(-2 ln(1 - u1)) * cos(2π u2)`; the sine branch is discarded so that
//! each Gaussian consumes exactly two counter values.
//!
//! Because the generator is a pure function of `(seed, counter)` the stream
//! reproduces bit-for-bit in any language with IEEE-754 doubles and a libm
//! that rounds `ln`, `cos`, `sqrt` correctly.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a parent seed and a stream label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = mix64(parent ^ 0x5EED_5EED_5EED_5EED);
    for byte in label.bytes() {
        h = mix64(h ^ u64::from(byte));
    }
    h
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal sample.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`. Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

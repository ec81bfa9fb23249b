//! Splittable 64-bit pseudo-random generator.
//!
//! The generator is SplitMix64: the state advances by the golden-ratio
//! increment `0x9E3779B97F4A7C15` and each output is passed through the
//! finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Child streams are derived without consuming the parent, so every random
//! decision in a run is addressed by a path such as
//! `(run seed, step, block, purpose)` instead of by global generator state.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream identifiers used when splitting a run seed.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const DROP: u64 = 3;
    pub const DATA_ORDER: u64 = 4;
    pub const DATA_GEN: u64 = 5;
    pub const PROBE: u64 = 6;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent child stream identified by `stream`.
    pub fn split(&self, stream: u64) -> Self {
        let salt = mix64(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
        Self::new(mix64(self.state ^ salt))
    }

    /// Follow a path of stream identifiers from a root seed.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        path.iter().fold(Self::new(seed), |rng, &s| rng.split(s))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (one draw per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift, negligible bias for small n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Indices of `noise` sorted ascending, ties broken by index.
pub fn argsort(noise: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..noise.len()).collect();
    idx.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    idx
}

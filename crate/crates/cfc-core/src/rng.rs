//! Seeded randomness source shared by every component.
//!
//! Production mode seeds from system entropy and can never disable noise;
//! test mode takes an explicit 32-byte seed and may switch noise off for
//! oracle comparisons. Forking derives independent child streams so that
//! concurrent actors stay deterministic under a fixed scenario seed.

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::crypto::Id16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngMode {
    Production,
    Test { noise_off: bool },
}

#[derive(Debug, Clone)]
pub struct SeededRandomness {
    rng: ChaCha20Rng,
    mode: RngMode,
}

impl SeededRandomness {
    /// Entropy-seeded source for production use. Noise stays on.
    pub fn production() -> Self {
        Self { rng: ChaCha20Rng::from_entropy(), mode: RngMode::Production }
    }

    /// Deterministic source for tests and reproducible scenarios.
    pub fn test(seed: [u8; 32], noise_off: bool) -> Self {
        Self { rng: ChaCha20Rng::from_seed(seed), mode: RngMode::Test { noise_off } }
    }

    /// Convenience for a deterministic source with noise enabled.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self::test(seed, false)
    }

    pub fn mode(&self) -> RngMode {
        self.mode
    }

    pub fn noise_off(&self) -> bool {
        matches!(self.mode, RngMode::Test { noise_off: true })
    }

    /// Derives an independent child stream. The label keeps two forks from
    /// the same parent state distinct.
    pub fn fork(&mut self, label: &str) -> Self {
        let mut material = [0u8; 32];
        self.rng.fill_bytes(&mut material);
        let mut hasher = Sha256::new();
        hasher.update(material);
        hasher.update(label.as_bytes());
        Self { rng: ChaCha20Rng::from_seed(hasher.finalize().into()), mode: self.mode }
    }

    pub fn id16(&mut self) -> Id16 {
        let mut raw = [0u8; 16];
        self.rng.fill_bytes(&mut raw);
        Id16(raw)
    }

    pub fn seed32(&mut self) -> [u8; 32] {
        let mut raw = [0u8; 32];
        self.rng.fill_bytes(&mut raw);
        raw
    }

    /// Uniform draw from [0, 1).
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::gen(&mut self.rng)
    }

    /// Laplace(0, scale) via the inverse CDF.
    pub fn laplace(&mut self, scale: f64) -> f64 {
        loop {
            let u = self.uniform() - 0.5;
            // u == -0.5 would take ln(0); redraw instead of clamping.
            if u > -0.5 {
                return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
            }
        }
    }

    /// Normal(0, sigma^2) via Box-Muller.
    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform k-subset of 0..n without replacement, returned sorted.
    pub fn choose_subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec();
        picked.sort_unstable();
        picked
    }
}

impl RngCore for SeededRandomness {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

impl CryptoRng for SeededRandomness {}

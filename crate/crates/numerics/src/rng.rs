use rand_core::Rng as _;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;

/// PCG-64 (XSL-RR 128/64) generator with a recorded 64-bit seed.
///
/// Streams for independent purposes are derived with [`fork`](Self::fork),
/// so adding a consumer never shifts another consumer's draws.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: Pcg64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: Pcg64::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `label`, a pure function of (seed, label).
    pub fn fork(&self, label: &str) -> Self {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(label.as_bytes());
        Self::new(fnv1a(&bytes))
    }

    /// Like [`fork`](Self::fork) with an integer tag (entity index, epoch, ...).
    pub fn fork_indexed(&self, label: &str, index: u64) -> Self {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(label.as_bytes());
        bytes.extend_from_slice(&index.to_le_bytes());
        Self::new(fnv1a(&bytes))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`, bias-free by rejection.
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

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `amount` distinct draws from `pool`, in draw order (partial Fisher–Yates).
    pub fn sample_distinct<T: Copy>(&mut self, pool: &[T], amount: usize) -> Vec<T> {
        let amount = amount.min(pool.len());
        let mut work = pool.to_vec();
        for i in 0..amount {
            let j = i + self.below(work.len() - i);
            work.swap(i, j);
        }
        work.truncate(amount);
        work
    }

    /// Index drawn with probability proportional to `weights[i]`.
    /// Returns `None` when every weight is zero.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return None;
        }
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                return Some(i);
            }
            target -= w;
        }
        weights.iter().rposition(|&w| w > 0.0)
    }
}

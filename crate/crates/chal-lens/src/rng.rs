//! Counter-based pseudorandom streams.
//!
//! Every stream is addressed by `(seed, logical coordinates)` rather than by
//! draw order, so enlarging a simulated dataset (more patients, more images)
//! never perturbs the draws of entities that already existed. The generator
//! is splitmix64 evaluated at `key + counter`, which is stateless per draw
//! and therefore stable across platforms.

use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream of pseudorandom numbers addressed by seed and
/// logical stream coordinates.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Opens the stream identified by `seed` and `coords`.
    ///
    /// Two streams with different coordinates are statistically independent;
    /// the same coordinates always reproduce the same sequence.
    pub fn from_stream(seed: u64, coords: &[u64]) -> Self {
        let mut key = mix64(seed ^ GOLDEN);
        for (i, &c) in coords.iter().enumerate() {
            key = mix64(key ^ mix64(c.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 2))));
        }
        CounterRng { key, counter: 0 }
    }

    #[inline]
    pub fn next_raw(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_raw() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn open_uniform(&mut self) -> f64 {
        ((self.next_raw() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via inverse-CDF sampling (one raw draw per value).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        crate::stats::normal_quantile(self.open_uniform())
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn uniform_int(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        let draw = (self.uniform() * span as f64) as u64;
        lo + draw.min(span - 1)
    }

    /// Draw an index from cumulative weights (weights need not be normalized).
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                return i;
            }
            target -= w;
        }
        weights.len() - 1
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Derives an independent sub-seed, e.g. one per replication.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ GOLDEN) ^ index.wrapping_mul(GOLDEN))
}

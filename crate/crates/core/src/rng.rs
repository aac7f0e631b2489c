//! Deterministic random number generation for the pipeline.
//!
//! Every stochastic choice in the pipeline is keyed by a seed derived from
//! the global run seed plus a string label, so independent stages draw from
//! independent streams and reordering one stage never shifts another's
//! draws. The generator is a plain splitmix64, which is byte-stable across
//! platforms and toolchain versions.

/// 64-bit FNV-1a over a byte slice. Used to fold labels and payloads into
/// seed material; stable across platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = fnv1a(label.as_bytes());
    h ^= parent.rotate_left(17);
    splitmix64(&mut h);
    h
}

/// Derive a child seed from a parent seed, a label, and an index.
pub fn derive_seed_indexed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = derive_seed(parent, label);
    h ^= index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    splitmix64(&mut h);
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform integer in `[0, bound)`. `bound` must be non-zero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        // Rejection sampling to avoid modulo bias.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn next_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.next_below(hi - lo + 1)
    }

    /// Uniform float in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Choose `k` distinct indices from `[0, n)` without replacement,
    /// in draw order (partial Fisher-Yates).
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

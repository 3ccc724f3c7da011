//! Portable seeded randomness.
//!
//! Every random draw in the pipeline goes through [`SplitMix64`] so that
//! recipes, crops, noise fields and token vectors can be replayed bit-for-bit
//! by another implementation. The conversions are fixed:
//!
//! ```text
//! next_u64:   state += 0x9E3779B97F4A7C15; z = state
//!             z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!             z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!             return z ^ (z >> 31)
//! next_f64:   (next_u64 >> 11) * 2^-53                in [0, 1)
//! below(n):   (next_u64 as u128 * n) >> 64            in [0, n)
//! normal:     u1 = 1 - next_f64, u2 = next_f64
//!             sqrt(-2 ln u1) * cos(2 pi u2)           one value per call
//! ```

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer of SplitMix64, also used to derive child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed number `stream` of `seed`.
///
/// `derive_seed(s, k) = mix64(s + (k + 1) * GOLDEN)` with wrapping arithmetic.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal draw (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

//! Seedable, splittable random streams.
//!
//! Every stochastic operation in the crate takes an explicit [`RngStream`].
//! Streams are ChaCha8 generators keyed by a 256-bit seed; child streams are
//! derived from the parent key and a label without touching the parent's
//! position, so work item `i` always sees the same randomness regardless of
//! scheduling order.

use rand::{Error as RandError, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from_words(words: [u64; 4]) -> [u8; 32] {
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    key
}

/// A named, counter-based random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: [u64; 4],
    inner: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for a numeric seed.
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let mut key = [0u64; 4];
        for k in key.iter_mut() {
            s = splitmix64(s);
            *k = s;
        }
        Self::from_key(key)
    }

    fn from_key(key: [u64; 4]) -> Self {
        Self {
            key,
            inner: ChaCha8Rng::from_seed(key_from_words(key)),
        }
    }

    /// Child stream keyed by `label`. Does not advance `self`.
    pub fn derive(&self, label: u64) -> Self {
        let mut acc = splitmix64(label ^ 0xD1B5_4A32_D192_ED03);
        let mut key = [0u64; 4];
        for (i, k) in key.iter_mut().enumerate() {
            acc = splitmix64(acc ^ self.key[i]);
            *k = acc;
        }
        Self::from_key(key)
    }

    /// Child stream keyed by a label path, e.g. `(sample, probe)`.
    pub fn derive_path(&self, labels: &[u64]) -> Self {
        labels.iter().fold(self.clone_root(), |s, &l| s.derive(l))
    }

    /// Child stream keyed by a string name.
    pub fn derive_named(&self, name: &str) -> Self {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.derive(h)
    }

    /// Takes a fresh child stream from the current position, advancing `self`.
    pub fn split(&mut self) -> Self {
        let key = [
            self.inner.next_u64(),
            self.inner.next_u64(),
            self.inner.next_u64(),
            self.inner.next_u64(),
        ];
        Self::from_key(key)
    }

    fn clone_root(&self) -> Self {
        Self::from_key(self.key)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a logarithm argument.
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. Both halves of each pair are used.
    pub fn standard_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fills `out` with i.i.d. `N(0, sigma^2)` values.
    pub fn fill_normal(&mut self, out: &mut [f64], sigma: f64) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.standard_normal_pair();
            pair[0] = a * sigma;
            pair[1] = b * sigma;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.standard_normal_pair().0 * sigma;
        }
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.gen_range(0..n)
    }

    /// `+1.0` or `-1.0` with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.inner.next_u32() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), RandError> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_does_not_advance_parent() {
        let root = RngStream::new(7);
        let mut a = root.derive(3);
        let mut b = root.derive(3);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = root.derive(4);
        let mut d = root.derive(3);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn derive_path_matches_chained_derive() {
        let root = RngStream::new(11);
        let mut a = root.derive_path(&[1, 2]);
        let mut b = root.derive(1).derive(2);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn split_advances() {
        let mut root = RngStream::new(1);
        let mut a = root.split();
        let mut b = root.split();
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_range() {
        let mut r = RngStream::new(5);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            let v = r.uniform_open0();
            assert!(v > 0.0 && v <= 1.0);
        }
    }
}

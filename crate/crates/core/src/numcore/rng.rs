//! Named, reproducible random streams.
//!
//! Every consumer of randomness asks for a stream by `(purpose, index)`.
//! The key is expanded with SplitMix64 into a ChaCha8 key, and the purpose
//! and index select the ChaCha stream word, so the sequence depends only on
//! the triple `(seed, purpose, index)` and not on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::evalkit::splits::fnv1a64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub purpose: &'static str,
    pub index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub id: StreamId,
}

impl RngStream {
    pub fn new(seed: u64, purpose: &'static str, index: u64) -> Self {
        Self {
            seed,
            id: StreamId { purpose, index },
        }
    }

    /// Child stream sharing the seed.
    pub fn derive(&self, purpose: &'static str, index: u64) -> Self {
        Self::new(self.seed, purpose, index)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut state = self.seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut word = fnv1a64(self.id.purpose.as_bytes()) ^ self.id.index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        rng.set_stream(splitmix64(&mut word));
        rng
    }
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draw(s: RngStream, n: usize) -> Vec<u64> {
        let mut r = s.rng();
        (0..n).map(|_| r.random::<u64>()).collect()
    }

    #[test]
    fn same_key_same_sequence() {
        let a = RngStream::new(7, "init", 3);
        assert_eq!(draw(a, 32), draw(a, 32));
    }

    #[test]
    fn distinct_ids_differ() {
        let a = draw(RngStream::new(7, "init", 3), 8);
        let b = draw(RngStream::new(7, "init", 4), 8);
        let c = draw(RngStream::new(7, "batch", 3), 8);
        let d = draw(RngStream::new(8, "init", 3), 8);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn pinned_first_values() {
        // Guards against silent changes in the derivation across platforms or versions.
        let mut r = RngStream::new(0, "pin", 0).rng();
        let first: u64 = r.random();
        assert_eq!(first, 5_052_913_766_287_061_684);
    }

    #[test]
    fn streams_look_independent() {
        let mut a = RngStream::new(1, "x", 0).rng();
        let mut b = RngStream::new(1, "x", 1).rng();
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| a.random::<f64>() - 0.5).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.random::<f64>() - 0.5).collect();
        let corr: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64 / (1.0 / 12.0);
        assert!(corr.abs() < 0.03, "corr {corr}");
    }
}

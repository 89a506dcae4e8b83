use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// A labelled random stream derived from a master seed.
///
/// The ChaCha key is `SHA-256(master_seed ‖ label)`, so two streams with
/// different labels never share state and draws from one stream cannot
/// shift another's sequence.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut h = Sha256::new();
        h.update(master_seed.to_le_bytes());
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        Self {
            master_seed,
            label,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream `"<label>/<suffix>"` from the same master seed.
    pub fn substream(&self, suffix: &str) -> Self {
        Self::new(self.master_seed, format!("{}/{suffix}", self.label))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.rng.sample(StandardNormal);
        }
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

/// `n` i.i.d. standard normal draws.
pub fn sample_normal(stream: &mut RngStream, n: usize) -> Vec<f64> {
    stream.normal_vec(n)
}

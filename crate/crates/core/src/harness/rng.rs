use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A reproducible random stream keyed by a master seed and a tag path.
///
/// The key is hashed into a ChaCha20 seed, so streams with distinct tags
/// never share state and no stream depends on how many others were drawn.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    tags: Vec<String>,
    rng: ChaCha20Rng,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub tags: Vec<String>,
}

impl RngStream {
    pub fn new<S: AsRef<str>>(master_seed: u64, tags: &[S]) -> Self {
        let tags: Vec<String> = tags.iter().map(|t| t.as_ref().to_owned()).collect();
        let mut h = Sha256::new();
        h.update(b"membrane-lab/stream/v1");
        h.update(master_seed.to_le_bytes());
        for t in &tags {
            // length prefix keeps ["ab","c"] and ["a","bc"] apart
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        let seed: [u8; 32] = h.finalize().into();
        RngStream { master_seed, tags, rng: ChaCha20Rng::from_seed(seed) }
    }

    /// A child stream with one more tag; independent of this stream's state.
    pub fn child(&self, tag: impl AsRef<str>) -> Self {
        let mut tags = self.tags.clone();
        tags.push(tag.as_ref().to_owned());
        RngStream::new(self.master_seed, &tags)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { master_seed: self.master_seed, tags: self.tags.clone() }
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        self.fill_normal(&mut v);
        v
    }

    /// `k` distinct indices from `0..n`, in increasing order.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut v = rand::seq::index::sample(&mut self.rng, n, k.min(n)).into_vec();
        v.sort_unstable();
        v
    }
}

/// Stream for one replica of one experiment, used for one purpose.
pub fn split_stream(master_seed: u64, experiment: &str, replica: u64, purpose: &str) -> RngStream {
    RngStream::new(master_seed, &[experiment, &format!("replica={replica}"), purpose])
}

//! Deterministic random substreams.
//!
//! Every stochastic operation draws from a ChaCha stream keyed by the
//! master seed and a textual label, so that reruns are bit-identical and
//! unrelated consumers never share draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPolicy {
    pub master_seed: u64,
}

impl SeedPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Independent generator for `label`.
    pub fn stream(&self, label: &str) -> StreamRng {
        ChaCha8Rng::from_seed(self.key(label))
    }

    /// Generator for replication or item `index` of `label`.
    pub fn indexed(&self, label: &str, index: u64) -> StreamRng {
        self.stream(&format!("{label}#{index}"))
    }

    /// Child policy whose streams are disjoint from the parent's.
    pub fn child(&self, label: &str) -> SeedPolicy {
        let key = self.key(&format!("child:{label}"));
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&key[..8]);
        SeedPolicy::new(u64::from_le_bytes(bytes))
    }

    fn key(&self, label: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.master_seed.to_le_bytes());
        hasher.update([0u8]);
        hasher.update(label.as_bytes());
        hasher.finalize().into()
    }
}

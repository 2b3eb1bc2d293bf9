//! Named sub-seeds. Every random stream in a run is derived from one root seed
//! plus a stable name, so stages can be re-run independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn derive(&self, name: &str) -> u64 {
        derive_seed(self.root, name)
    }

    pub fn rng(&self, name: &str) -> Rng {
        Rng::seed_from_u64(self.derive(name))
    }

    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree::new(self.derive(name))
    }
}

pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

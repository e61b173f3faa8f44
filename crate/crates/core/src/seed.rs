//! Named random sub-streams derived from one master seed.
//!
//! Every consumer of randomness asks for a stream by name (`"datagen"`,
//! `"rollout"`, `"bt-label"`, ...). Streams are independent of the order in
//! which they are requested, so re-running one phase reproduces it exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type LabRng = ChaCha8Rng;

pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, name: &str) -> LabRng {
    LabRng::seed_from_u64(derive_seed(master, name))
}

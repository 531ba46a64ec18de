//! Named, index-keyed random streams derived from a single run seed.
//!
//! Every consumer asks for its own stream (`"data"`, `"noise"`, `"init"`, ...)
//! keyed by whatever indices identify the draw (episode index, step). Two runs
//! that differ in one factor therefore share every other stream.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, name: &str, keys: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

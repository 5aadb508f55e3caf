//! Named random substreams derived from one master seed.
//!
//! Each consumer asks for `(name, index)`; the stream seed is a hash of the
//! master seed and that pair, so streams are independent of each other and of
//! the order in which they are requested. Resuming at step `k` only needs `k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const DROPOUT: &str = "dropout";
pub const SAMPLING: &str = "sampling";

pub fn substream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

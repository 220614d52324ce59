//! Deterministic random-number streams.
//!
//! Every stochastic choice in the crate (weight init, batch shuffling,
//! dropout masks, subsampling) draws from a ChaCha8 stream derived from a
//! single master seed plus a textual label and an index. Separate labels give
//! statistically independent streams, and — just as important — *removing*
//! one consumer (say, a disabled regularizer) cannot shift the draws seen by
//! any other, because each consumer owns its own stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte stream seed from the master seed, a label, and an index.
pub fn derive_seed(master_seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// A fresh ChaCha8 generator for the given (master seed, label, index) triple.
pub fn stream(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master_seed, label, index))
}

/// Per-epoch shuffle seed: a stable hash of the master seed and epoch number.
pub fn epoch_seed(master_seed: u64, epoch: usize) -> u64 {
    let digest = derive_seed(master_seed, "epoch-shuffle", epoch as u64);
    u64::from_le_bytes(digest[..8].try_into().expect("8-byte slice"))
}

/// Hex digest of a generator's full state (seed, stream id, position) without
/// advancing it. Two generators with equal digests will produce identical
/// future output.
pub fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut hasher = Sha256::new();
    hasher.update(rng.get_seed());
    hasher.update(rng.get_stream().to_le_bytes());
    hasher.update(rng.get_word_pos().to_le_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

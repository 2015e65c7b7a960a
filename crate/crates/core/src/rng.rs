//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha20 stream keyed by
//! `SHA-256(seed, purpose, index)`. ChaCha20 is a counter-based generator, so
//! the streams for different `(purpose, index)` pairs are independent and a
//! run is a pure function of its seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha20Rng;

/// Purpose tags used inside the crate.
pub mod purpose {
    pub const ADVI_NOISE: &str = "advi-noise";
    pub const ADVI_BATCH: &str = "advi-batch";
    pub const NUTS_CHAIN: &str = "nuts-chain";
    pub const PREDICT: &str = "predict";
    pub const SUMMARY: &str = "summary";
    pub const SPLIT: &str = "split";
}

/// Derives the stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(key)
}

//! Seeded, counter-based random streams.
//!
//! Every consumer of randomness owns a ChaCha20 stream keyed by
//! `SHA-256("spdl/rng" || seed || purpose)` and selected by a stream id
//! (normally the node index). Two streams never share state, so parallel
//! execution cannot reorder draws.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub use rand_chacha::ChaCha20Rng as StreamRng;

/// Builds the stream for `(seed, purpose, stream)`.
pub fn stream_rng(seed: u64, purpose: &str, stream: u64) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"spdl/rng");
    hasher.update(seed.to_be_bytes());
    hasher.update((purpose.len() as u64).to_be_bytes());
    hasher.update(purpose.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

//! Seeded, named random substreams.
//!
//! Every piece of randomness in a run is drawn from a substream derived
//! from the global seed and a stable name such as `"patching/vol-17"`.
//! Adding volumes or reordering work therefore never perturbs unrelated
//! draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives a deterministic RNG from `(global_seed, name)`.
pub fn substream(global_seed: u64, name: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update([0xff]);
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

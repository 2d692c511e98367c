//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream: the 64-bit root seed
//! fills the key and the first eight bytes (little-endian) of SHA-256 over
//! the consumer's key string select the ChaCha stream id. Adding a new
//! consumer therefore never shifts the numbers seen by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::Tensor;

/// Generator name recorded in run manifests.
pub const ALGORITHM: &str = "ChaCha8 (rand_chacha 0.3), stream id = SHA-256(key)[0..8] LE";

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, key: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digest = Sha256::digest(key.as_bytes());
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest[..8]);
    rng.set_stream(u64::from_le_bytes(id));
    rng
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

//! Named, independently seeded random streams.
//!
//! Every consumer of randomness (initialization of each module, augmentation
//! of each sample, data order of each epoch) draws from its own stream derived
//! from the run seed and a label, so enabling or disabling one consumer never
//! shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "init/encoder").random();
        let b: u64 = stream(7, "init/encoder").random();
        let c: u64 = stream(7, "init/gnn").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

//! Named, independent random streams derived from one experiment seed.
//!
//! Every stochastic step draws from `stream(seed, label)`, so skipping one
//! step never shifts the randomness another step sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream_seed(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

pub fn stream(seed: u64, label: &str) -> Rng {
    ChaCha8Rng::from_seed(stream_seed(seed, label))
}

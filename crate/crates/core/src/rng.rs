//! Named random sub-streams derived from a single root seed.
//!
//! Every stage draws from its own stream (`"synth"`, `"init"`, `"batching"`,
//! `"sampling"`, ...) so a stage can be rerun alone and still see the same
//! numbers it saw inside a full pipeline run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

pub const SYNTH: &str = "synth";
pub const INIT: &str = "init";
pub const BATCHING: &str = "batching";
pub const SAMPLING: &str = "sampling";
pub const SPLIT: &str = "split";
pub const GMM: &str = "gmm";
pub const NOISE: &str = "noise";
pub const EVAL: &str = "eval";

/// Seed for the named stream. Distinct names give unrelated seeds.
pub fn derive_seed(root: u64, stream: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"mcnip-stream");
    hasher.update(root.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    hasher.finalize().into()
}

pub fn substream(root: u64, stream: &str) -> StageRng {
    ChaCha8Rng::from_seed(derive_seed(root, stream))
}

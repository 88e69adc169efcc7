//! Seed derivation.
//!
//! Every sequence owns its generator, seeded from `(root, stream, index)`, so a
//! dataset can be regenerated element by element and in parallel. Within one
//! sequence the draws happen in a fixed order (see [`crate::datagen`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream identifiers. Streams never share a derived seed for the same root.
pub mod streams {
    pub const TRAIN_V: u64 = 1;
    pub const TRAIN_KQ: u64 = 2;
    pub const EVAL_OOD: u64 = 3;
    pub const EVAL_IN: u64 = 4;
    pub const GENERATE: u64 = 5;
    pub const PROBE: u64 = 6;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(root);
    let b = splitmix64(a ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ index.wrapping_mul(0xA076_1D64_78BD_642F))
}

pub fn sequence_rng(root: u64, stream: u64, index: u64) -> LabRng {
    LabRng::seed_from_u64(derive_seed(root, stream, index))
}

pub fn seeded(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

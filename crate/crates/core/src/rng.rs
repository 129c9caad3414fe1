//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by the
//! run seed. Subsystems never share a generator; each one asks for its own
//! stream, identified by a 64-bit stream id:
//!
//! ```text
//!   stream id = (purpose << 32) | index
//! ```
//!
//! `purpose` is one of the constants below and `index` distinguishes items
//! within a purpose (scene number, seed replica, ...). Two streams with
//! different ids are statistically independent, so adding draws to one
//! subsystem never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Top-level purpose tags for [`stream`].
pub mod purpose {
    pub const WORLD: u64 = 1;
    pub const SOURCE_SCENE: u64 = 2;
    pub const TARGET_SCENE: u64 = 3;
    pub const LABEL_NOISE: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const BATCH_SOURCE: u64 = 6;
    pub const BATCH_TARGET: u64 = 7;
    pub const BATCH_EXTRA: u64 = 8;
    pub const ANNOTATION_NOISE: u64 = 9;
    pub const GRADCHECK: u64 = 10;
}

/// Generator for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: u64, index: u32) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | u64::from(index));
    rng
}

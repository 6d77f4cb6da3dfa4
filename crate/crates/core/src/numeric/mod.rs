//! Numeric substrate: matrices, reverse-mode tape, parameter stores,
//! checkpoints, assignment, optimizer and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod hungarian;
pub mod mat;
pub mod optim;
pub mod store;
pub mod tape;

pub use gradcheck::{finite_diff_check, GradReport};
pub use hungarian::{hungarian_assign, Assignment};
pub use mat::Mat;
pub use optim::{adamw_step, ema_update, AdamWConfig, Moments};
pub use store::{Binding, Grads, Param, ParamStore};
pub use tape::{Tape, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministically derives a sub-seed from a base seed and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

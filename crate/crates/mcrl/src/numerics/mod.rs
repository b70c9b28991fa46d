//! Deterministic numeric substrate: dense row-major matrices, a seeded
//! counter-based RNG, saturating activations, and SGD with momentum.
//!
//! Everything here is 64-bit and single-threaded so that a fixed seed
//! reproduces a training run bit for bit.

mod activate;
mod mat;
mod rng;
mod sgd;

pub use activate::{sigmoid, sigmoid_saturating, softmax, softmax_in_place, EXP_CLAMP};
pub use mat::{sq_dist, Mat};
pub use rng::{derive_seed, Rng};
pub use sgd::SgdState;

//! Image-adaptive prompt learning for AI-generated image detection, at desk
//! scale.
//!
//! A small vision transformer is adapted with bottleneck adapters and gated
//! learnable tokens. Its first block receives a per-image prompt built from
//! high-pass texture conditions and test-time adaptive tokens, which are tuned
//! on each test image by entropy minimization over confident views.

pub mod autograd;
pub mod conditioner;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod tta;

pub use crate::error::{IaplError, Result};
pub use crate::imaging::Image;
pub use crate::model::{init_params, ModelConfig, PromptMode};
pub use crate::params::ModelParams;
pub use crate::tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for stream `index` under `seed`.
pub fn derived_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

//! BEV multi-sensor fusion for semantic scene completion, with cross-modal
//! knowledge distillation, a deterministic synthetic world, and an
//! evaluation/ablation harness. Everything runs on CPU at desk scale.

pub mod distill;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image_branch;
pub mod lcr1;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod point_branch;
pub mod scalar;
pub mod tape;
pub mod types;
pub mod world;

pub mod config;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default precision for training and gradient checking.
pub type F = f64;
/// Tape at default precision.
pub type TapeF = tape::Tape<F>;
/// BEV feature map at default precision.
pub type BevMapF = types::BevFeatureMap<F>;
/// Parameter store at default precision.
pub type ParamsF = nn::ParamStore<F>;

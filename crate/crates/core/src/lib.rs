//! Two-branch spatio-temporal video grounding on a small reverse-mode autodiff core.

pub mod config;
pub mod dynamic_branch;
pub mod error;
pub mod heads;
pub mod interaction;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod static_branch;
pub mod synth_data;
pub mod tensor;
pub mod trainer;

pub use config::{ArchConfig, GenConfig, LossWeights, ModelConfig, Regime, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use heads::{BBox, Prediction, TemporalSpan};
pub use model::{ForwardOutput, GroundingModel, ModelInput};
pub use tensor::{grad_check, GradCheckOptions, GradCheckReport, Grads, Tape, Tensor, Var};

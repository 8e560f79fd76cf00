//! Diffusion-conditioned representation learner and classifier.
//!
//! Training noises each window to a random timestep and asks a three-level
//! 1D U-Net to predict the noise, reconstruct the clean window and classify
//! it. Online decoding skips sampling entirely: one evaluation-mode forward
//! pass of the clean window, conditioned on a fixed timestep, feeds the
//! classifier head.

mod embed;
mod infer;
mod loss;
mod model;
mod schedule;

pub use embed::{class_projection, null_class_embedding, time_embedding};
pub use infer::{
    argmax, infer_window, inference_timestep, predict_batch, rank_classes, TAU_INFER,
};
pub use loss::{batch_loss_and_grad, total_loss, LossBreakdown, LossOptions, LossWeights, TrainingExample};
pub use model::{
    classify, count_params, unet_forward, Conditioning, Heads, Layout, ModelConfig, ModelParams,
    ParamSpec, UNetOutput,
};
pub use schedule::{
    cosine_alpha_bar, forward_noising, NoiseSchedule, ALPHA_BAR_FLOOR, DEFAULT_OFFSET,
    DEFAULT_TIMESTEPS,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("timestep {t} outside 0..={timesteps}")]
    TimestepOutOfRange { t: usize, timesteps: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("embedding width {0} must be even")]
    OddEmbedding(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter blob holds {got} values, config needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

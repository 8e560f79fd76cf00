//! Real-time imagined-speech decoding from EEG.
//!
//! The crate is organised along the processing path:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape and the Adam optimizer.
//! - [`dsp`]: Butterworth low-pass, mains notch, baseline correction and common
//!   average reference, as both batch and streaming transforms.
//! - [`diffusion`]: cosine noise schedule, embeddings, the three-level 1D U-Net
//!   with noise-prediction, reconstruction and classification heads, and
//!   single-pass inference.
//! - [`train`]: stratified splitting, the calibration loop with dual early
//!   stopping, and evaluation metrics.
//! - [`synth`]: class-conditioned synthetic EEG and the `BCIE` dataset format.
//! - [`protocol`]: trial timing of the online paradigm and the continuous
//!   recording layout shared by offline and online preprocessing.
//! - [`online`]: ring buffer, wire protocol, the closed-loop session and its report.

pub mod diffusion;
pub mod dsp;
mod error;
pub mod online;
pub mod par;
pub mod protocol;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Class names of the four-way task, indexed by label.
pub const CLASS_NAMES: [&str; 4] = ["Clock", "Toilet", "Water", "Resting state"];

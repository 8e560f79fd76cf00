use thiserror::Error;

use crate::diffusion::ModelError;
use crate::dsp::DspError;
use crate::online::SessionError;
use crate::synth::SynthError;
use crate::tensor::TensorError;
use crate::train::TrainError;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-level error; each module keeps its own error enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl Error {
    /// True when the failure is a numeric one (non-finite values).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Tensor(e) => e.is_numeric(),
            Error::Model(ModelError::Tensor(e)) => e.is_numeric(),
            Error::Train(e) => e.is_numeric(),
            _ => false,
        }
    }
}

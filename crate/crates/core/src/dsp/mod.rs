//! EEG preprocessing: IIR filtering on the continuous record, then per-epoch
//! baseline correction and common average reference.
//!
//! Chain order is fixed: low-pass → notch → epoching → baseline → CAR.

mod epoch;
mod filter;

pub use epoch::{
    baseline_correct, common_average_reference, epoch_extract, ContinuousRecord, EegEpoch,
    SampleStore,
};
pub use filter::{
    design_butterworth_lowpass, design_notch, filter_apply, frequency_response, Biquad,
    BiquadCascade, CascadeState, StreamingFilter,
};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("frequency {freq_hz} Hz must lie in (0, {nyquist_hz}) Hz")]
    AboveNyquist { freq_hz: f64, nyquist_hz: f64 },
    #[error("invalid filter parameter: {0}")]
    InvalidParameter(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("insufficient history: need samples from {needed_from}, earliest available is {available_from}")]
    InsufficientHistory { needed_from: i64, available_from: u64 },
    #[error("window [{start}, {end}) not yet available (have {available} samples)")]
    NotYetAvailable { start: u64, end: u64, available: u64 },
    #[error("window evicted: [{start}, {end}) starts before the oldest retained sample {oldest}")]
    WindowEvicted { start: u64, end: u64, oldest: u64 },
}

/// Default low-pass corner, Hz.
pub const LOWPASS_HZ: f64 = 120.0;
/// Default low-pass order.
pub const LOWPASS_ORDER: usize = 5;
/// Mains frequency, Hz.
pub const NOTCH_HZ: f64 = 60.0;
/// Notch quality factor.
pub const NOTCH_Q: f64 = 30.0;

/// The streaming part of the chain: low-pass followed by the notch, with
/// per-channel state carried across chunks.
#[derive(Clone, Debug)]
pub struct FilterChain {
    lowpass: StreamingFilter,
    notch: StreamingFilter,
}

impl FilterChain {
    pub fn new(fs: f64, channels: usize) -> Result<Self, DspError> {
        let lp = design_butterworth_lowpass(LOWPASS_ORDER, LOWPASS_HZ, fs)?;
        let notch = design_notch(NOTCH_HZ, NOTCH_Q, fs)?;
        Ok(FilterChain {
            lowpass: StreamingFilter::new(lp, channels),
            notch: StreamingFilter::new(notch, channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.lowpass.state().channels()
    }

    pub fn lowpass(&self) -> &BiquadCascade {
        self.lowpass.cascade()
    }

    pub fn notch(&self) -> &BiquadCascade {
        self.notch.cascade()
    }

    /// Filters a `channels × n` chunk in place.
    pub fn process(&mut self, chunk: &mut Array2<f64>) -> Result<(), DspError> {
        self.lowpass.process(chunk)?;
        self.notch.process(chunk)
    }
}

/// Baseline correction then CAR, returning only the post-onset window that
/// the decoder consumes (`channels × (samples - baseline)`).
pub fn prepare_window(epoch: &EegEpoch) -> Result<Array2<f64>, DspError> {
    let corrected = baseline_correct(epoch, epoch.baseline_samples)?;
    let referenced = common_average_reference(&corrected.data);
    Ok(referenced.slice(ndarray::s![.., epoch.baseline_samples..]).to_owned())
}

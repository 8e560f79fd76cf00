use ndarray::{s, Array2, Axis};

use super::DspError;

/// One trial: `channels × samples` with the baseline segment first.
#[derive(Clone, Debug, PartialEq)]
pub struct EegEpoch {
    pub data: Array2<f64>,
    pub fs: f64,
    pub label: Option<usize>,
    /// Absolute sample index of imagery onset.
    pub onset_index: u64,
    /// Samples before onset carried at the start of `data`.
    pub baseline_samples: usize,
}

impl EegEpoch {
    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }
}

/// Anything that can hand out a window of past samples by absolute index.
pub trait SampleStore {
    fn channels(&self) -> usize;
    /// Index one past the newest sample.
    fn end_index(&self) -> u64;
    /// Index of the oldest retained sample.
    fn start_index(&self) -> u64;
    /// Copies `[start, start + len)` out as `channels × len`.
    fn window(&self, start: u64, len: usize) -> Result<Array2<f64>, DspError>;
}

/// A fully materialised record starting at absolute index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousRecord {
    pub data: Array2<f64>,
}

impl SampleStore for ContinuousRecord {
    fn channels(&self) -> usize {
        self.data.nrows()
    }

    fn end_index(&self) -> u64 {
        self.data.ncols() as u64
    }

    fn start_index(&self) -> u64 {
        0
    }

    fn window(&self, start: u64, len: usize) -> Result<Array2<f64>, DspError> {
        let end = start + len as u64;
        if end > self.end_index() {
            return Err(DspError::NotYetAvailable { start, end, available: self.end_index() });
        }
        let (a, b) = (start as usize, end as usize);
        Ok(self.data.slice(s![.., a..b]).to_owned())
    }
}

/// Subtracts the instantaneous mean across channels from every sample.
pub fn common_average_reference(frame: &Array2<f64>) -> Array2<f64> {
    let channels = frame.nrows() as f64;
    let mut out = frame.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / channels;
        col.mapv_inplace(|v| v - mean);
    }
    out
}

/// Removes the per-channel mean of the `baseline_pre_samples` before onset.
pub fn baseline_correct(epoch: &EegEpoch, baseline_pre_samples: usize) -> Result<EegEpoch, DspError> {
    if baseline_pre_samples == 0 || baseline_pre_samples > epoch.baseline_samples {
        return Err(DspError::InsufficientHistory {
            needed_from: epoch.onset_index as i64 - baseline_pre_samples as i64,
            available_from: epoch.onset_index - epoch.baseline_samples as u64,
        });
    }
    let from = epoch.baseline_samples - baseline_pre_samples;
    let mut out = epoch.clone();
    for mut row in out.data.rows_mut() {
        let base = row.slice(s![from..epoch.baseline_samples]);
        let mean = base.sum() / baseline_pre_samples as f64;
        row.mapv_inplace(|v| v - mean);
    }
    Ok(out)
}

/// Cuts `[onset - pre_s, onset + len_s)` out of `store` and baseline-corrects it.
pub fn epoch_extract<S: SampleStore + ?Sized>(
    store: &S,
    onset_index: u64,
    pre_s: f64,
    len_s: f64,
    fs: f64,
    label: Option<usize>,
) -> Result<EegEpoch, DspError> {
    let pre = (pre_s * fs).round() as usize;
    let len = (len_s * fs).round() as usize;
    if pre == 0 || len == 0 {
        return Err(DspError::InvalidParameter(format!("pre {pre_s} s / len {len_s} s at {fs} Hz")));
    }
    let needed_from = onset_index as i64 - pre as i64;
    if needed_from < store.start_index() as i64 {
        return Err(DspError::InsufficientHistory { needed_from, available_from: store.start_index() });
    }
    let data = store.window(needed_from as u64, pre + len)?;
    let raw = EegEpoch { data, fs, label, onset_index, baseline_samples: pre };
    baseline_correct(&raw, pre)
}

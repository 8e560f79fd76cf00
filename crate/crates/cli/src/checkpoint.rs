//! `BCIM` model checkpoints, little-endian:
//!
//! ```text
//! "BCIM" | u16 version | u32 doc_len | doc_len bytes of JSON | u64 n_params | n_params × f32
//! ```
//!
//! The JSON document records everything needed to rebuild and check the
//! model: architecture, noise schedule, training config, seed and the data
//! it was fitted to.

use std::path::Path;

use serde::{Deserialize, Serialize};
use speechbci::diffusion::{count_params, ModelConfig, ModelParams, NoiseSchedule};
use speechbci::protocol::SessionTiming;
use speechbci::synth::Dataset;
use speechbci::train::TrainConfig;

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"BCIM";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDoc {
    pub timesteps: usize,
    pub offset: f64,
}

/// Shape of the recordings a model was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataDoc {
    pub fs: f64,
    pub channels: usize,
    pub n_classes: usize,
    pub samples_per_trial: usize,
    pub baseline_samples: usize,
    /// SHA-256 of the dataset file, hex.
    pub fingerprint: String,
}

impl DataDoc {
    pub fn describe(dataset: &Dataset, fingerprint: String) -> Self {
        DataDoc {
            fs: dataset.fs,
            channels: dataset.channels,
            n_classes: dataset.n_classes,
            samples_per_trial: dataset.samples_per_trial,
            baseline_samples: dataset.baseline_samples,
            fingerprint,
        }
    }

    /// Fails unless `dataset` has the same shape (the fingerprint may differ).
    pub fn check_compatible(&self, dataset: &Dataset) -> Result<(), CliError> {
        let want = (self.fs, self.channels, self.n_classes, self.samples_per_trial, self.baseline_samples);
        let got = (dataset.fs, dataset.channels, dataset.n_classes, dataset.samples_per_trial, dataset.baseline_samples);
        if want != got {
            return Err(CliError::Data(format!(
                "config mismatch: model expects (fs, channels, classes, samples, baseline) = {want:?}, data has {got:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub model: ModelConfig,
    pub schedule: ScheduleDoc,
    pub train: TrainConfig,
    pub seed: u64,
    pub timing: SessionTiming,
    pub data: DataDoc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub doc: CheckpointDoc,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(NoiseSchedule::cosine(self.doc.schedule.timesteps, self.doc.schedule.offset)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let doc = serde_json::to_vec(&self.doc).map_err(|e| CliError::Data(e.to_string()))?;
        let params = self.params.to_f32_le();
        let mut out = Vec::with_capacity(4 + 2 + 4 + doc.len() + 8 + params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
        out.extend_from_slice(&doc);
        out.extend_from_slice(&(self.params.num_params() as u64).to_le_bytes());
        out.extend_from_slice(&params);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Data(format!("checkpoint: {m}"));
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated".into()));
        if take(0, 4)? != MAGIC {
            return Err(bad("bad magic, expected \"BCIM\"".into()));
        }
        let version = u16::from_le_bytes(take(4, 2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let doc_len = u32::from_le_bytes(take(6, 4)?.try_into().expect("4 bytes")) as usize;
        let doc: CheckpointDoc =
            serde_json::from_slice(take(10, doc_len)?).map_err(|e| bad(format!("config document: {e}")))?;
        let at = 10 + doc_len;
        let n = u64::from_le_bytes(take(at, 8)?.try_into().expect("8 bytes")) as usize;
        let expected = count_params(&doc.model)?;
        if n != expected {
            return Err(bad(format!("config mismatch: document describes {expected} parameters, file holds {n}")));
        }
        let body = take(at + 8, 4 * n)?;
        if bytes.len() != at + 8 + 4 * n {
            return Err(bad("trailing bytes".into()));
        }
        let params = ModelParams::from_f32_le(&doc.model, body)?;
        Ok(Checkpoint { doc, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

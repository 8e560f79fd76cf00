//! Subject-specific calibration: stratified split, Adam training with dual
//! early stopping, and evaluation metrics.

mod metrics;

pub use metrics::{accuracy_from_probs, confusion_matrix, confusion_table, topk_accuracy};

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    batch_loss_and_grad, predict_batch, LossOptions, LossWeights, ModelConfig, ModelError,
    ModelParams, NoiseSchedule, TrainingExample, TAU_INFER,
};
use crate::tensor::{AdamConfig, AdamState, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {source}")]
    NonFinite { epoch: usize, batch: usize, source: ModelError },
    #[error("class {class} has {count} trials; need at least one in each split")]
    TooFewTrials { class: usize, count: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("prediction/label length mismatch: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("k = {k} outside 1..={n_classes}")]
    InvalidK { k: usize, n_classes: usize },
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Model(ModelError::Tensor(e)) => e.is_numeric(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_train_acc: f64,
    pub early_stop_val_acc: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Probability of training a step with the null class embedding.
    pub cond_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            early_stop_train_acc: 0.75,
            early_stop_val_acc: 0.40,
            val_fraction: 0.2,
            seed: 42,
            weights: LossWeights::default(),
            cond_drop: LossOptions::default().cond_drop,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.val_fraction) || !unit(self.early_stop_train_acc) || !unit(self.early_stop_val_acc) {
            return Err(TrainError::InvalidConfig("fractions and thresholds must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!("batch size {}, lr {}", self.batch_size, self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(TrainError::InvalidConfig(format!("cond_drop {}", self.cond_drop)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TrainThreshold,
    ValThreshold,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::TrainThreshold => "train_threshold",
            StopReason::ValThreshold => "val_threshold",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

/// Stop when train accuracy exceeds its threshold, else when validation
/// accuracy exceeds its threshold. Both comparisons are strict.
pub fn early_stop_check(train_acc: f64, val_acc: f64, config: &TrainConfig) -> Option<StopReason> {
    if train_acc > config.early_stop_train_acc {
        Some(StopReason::TrainThreshold)
    } else if val_acc > config.early_stop_val_acc {
        Some(StopReason::ValThreshold)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ddpm: f64,
    pub rec: f64,
    pub ce: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Wall-clock duration; excluded from determinism comparisons.
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainHistory {
    /// Equality ignoring wall-clock fields.
    pub fn same_outcome(&self, other: &TrainHistory) -> bool {
        let strip = |h: &TrainHistory| {
            h.epochs.iter().map(|e| EpochRecord { ms: 0.0, ..e.clone() }).collect::<Vec<_>>()
        };
        self.stop_reason == other.stop_reason
            && self.train_indices == other.train_indices
            && self.val_indices == other.val_indices
            && strip(self) == strip(other)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,ddpm,rec,ce,train_acc,val_acc,ms\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}\n",
                e.epoch, e.loss, e.ddpm, e.rec, e.ce, e.train_acc, e.val_acc, e.ms
            ));
        }
        out
    }
}

/// One preprocessed window with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub x: Tensor,
    pub label: usize,
}

/// Stratified, seeded split into (train, validation) index lists, each sorted.
pub fn split_dataset(
    labels: &[usize],
    n_classes: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::InvalidConfig(format!("val_fraction {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..n_classes {
        let mut idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == class).map(|(i, _)| i).collect();
        let count = idx.len();
        let n_val = (count as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val >= count {
            return Err(TrainError::TooFewTrials { class, count });
        }
        idx.shuffle(&mut rng);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(TrainError::LabelOutOfRange { label: bad, n_classes });
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Top-1 accuracy of label-free, evaluation-mode inference over `windows`.
pub fn evaluate_accuracy(
    windows: &[&LabeledWindow],
    params: &ModelParams,
    schedule: &NoiseSchedule,
) -> Result<f64, TrainError> {
    let xs: Vec<Tensor> = windows.iter().map(|w| w.x.clone()).collect();
    let truth: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let probs = predict_batch(&xs, params, schedule, TAU_INFER)?;
    accuracy_from_probs(&probs, &truth)
}

/// Splits `dataset` and trains on it. See [`train_split`].
pub fn train(
    dataset: &[LabeledWindow],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    config.validate()?;
    let labels: Vec<usize> = dataset.iter().map(|w| w.label).collect();
    let (train_idx, val_idx) = split_dataset(&labels, model_config.n_classes, config.val_fraction, config.seed)?;
    train_split(dataset, train_idx, val_idx, model_config, config)
}

/// Trains on `train_idx`, validating on `val_idx` after every epoch.
pub fn train_split(
    dataset: &[LabeledWindow],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_observed(dataset, train_idx, val_idx, model_config, config, &mut |_| {})
}

/// [`train_split`] that reports each finished epoch to `on_epoch`.
pub fn train_observed(
    dataset: &[LabeledWindow],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    config.validate()?;
    if let Some(&i) = train_idx.iter().chain(&val_idx).find(|&&i| i >= dataset.len()) {
        return Err(TrainError::InvalidConfig(format!("index {i} beyond {} windows", dataset.len())));
    }
    let schedule = NoiseSchedule::default();
    let mut params = ModelParams::init(model_config, config.seed)?;
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam, params.tensors());
    let opts = LossOptions { weights: config.weights, cond_drop: config.cond_drop, training: true };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let train_set: Vec<&LabeledWindow> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&LabeledWindow> = val_idx.iter().map(|&i| &dataset[i]).collect();

    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainingExample<'_>> = chunk
                .iter()
                .map(|&i| TrainingExample { x0: &train_set[i].x, label: train_set[i].label })
                .collect();
            let batch_seed: u64 = rng.random();
            let (parts, grads) = batch_loss_and_grad(&batch, &params, &schedule, &opts, batch_seed)
                .map_err(|source| TrainError::NonFinite { epoch, batch: b, source })?;
            if !parts.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    source: crate::tensor::TensorError::NonFinite { op: "total_loss" }.into(),
                });
            }
            adam.update(params.tensors_mut(), &grads)
                .map_err(|e| TrainError::NonFinite { epoch, batch: b, source: e.into() })?;
            let n = chunk.len() as f64;
            sums[0] += parts.total * n;
            sums[1] += parts.ddpm * n;
            sums[2] += parts.rec * n;
            sums[3] += parts.ce * n;
        }
        let n = train_set.len().max(1) as f64;
        let train_acc = evaluate_accuracy(&train_set, &params, &schedule)?;
        let val_acc = evaluate_accuracy(&val_set, &params, &schedule)?;
        epochs.push(EpochRecord {
            epoch,
            loss: sums[0] / n,
            ddpm: sums[1] / n,
            rec: sums[2] / n,
            ce: sums[3] / n,
            train_acc,
            val_acc,
            ms: started.elapsed().as_secs_f64() * 1e3,
        });
        on_epoch(epochs.last().expect("just pushed"));
        if let Some(reason) = early_stop_check(train_acc, val_acc, config) {
            stop_reason = reason;
            break;
        }
    }

    Ok((params, TrainHistory { epochs, stop_reason, train_indices: train_idx, val_indices: val_idx }))
}

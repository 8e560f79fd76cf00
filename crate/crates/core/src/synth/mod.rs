//! Class-conditioned synthetic EEG.
//!
//! Each trial is pink + white background noise with class-specific sinusoids
//! on a block of channels. The resting class carries no sinusoid.

mod format;
mod separability;

pub use format::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, DATASET_MAGIC, DATASET_VERSION};
pub use separability::{band_power_features, nearest_centroid_accuracy};

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::EegEpoch;
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("class {class} out of range for {n_classes} classes")]
    InvalidClass { class: usize, n_classes: usize },
    #[error("dataset I/O: {0}")]
    Io(String),
    #[error("dataset format: {0}")]
    Format(String),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

/// A sinusoid injected on channels `[channel_start, channel_end)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub freq_hz: f64,
    pub channel_start: usize,
    pub channel_end: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub fs: f64,
    pub baseline_s: f64,
    pub imagery_s: f64,
    pub n_classes: usize,
    pub trials_per_class: usize,
    /// One list per class.
    pub signatures: Vec<Vec<Signature>>,
    /// Scale applied to every signature amplitude; noise has unit variance.
    pub snr: f64,
    /// Share of the noise variance that is pink; the rest is white.
    pub pink_fraction: f64,
    /// Scale applied to the background noise.
    pub noise_scale: f64,
    pub seed: u64,
}

/// Default sinusoid amplitude before the `snr` scale.
pub const DEFAULT_AMPLITUDE: f64 = 1.0;

/// 10, 22 and 35 Hz on consecutive quarter blocks of channels; nothing for rest.
pub fn default_signatures(channels: usize) -> Vec<Vec<Signature>> {
    let block = channels / 4;
    let mut out: Vec<Vec<Signature>> = [10.0, 22.0, 35.0]
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            vec![Signature {
                freq_hz: f,
                channel_start: k * block,
                channel_end: (k + 1) * block,
                amplitude: DEFAULT_AMPLITUDE,
            }]
        })
        .collect();
    out.push(Vec::new());
    out
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::with_channels(64)
    }
}

impl SynthConfig {
    pub fn with_channels(channels: usize) -> Self {
        SynthConfig {
            channels,
            fs: 500.0,
            baseline_s: 0.2,
            imagery_s: 2.0,
            n_classes: 4,
            trials_per_class: 100,
            signatures: default_signatures(channels),
            snr: 1.0,
            pink_fraction: 0.5,
            noise_scale: 1.0,
            seed: 42,
        }
    }

    pub fn baseline_samples(&self) -> usize {
        (self.baseline_s * self.fs).round() as usize
    }

    pub fn samples_per_trial(&self) -> usize {
        self.baseline_samples() + (self.imagery_s * self.fs).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.channels == 0 || self.n_classes == 0 || !(self.fs > 0.0) {
            return bad(format!("channels {}, classes {}, fs {}", self.channels, self.n_classes, self.fs));
        }
        if self.baseline_samples() == 0 || self.samples_per_trial() <= self.baseline_samples() {
            return bad("baseline and imagery must both be non-empty".into());
        }
        if self.signatures.len() != self.n_classes {
            return bad(format!("{} signature lists for {} classes", self.signatures.len(), self.n_classes));
        }
        if !(0.0..=1.0).contains(&self.pink_fraction) || !(self.snr >= 0.0) || !(self.noise_scale >= 0.0) {
            return bad(format!("pink {}, snr {}, noise {}", self.pink_fraction, self.snr, self.noise_scale));
        }
        for s in self.signatures.iter().flatten() {
            if !(s.freq_hz > 0.0 && s.freq_hz < self.fs / 2.0) {
                return bad(format!("signature {} Hz at fs {}", s.freq_hz, self.fs));
            }
            if s.channel_start >= s.channel_end || s.channel_end > self.channels {
                return bad(format!("channel range {}..{}", s.channel_start, s.channel_end));
            }
        }
        Ok(())
    }
}

/// Pink noise from white Gaussian input through Paul Kellet's refined
/// seven-pole filter, scaled to unit sample variance.
///
/// A burn-in of 2000 samples is discarded so the slow poles start settled.
pub fn pink_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    const BURN_IN: usize = 2000;
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + BURN_IN {
        let white: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let y = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        if i >= BURN_IN {
            out.push(y);
        }
    }
    let mean = out.iter().sum::<f64>() / n.max(1) as f64;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    let scale = if var > 0.0 { var.sqrt().recip() } else { 0.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    out
}

/// One synthetic trial of class `class`, baseline first.
pub fn generate_trial<R: Rng + ?Sized>(class: usize, config: &SynthConfig, rng: &mut R) -> Result<EegEpoch, SynthError> {
    if class >= config.n_classes {
        return Err(SynthError::InvalidClass { class, n_classes: config.n_classes });
    }
    let n = config.samples_per_trial();
    let base = config.baseline_samples();
    let (wp, ww) = (config.pink_fraction.sqrt(), (1.0 - config.pink_fraction).sqrt());
    let mut data = Array2::<f64>::zeros((config.channels, n));
    for mut row in data.rows_mut() {
        let pink = pink_noise(n, rng);
        for (v, p) in row.iter_mut().zip(pink) {
            let w: f64 = rng.sample(StandardNormal);
            *v = config.noise_scale * (wp * p + ww * w);
        }
    }
    for sig in &config.signatures[class] {
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = config.snr * sig.amplitude;
        let w = 2.0 * PI * sig.freq_hz / config.fs;
        for c in sig.channel_start..sig.channel_end {
            for (i, v) in data.row_mut(c).iter_mut().enumerate() {
                *v += amp * (w * (i as f64 - base as f64) + phase).sin();
            }
        }
    }
    Ok(EegEpoch { data, fs: config.fs, label: Some(class), onset_index: base as u64, baseline_samples: base })
}

/// One stored trial. Samples are kept in single precision, as on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub label: usize,
    pub data: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub fs: f64,
    pub channels: usize,
    pub n_classes: usize,
    pub samples_per_trial: usize,
    pub baseline_samples: usize,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }

    /// Trial `i` as an epoch whose onset sits after the baseline.
    pub fn epoch(&self, i: usize) -> EegEpoch {
        let t = &self.trials[i];
        EegEpoch {
            data: t.data.mapv(f64::from),
            fs: self.fs,
            label: Some(t.label),
            onset_index: self.baseline_samples as u64,
            baseline_samples: self.baseline_samples,
        }
    }

    /// A dataset holding only the trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { trials: indices.iter().map(|&i| self.trials[i].clone()).collect(), ..self.header() }
    }

    fn header(&self) -> Dataset {
        Dataset {
            fs: self.fs,
            channels: self.channels,
            n_classes: self.n_classes,
            samples_per_trial: self.samples_per_trial,
            baseline_samples: self.baseline_samples,
            trials: Vec::new(),
        }
    }
}

/// `trials_per_class × n_classes` trials in seeded random order.
///
/// The class order is shuffled on stream 0 of the seed; trial `i` draws its
/// noise and phases from stream `i + 1`, so trials are independent of each other.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset, SynthError> {
    config.validate()?;
    let mut labels: Vec<usize> = (0..config.n_classes)
        .flat_map(|k| std::iter::repeat_n(k, config.trials_per_class))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    labels.shuffle(&mut rng);
    build(config, &labels)
}

fn build(config: &SynthConfig, labels: &[usize]) -> Result<Dataset, SynthError> {
    let trials = par::collect_ordered(par::map(labels, |i, &label| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        generate_trial(label, config, &mut rng).map(|e| Trial { label, data: e.data.mapv(|v| v as f32) })
    }))?;
    Ok(Dataset {
        fs: config.fs,
        channels: config.channels,
        n_classes: config.n_classes,
        samples_per_trial: config.samples_per_trial(),
        baseline_samples: config.baseline_samples(),
        trials,
    })
}

/// `n` trials whose classes are drawn uniformly at random, as cues are in an
/// online session. Stream layout matches [`generate_dataset`].
pub fn generate_cued_trials(config: &SynthConfig, n: usize) -> Result<Dataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.n_classes)).collect();
    build(config, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let c = SynthConfig::default();
        assert_eq!((c.samples_per_trial(), c.baseline_samples()), (1100, 100));
        assert!(c.signatures[3].is_empty());
        assert_eq!((c.signatures[1][0].channel_start, c.signatures[1][0].channel_end), (16, 32));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        let mut c = SynthConfig::default();
        c.signatures[0][0].freq_hz = 260.0;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.signatures[2][0].channel_end = 65;
        assert!(c.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            generate_trial(4, &SynthConfig::default(), &mut rng),
            Err(SynthError::InvalidClass { .. })
        ));
    }

    #[test]
    fn trial_is_seed_deterministic() {
        let c = SynthConfig::with_channels(8);
        let a = generate_trial(1, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_trial(1, &c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label, Some(1));
    }

    #[test]
    fn small_dataset_histogram() {
        let c = SynthConfig { trials_per_class: 3, ..SynthConfig::with_channels(4) };
        let d = generate_dataset(&c).unwrap();
        assert_eq!(d.class_counts(), vec![3, 3, 3, 3]);
        assert_eq!(d, generate_dataset(&c).unwrap());
    }
}

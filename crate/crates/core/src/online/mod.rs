//! The closed-loop session: ingest, trial state machine, single-pass
//! decoding, graded feedback and the session report.

mod report;
mod ring;
mod source;
mod wire;

pub use report::{latency_stats, LatencyStats, SessionReport, TrialRow};
pub use ring::RingBuffer;
pub use source::{serve_frames, FrameSource, ReplaySource, TcpSource};
pub use wire::{encode_frame, write_frame, FrameReader};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffusion::{infer_window, rank_classes, ModelError, ModelParams, NoiseSchedule, TAU_INFER};
use crate::dsp::{prepare_window, DspError, EegEpoch, SampleStore};
use crate::protocol::{cut_window, Phase, SessionTiming, StreamEpocher, TrialClock, TrialEvent};
use crate::synth::SynthError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("I/O: {0}")]
    Io(String),
    #[error("stream protocol: {0}")]
    Protocol(String),
    #[error("source unreachable: {0}")]
    Unreachable(String),
    #[error("source underrun")]
    Underrun,
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
}

impl From<std::io::Error> for SessionError {
    fn from(e: std::io::Error) -> Self {
        SessionError::Io(e.to_string())
    }
}

impl SessionError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, SessionError::Model(ModelError::Tensor(e)) if e.is_numeric())
    }
}

/// Chance maps to 0 and certainty to 1, linearly in the top probability.
pub fn feedback_intensity(probs: &[f64]) -> Result<f64, SessionError> {
    let k = probs.len();
    if k < 2 {
        return Err(SessionError::NotSimplex(format!("{k} classes")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SessionError::NotSimplex(format!("{probs:?}")));
    }
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let chance = 1.0 / k as f64;
    Ok(((max - chance) / (1.0 - chance)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    /// Classes by descending probability, ties to the lower index.
    pub ranked: Vec<usize>,
    pub top1: usize,
    pub confidence: f64,
    pub feedback_intensity: f64,
    pub decode_latency_ms: f64,
}

impl Prediction {
    pub fn from_probabilities(probabilities: Vec<f64>, decode_latency_ms: f64) -> Result<Self, SessionError> {
        let intensity = feedback_intensity(&probabilities)?;
        let ranked = rank_classes(&probabilities);
        let top1 = ranked[0];
        Ok(Prediction { confidence: probabilities[top1], probabilities, ranked, top1, feedback_intensity: intensity, decode_latency_ms })
    }

    /// Equality ignoring the measured latency.
    pub fn same_decision(&self, other: &Prediction) -> bool {
        self.probabilities == other.probabilities && self.ranked == other.ranked && self.feedback_intensity == other.feedback_intensity
    }
}

/// Decodes the trial whose imagery starts at `onset` from filtered history:
/// epoch, baseline correction, CAR, then one inference pass. The latency
/// covers all of it.
pub fn decode_latest<S: SampleStore + ?Sized>(
    store: &S,
    clock: &TrialClock,
    onset: u64,
    params: &ModelParams,
    schedule: &NoiseSchedule,
) -> Result<Prediction, SessionError> {
    let started = Instant::now();
    let window = cut_window(store, clock, onset)?;
    let probs = infer_window(&window, params, schedule, TAU_INFER)?;
    Prediction::from_probabilities(probs, started.elapsed().as_secs_f64() * 1e3)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub timing: SessionTiming,
    pub fs: f64,
    pub n_trials: usize,
    /// Consecutive source underruns tolerated before the session ends.
    pub max_underruns: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { timing: SessionTiming::default(), fs: 500.0, n_trials: 20, max_underruns: 3 }
    }
}

/// What the session reports to its consumer, in order.
#[derive(Clone, Debug, PartialEq)]
pub enum SessionOutput {
    Event(TrialEvent),
    Prediction { trial_index: usize, prediction: Prediction },
    /// Graded feedback shown for a decoded trial.
    Feedback { trial_index: usize, label: usize, intensity: f64 },
    Dropped { trial_index: usize, reason: String },
}

/// Runs cue → imagery → decode → feedback for up to `n_trials` cued trials.
///
/// Cues come from marker frames. Time is the sample count of the stream.
/// A trial whose decode overruns the decode phase, or whose data never
/// arrives, is reported as dropped and the session goes on.
pub fn run_session(
    config: &SessionConfig,
    params: &ModelParams,
    schedule: &NoiseSchedule,
    source: &mut dyn FrameSource,
    sink: &mut dyn FnMut(SessionOutput),
) -> Result<SessionReport, SessionError> {
    let model = params.config();
    let clock = TrialClock::new(config.timing.clone(), config.fs)?;
    if clock.imagery() as usize != model.length_in {
        return Err(SessionError::InvalidConfig(format!(
            "imagery window of {} samples, model expects {}",
            clock.imagery(),
            model.length_in
        )));
    }
    let mut epocher = StreamEpocher::new(clock.clone(), model.channels_in, model.n_classes)?;
    let budget_ms = config.timing.decode_s * 1e3;
    let mut rows: Vec<TrialRow> = Vec::new();
    let mut cued = 0usize;
    let mut underruns = 0usize;

    let drop_pending = |epocher: &mut StreamEpocher, rows: &mut Vec<TrialRow>, sink: &mut dyn FnMut(SessionOutput), reason: &str| {
        for (trial, cue, label) in epocher.drop_pending() {
            for e in clock.trial_events(trial, cue) {
                sink(SessionOutput::Event(e));
            }
            sink(SessionOutput::Dropped { trial_index: trial, reason: reason.to_string() });
            rows.push(TrialRow::dropped(trial, label, reason));
        }
    };

    while rows.len() < config.n_trials {
        let frame = match source.next_frame() {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(SessionError::Underrun) => {
                underruns += 1;
                drop_pending(&mut epocher, &mut rows, sink, "underrun");
                if underruns >= config.max_underruns {
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        underruns = 0;
        if let crate::protocol::Frame::Marker { .. } = frame {
            if cued >= config.n_trials {
                continue;
            }
            cued += 1;
        }
        for ready in epocher.push(frame)? {
            // The window ends where the decode phase begins: no lookahead.
            let decode_start = ready.end_index;
            let pred = decode_latest(epocher.ring(), &clock, ready.onset_index, params, schedule)?;
            for e in clock.trial_events(ready.trial_index, ready.cue_index) {
                let is_feedback = e.phase == Phase::Feedback;
                sink(SessionOutput::Event(e));
                if is_feedback && pred.decode_latency_ms <= budget_ms {
                    sink(SessionOutput::Feedback {
                        trial_index: ready.trial_index,
                        label: pred.top1,
                        intensity: pred.feedback_intensity,
                    });
                }
            }
            if pred.decode_latency_ms > budget_ms {
                sink(SessionOutput::Dropped { trial_index: ready.trial_index, reason: "decode overrun".into() });
                rows.push(TrialRow::dropped(ready.trial_index, ready.label, "decode overrun"));
            } else {
                sink(SessionOutput::Prediction { trial_index: ready.trial_index, prediction: pred.clone() });
                rows.push(TrialRow::decoded(ready.trial_index, ready.label, pred, decode_start));
            }
        }
    }
    drop_pending(&mut epocher, &mut rows, sink, "stream ended");
    rows.truncate(config.n_trials);
    Ok(SessionReport::from_rows(rows, model.n_classes))
}

/// Times `n` decodes of random raw epochs (epoch preparation plus inference).
/// The first, cold call is timed separately and not part of the statistics.
pub fn latency_benchmark(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    clock: &TrialClock,
    n: usize,
    seed: u64,
) -> Result<LatencyStats, SessionError> {
    if n == 0 {
        return Err(SessionError::InvalidConfig("benchmark needs at least one window".into()));
    }
    let cfg = params.config();
    let base = clock.baseline() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decode = |rng: &mut ChaCha8Rng| -> Result<f64, SessionError> {
        let data = ndarray::Array2::from_shape_fn((cfg.channels_in, base + cfg.length_in), |_| rng.sample::<f64, _>(StandardNormal));
        let epoch = EegEpoch { data, fs: clock.fs, label: None, onset_index: base as u64, baseline_samples: base };
        let started = Instant::now();
        let w = prepare_window(&epoch)?;
        let x = crate::tensor::Tensor::new(vec![w.nrows(), w.ncols()], w.iter().copied().collect())
            .map_err(ModelError::from)?;
        infer_window(&x, params, schedule, TAU_INFER)?;
        Ok(started.elapsed().as_secs_f64() * 1e3)
    };
    let cold = decode(&mut rng)?;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(decode(&mut rng)?);
    }
    let mut stats = latency_stats(&samples).expect("n > 0");
    stats.cold_ms = Some(cold);
    Ok(stats)
}

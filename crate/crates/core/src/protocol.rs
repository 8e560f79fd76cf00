//! Trial timing of the online paradigm and the continuous recording that a
//! dataset is replayed as.
//!
//! Each trial is cue (2 s) → imagery (2 s) → decode (2 s) → feedback (3 s),
//! with a rest block after every 20 trials. A dataset trial's samples
//! (baseline + imagery) are placed so that its onset coincides with imagery
//! onset; everything else in the recording is zero. A marker frame at cue
//! onset carries the cued class.
//!
//! Offline preprocessing and the online session both push this recording
//! through [`StreamEpocher`], so they see the same filtered samples.

use std::collections::VecDeque;
use std::fmt;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dsp::{epoch_extract, prepare_window, FilterChain, SampleStore};
use crate::online::{RingBuffer, SessionError};
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::train::LabeledWindow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTiming {
    pub cue_s: f64,
    pub imagery_s: f64,
    pub decode_s: f64,
    pub feedback_s: f64,
    pub rest_s: f64,
    pub rest_every: usize,
    /// Pre-onset baseline used for correction.
    pub baseline_s: f64,
}

impl Default for SessionTiming {
    fn default() -> Self {
        SessionTiming {
            cue_s: 2.0,
            imagery_s: 2.0,
            decode_s: 2.0,
            feedback_s: 3.0,
            rest_s: 10.0,
            rest_every: 20,
            baseline_s: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cue,
    Imagery,
    Decode,
    Feedback,
    Rest,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Cue => "cue",
            Phase::Imagery => "imagery",
            Phase::Decode => "decode",
            Phase::Feedback => "feedback",
            Phase::Rest => "rest",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub trial_index: usize,
    pub phase: Phase,
    pub onset_index: u64,
    pub duration_s: f64,
}

/// Sample-domain view of [`SessionTiming`] at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialClock {
    pub timing: SessionTiming,
    pub fs: f64,
}

impl TrialClock {
    pub fn new(timing: SessionTiming, fs: f64) -> Result<Self, SessionError> {
        let clock = TrialClock { timing, fs };
        if !(fs > 0.0) || clock.baseline() == 0 || clock.imagery() == 0 || clock.timing.rest_every == 0 {
            return Err(SessionError::InvalidConfig(format!("timing {:?} at {fs} Hz", clock.timing)));
        }
        if clock.baseline() > clock.cue() {
            return Err(SessionError::InvalidConfig("baseline longer than the cue phase".into()));
        }
        Ok(clock)
    }

    fn samples(&self, secs: f64) -> u64 {
        (secs * self.fs).round() as u64
    }

    pub fn cue(&self) -> u64 {
        self.samples(self.timing.cue_s)
    }

    pub fn imagery(&self) -> u64 {
        self.samples(self.timing.imagery_s)
    }

    pub fn decode(&self) -> u64 {
        self.samples(self.timing.decode_s)
    }

    pub fn feedback(&self) -> u64 {
        self.samples(self.timing.feedback_s)
    }

    pub fn rest(&self) -> u64 {
        self.samples(self.timing.rest_s)
    }

    pub fn baseline(&self) -> u64 {
        self.samples(self.timing.baseline_s)
    }

    pub fn trial_len(&self) -> u64 {
        self.cue() + self.imagery() + self.decode() + self.feedback()
    }

    pub fn rest_after(&self, trial: usize) -> bool {
        (trial + 1).is_multiple_of(self.timing.rest_every)
    }

    /// Cue onset of trial `i` in a recording that starts with trial 0.
    pub fn cue_onset(&self, i: usize) -> u64 {
        i as u64 * self.trial_len() + (i / self.timing.rest_every) as u64 * self.rest()
    }

    pub fn imagery_onset_after_cue(&self, cue: u64) -> u64 {
        cue + self.cue()
    }

    /// Length of a recording holding `n` trials, including trailing rest.
    pub fn recording_len(&self, n: usize) -> u64 {
        if n == 0 {
            return 0;
        }
        let last = self.cue_onset(n - 1) + self.trial_len();
        if self.rest_after(n - 1) {
            last + self.rest()
        } else {
            last
        }
    }

    /// The phase events of one trial given its cue onset.
    pub fn trial_events(&self, trial: usize, cue: u64) -> Vec<TrialEvent> {
        let t = &self.timing;
        let phases = [
            (Phase::Cue, 0, t.cue_s),
            (Phase::Imagery, self.cue(), t.imagery_s),
            (Phase::Decode, self.cue() + self.imagery(), t.decode_s),
            (Phase::Feedback, self.cue() + self.imagery() + self.decode(), t.feedback_s),
        ];
        let mut out: Vec<TrialEvent> = phases
            .iter()
            .map(|&(phase, off, d)| TrialEvent { trial_index: trial, phase, onset_index: cue + off, duration_s: d })
            .collect();
        if self.rest_after(trial) {
            out.push(TrialEvent { trial_index: trial, phase: Phase::Rest, onset_index: cue + self.trial_len(), duration_s: t.rest_s });
        }
        out
    }
}

/// Checks an event log: phases in fixed order per trial with contiguous
/// onsets and configured durations, consecutive trial indices, a rest after
/// every `rest_every`-th trial and nowhere else, and non-decreasing onsets.
pub fn validate_events(events: &[TrialEvent], clock: &TrialClock) -> Result<(), String> {
    let mut i = 0;
    let mut trial = 0;
    let mut last_onset = 0u64;
    while i < events.len() {
        let cue = events[i].onset_index;
        let expected = clock.trial_events(trial, cue);
        for (k, want) in expected.iter().enumerate() {
            let got = events.get(i + k).ok_or_else(|| format!("trial {trial}: log ends before {}", want.phase))?;
            if got != want {
                return Err(format!("trial {trial}: expected {want:?}, got {got:?}"));
            }
            if got.onset_index < last_onset {
                return Err(format!("trial {trial}: onset {} goes backwards", got.onset_index));
            }
            last_onset = got.onset_index;
        }
        i += expected.len();
        trial += 1;
    }
    Ok(())
}

/// A unit of the sample stream.
#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    /// `channels × n` samples starting at absolute index `first_index`.
    Data { first_index: u64, samples: Array2<f32> },
    /// Cue onset of a trial of class `label`.
    Marker { index: u64, label: u8 },
}

/// Replays a dataset as a continuous recording, `chunk` samples per data frame.
pub struct Recording<'a> {
    dataset: &'a Dataset,
    clock: TrialClock,
    chunk: usize,
    pos: u64,
    end: u64,
    next_marker: usize,
    first_live: usize,
}

impl<'a> Recording<'a> {
    pub fn new(dataset: &'a Dataset, timing: SessionTiming, chunk: usize) -> Result<Self, SessionError> {
        let clock = TrialClock::new(timing, dataset.fs)?;
        check_dataset_fits(dataset, &clock)?;
        if chunk == 0 {
            return Err(SessionError::InvalidConfig("chunk size 0".into()));
        }
        let end = clock.recording_len(dataset.len());
        Ok(Recording { dataset, clock, chunk, pos: 0, end, next_marker: 0, first_live: 0 })
    }

    pub fn clock(&self) -> &TrialClock {
        &self.clock
    }

    fn trial_span(&self, i: usize) -> (u64, u64) {
        let onset = self.clock.imagery_onset_after_cue(self.clock.cue_onset(i));
        let start = onset - self.dataset.baseline_samples as u64;
        (start, start + self.dataset.samples_per_trial as u64)
    }
}

fn check_dataset_fits(dataset: &Dataset, clock: &TrialClock) -> Result<(), SessionError> {
    let imagery = (dataset.samples_per_trial - dataset.baseline_samples) as u64;
    if dataset.baseline_samples as u64 != clock.baseline() || imagery != clock.imagery() {
        return Err(SessionError::InvalidConfig(format!(
            "dataset trials ({} baseline + {} imagery samples) do not match the session timing ({} + {})",
            dataset.baseline_samples,
            imagery,
            clock.baseline(),
            clock.imagery()
        )));
    }
    Ok(())
}

impl Iterator for Recording<'_> {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        if self.next_marker < self.dataset.len() {
            let cue = self.clock.cue_onset(self.next_marker);
            if cue <= self.pos {
                let label = self.dataset.trials[self.next_marker].label as u8;
                self.next_marker += 1;
                return Some(Frame::Marker { index: cue, label });
            }
        }
        if self.pos >= self.end {
            return None;
        }
        let mut stop = (self.pos + self.chunk as u64).min(self.end);
        if self.next_marker < self.dataset.len() {
            stop = stop.min(self.clock.cue_onset(self.next_marker).max(self.pos + 1));
        }
        let mut samples = Array2::<f32>::zeros((self.dataset.channels, (stop - self.pos) as usize));
        let mut i = self.first_live;
        while i < self.dataset.len() {
            let (a, b) = self.trial_span(i);
            if a >= stop {
                break;
            }
            let (lo, hi) = (a.max(self.pos), b.min(stop));
            if lo < hi {
                let src = self.dataset.trials[i].data.slice(s![.., (lo - a) as usize..(hi - a) as usize]);
                samples.slice_mut(s![.., (lo - self.pos) as usize..(hi - self.pos) as usize]).assign(&src);
            }
            if b <= stop && i == self.first_live {
                self.first_live += 1;
            }
            i += 1;
        }
        let frame = Frame::Data { first_index: self.pos, samples };
        self.pos = stop;
        Some(frame)
    }
}

/// A cued trial whose imagery period is fully buffered.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadyTrial {
    pub trial_index: usize,
    pub label: usize,
    pub cue_index: u64,
    pub onset_index: u64,
    /// One past the last sample the window reads.
    pub end_index: u64,
}

/// Cuts the epoch around `onset` from already-filtered history, then
/// baseline-corrects and re-references it. Returns the post-onset part as a
/// `channels × imagery` tensor.
pub fn cut_window<S: SampleStore + ?Sized>(store: &S, clock: &TrialClock, onset: u64) -> Result<Tensor, SessionError> {
    let t = &clock.timing;
    let epoch = epoch_extract(store, onset, t.baseline_s, t.imagery_s, clock.fs, None)?;
    let prepared = prepare_window(&epoch)?;
    let shape = vec![prepared.nrows(), prepared.ncols()];
    Tensor::new(shape, prepared.iter().copied().collect()).map_err(|e| SessionError::InvalidConfig(e.to_string()))
}

/// Filters incoming data into a ring buffer and reports every cued trial
/// once its imagery period is complete.
pub struct StreamEpocher {
    clock: TrialClock,
    chain: FilterChain,
    ring: RingBuffer,
    pending: VecDeque<(usize, u64, usize)>,
    n_classes: usize,
    trials_seen: usize,
    last_marker: Option<u64>,
}

impl StreamEpocher {
    /// Ring capacity defaults to 30 s of samples.
    pub fn new(clock: TrialClock, channels: usize, n_classes: usize) -> Result<Self, SessionError> {
        let chain = FilterChain::new(clock.fs, channels)?;
        let capacity = (30.0 * clock.fs).round() as usize;
        let ring = RingBuffer::new(channels, capacity)?;
        Ok(StreamEpocher { clock, chain, ring, pending: VecDeque::new(), n_classes, trials_seen: 0, last_marker: None })
    }

    pub fn clock(&self) -> &TrialClock {
        &self.clock
    }

    pub fn ring(&self) -> &RingBuffer {
        &self.ring
    }

    /// Cued trials whose window has not been completed yet: `(trial, cue index, label)`.
    pub fn pending(&self) -> impl Iterator<Item = &(usize, u64, usize)> {
        self.pending.iter()
    }

    /// Forgets cued trials that have not completed.
    pub fn drop_pending(&mut self) -> Vec<(usize, u64, usize)> {
        self.pending.drain(..).collect()
    }

    /// The prepared window of a ready trial.
    pub fn window(&self, trial: &ReadyTrial) -> Result<Tensor, SessionError> {
        cut_window(&self.ring, &self.clock, trial.onset_index)
    }

    /// Accepts one frame; returns the trials that became decodable.
    pub fn push(&mut self, frame: Frame) -> Result<Vec<ReadyTrial>, SessionError> {
        match frame {
            Frame::Marker { index, label } => {
                let label = label as usize;
                if label >= self.n_classes {
                    return Err(SessionError::Protocol(format!("marker label {label} out of range")));
                }
                if self.last_marker.is_some_and(|m| index < m) || index < self.ring.write_index() {
                    return Err(SessionError::Protocol(format!("marker at {index} is out of order")));
                }
                self.last_marker = Some(index);
                self.pending.push_back((self.trials_seen, index, label));
                self.trials_seen += 1;
                Ok(Vec::new())
            }
            Frame::Data { first_index, samples } => {
                if first_index != self.ring.write_index() {
                    return Err(SessionError::Protocol(format!(
                        "data frame starts at {first_index}, expected {}",
                        self.ring.write_index()
                    )));
                }
                let mut chunk = samples.mapv(f64::from);
                self.chain.process(&mut chunk)?;
                self.ring.push(&chunk)?;
                Ok(self.collect_ready())
            }
        }
    }

    fn collect_ready(&mut self) -> Vec<ReadyTrial> {
        let mut out = Vec::new();
        while let Some(&(trial, cue, label)) = self.pending.front() {
            let onset = self.clock.imagery_onset_after_cue(cue);
            let end = onset + self.clock.imagery();
            if self.ring.write_index() < end {
                break;
            }
            self.pending.pop_front();
            out.push(ReadyTrial { trial_index: trial, label, cue_index: cue, onset_index: onset, end_index: end });
        }
        out
    }
}

/// Replays `dataset` through the streaming chain and returns one window per
/// trial, in dataset order.
pub fn preprocess_dataset(dataset: &Dataset, timing: &SessionTiming) -> Result<Vec<LabeledWindow>, SessionError> {
    let recording = Recording::new(dataset, timing.clone(), REPLAY_CHUNK)?;
    let mut epocher = StreamEpocher::new(recording.clock().clone(), dataset.channels, dataset.n_classes)?;
    let mut out = Vec::with_capacity(dataset.len());
    for frame in recording {
        for ready in epocher.push(frame)? {
            out.push(LabeledWindow { x: epocher.window(&ready)?, label: ready.label });
        }
    }
    if out.len() != dataset.len() {
        return Err(SessionError::Protocol(format!("{} windows for {} trials", out.len(), dataset.len())));
    }
    Ok(out)
}

/// Data frame length used when replaying files, in samples.
pub const REPLAY_CHUNK: usize = 250;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn clock() -> TrialClock {
        TrialClock::new(SessionTiming::default(), 500.0).unwrap()
    }

    #[test]
    fn clock_layout() {
        let c = clock();
        assert_eq!((c.cue(), c.imagery(), c.decode(), c.feedback(), c.baseline()), (1000, 1000, 1000, 1500, 100));
        assert_eq!(c.trial_len(), 4500);
        assert_eq!(c.cue_onset(19), 19 * 4500);
        assert_eq!(c.cue_onset(20), 20 * 4500 + 5000);
        assert_eq!(c.recording_len(20), 20 * 4500 + 5000);
        assert_eq!(c.recording_len(1), 4500);
    }

    #[test]
    fn validator_accepts_schedule_and_rejects_tampering() {
        let c = clock();
        let events: Vec<TrialEvent> = (0..21).flat_map(|i| c.trial_events(i, c.cue_onset(i))).collect();
        assert_eq!(events.iter().filter(|e| e.phase == Phase::Rest).count(), 1);
        assert!(validate_events(&events, &c).is_ok());
        let mut swapped = events.clone();
        swapped.swap(1, 2);
        assert!(validate_events(&swapped, &c).is_err());
        let mut no_rest = events.clone();
        no_rest.retain(|e| e.phase != Phase::Rest);
        assert!(validate_events(&no_rest, &c).is_err());
        assert!(validate_events(&events[..3], &c).is_err());
    }

    #[test]
    fn recording_places_trials_at_onsets() {
        let cfg = SynthConfig { trials_per_class: 1, ..SynthConfig::with_channels(4) };
        let d = generate_dataset(&cfg).unwrap();
        let frames: Vec<Frame> = Recording::new(&d, SessionTiming::default(), 333).unwrap().collect();
        let markers: Vec<(u64, u8)> = frames
            .iter()
            .filter_map(|f| match f {
                Frame::Marker { index, label } => Some((*index, *label)),
                _ => None,
            })
            .collect();
        assert_eq!(markers, (0..4).map(|i| (i as u64 * 4500, d.trials[i].label as u8)).collect::<Vec<_>>());
        let mut flat = Array2::<f32>::zeros((4, 0));
        let mut next = 0;
        for f in &frames {
            if let Frame::Data { first_index, samples } = f {
                assert_eq!(*first_index, next);
                next += samples.ncols() as u64;
                flat = ndarray::concatenate![ndarray::Axis(1), flat, samples.view()];
            }
        }
        assert_eq!(next, 4 * 4500);
        assert_eq!(flat.slice(s![.., 4500 + 900..4500 + 2000]), d.trials[1].data);
        assert!(flat.slice(s![.., 0..900]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn windows_do_not_depend_on_chunking() {
        let cfg = SynthConfig { trials_per_class: 1, ..SynthConfig::with_channels(4) };
        let d = generate_dataset(&cfg).unwrap();
        let a = preprocess_dataset(&d, &SessionTiming::default()).unwrap();
        let rec = Recording::new(&d, SessionTiming::default(), 17).unwrap();
        let mut ep = StreamEpocher::new(rec.clock().clone(), 4, 4).unwrap();
        let mut b = Vec::new();
        for f in rec {
            for r in ep.push(f).unwrap() {
                b.push(ep.window(&r).unwrap());
            }
        }
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(&x.x, y);
            assert_eq!(x.x.shape(), &[4, 1000]);
        }
    }
}

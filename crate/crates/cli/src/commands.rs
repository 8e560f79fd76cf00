use std::fmt::Write as _;
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use speechbci::diffusion::{predict_batch, rank_classes, ModelConfig, NoiseSchedule, TAU_INFER};
use speechbci::dsp::FilterChain;
use speechbci::online::{
    latency_benchmark, run_session, serve_frames, FrameSource, ReplaySource, SessionConfig, SessionOutput, TcpSource,
};
use speechbci::protocol::{preprocess_dataset, validate_events, Recording, SessionTiming, TrialClock, REPLAY_CHUNK};
use speechbci::synth::{generate_cued_trials, generate_dataset, read_dataset, write_dataset, Dataset, SynthConfig};
use speechbci::train::{confusion_matrix, confusion_table, split_dataset, topk_accuracy, train_observed, TrainConfig};
use speechbci::CLASS_NAMES;

use crate::checkpoint::{Checkpoint, CheckpointDoc, DataDoc, ScheduleDoc};
use crate::{BenchArgs, CliError, EvalArgs, FiltersArgs, OnlineArgs, ServeArgs, SynthArgs, TrainArgs};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads and parses a dataset file, returning it with its SHA-256.
fn load_dataset(path: &Path) -> Result<(Dataset, String), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    });
    let dataset = read_dataset(bytes.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((dataset, hex))
}

/// Session timing whose baseline and imagery match the dataset's trials.
fn timing_for(dataset: &Dataset) -> SessionTiming {
    SessionTiming {
        baseline_s: dataset.baseline_samples as f64 / dataset.fs,
        imagery_s: (dataset.samples_per_trial - dataset.baseline_samples) as f64 / dataset.fs,
        ..SessionTiming::default()
    }
}

fn class_name(k: usize) -> String {
    CLASS_NAMES.get(k).map_or_else(|| format!("class {k}"), |s| s.to_string())
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.trials_per_class == 0 {
        return Err(CliError::Usage("--trials-per-class must be at least 1".into()));
    }
    if a.channels < 4 || a.channels > u16::MAX as usize {
        return Err(CliError::Usage("--channels must be between 4 and 65535".into()));
    }
    if !(a.fs > 0.0) || !(a.snr >= 0.0) {
        return Err(CliError::Usage("--fs must be positive and --snr non-negative".into()));
    }
    let config = SynthConfig {
        trials_per_class: a.trials_per_class,
        fs: a.fs,
        snr: a.snr,
        seed: a.seed,
        ..SynthConfig::with_channels(a.channels)
    };
    let dataset = generate_dataset(&config)?;
    let mut bytes = Vec::new();
    write_dataset(&dataset, &mut bytes)?;
    write_file(&a.out, &bytes)?;
    println!("wrote {} trials to {}", dataset.len(), a.out.display());
    for (k, n) in dataset.class_counts().iter().enumerate() {
        println!("  {:<14} {n}", class_name(k));
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    if a.base_width == 0 {
        return Err(CliError::Usage("--base-width must be positive".into()));
    }
    let started = Instant::now();
    let (dataset, fingerprint) = load_dataset(&a.data)?;
    let timing = timing_for(&dataset);
    let model = ModelConfig {
        channels_in: dataset.channels,
        length_in: dataset.samples_per_trial - dataset.baseline_samples,
        n_classes: dataset.n_classes,
        base_width: a.base_width,
        ..ModelConfig::default()
    };
    model.validate()?;
    let config = TrainConfig { seed: a.seed, max_epochs: a.max_epochs, ..TrainConfig::default() };
    config.validate()?;
    let windows = preprocess_dataset(&dataset, &timing)?;
    let labels = dataset.labels();
    let (train_idx, val_idx) = split_dataset(&labels, dataset.n_classes, config.val_fraction, config.seed)?;
    eprintln!(
        "training on {} trials, validating on {} ({} parameters)",
        train_idx.len(),
        val_idx.len(),
        speechbci::diffusion::count_params(&model)?
    );
    let (mut params, history) = train_observed(&windows, train_idx, val_idx, &model, &config, &mut |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {}  val {}  {:.0} ms",
            e.epoch,
            e.loss,
            pct(e.train_acc),
            pct(e.val_acc),
            e.ms
        );
    })?;
    params.round_to_f32();
    let schedule = NoiseSchedule::default();
    let checkpoint = Checkpoint {
        doc: CheckpointDoc {
            model,
            schedule: ScheduleDoc { timesteps: schedule.timesteps(), offset: schedule.offset() },
            train: config,
            seed: a.seed,
            timing,
            data: DataDoc::describe(&dataset, fingerprint),
        },
        params,
    };
    checkpoint.save(&a.out_model)?;
    if let Some(path) = &a.history {
        write_file(path, history.to_csv())?;
    }
    println!("stop_reason {}", history.stop_reason);
    match history.last() {
        Some(e) => println!("epochs {}  train_acc {}  val_acc {}", history.epochs.len(), pct(e.train_acc), pct(e.val_acc)),
        None => println!("epochs 0  (initial parameters saved)"),
    }
    println!("wall_clock {:.1} s", started.elapsed().as_secs_f64());
    println!("model written to {}", a.out_model.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(&a.model)?;
    let k_classes = checkpoint.doc.model.n_classes;
    if a.topk == 0 || a.topk > k_classes {
        return Err(CliError::Usage(format!("--topk must lie in 1..={k_classes}")));
    }
    let (dataset, _) = load_dataset(&a.data)?;
    checkpoint.doc.data.check_compatible(&dataset)?;
    let windows = preprocess_dataset(&dataset, &checkpoint.doc.timing)?;
    let xs: Vec<_> = windows.iter().map(|w| w.x.clone()).collect();
    let truth: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let probs = predict_batch(&xs, &checkpoint.params, &checkpoint.schedule()?, TAU_INFER)?;
    let rankings: Vec<Vec<usize>> = probs.iter().map(|p| rank_classes(p)).collect();
    let pred: Vec<usize> = rankings.iter().map(|r| r[0]).collect();

    let k = a.topk;
    println!("{:<14} {:>5} {:>8} {:>8}", "class", "n", "top-1", format!("top-{k}"));
    for class in 0..k_classes {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
        let r: Vec<Vec<usize>> = idx.iter().map(|&i| rankings[i].clone()).collect();
        let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
        if idx.is_empty() {
            println!("{:<14} {:>5} {:>8} {:>8}", class_name(class), 0, "-", "-");
        } else {
            println!(
                "{:<14} {:>5} {:>8} {:>8}",
                class_name(class),
                idx.len(),
                pct(topk_accuracy(&r, &t, 1)?),
                pct(topk_accuracy(&r, &t, k)?)
            );
        }
    }
    println!(
        "{:<14} {:>5} {:>8} {:>8}",
        "All",
        truth.len(),
        pct(topk_accuracy(&rankings, &truth, 1)?),
        pct(topk_accuracy(&rankings, &truth, k)?)
    );
    let confusion = confusion_matrix(&pred, &truth, k_classes)?;
    println!("confusion (rows: true class, columns: predicted)");
    print!("{}", confusion_table(&confusion));
    if let Some(path) = &a.confusion {
        write_file(path, confusion_table(&confusion))?;
    }
    if let Some(path) = &a.predictions {
        let mut out = String::from("trial,label,predicted");
        for c in 0..k_classes {
            let _ = write!(out, ",p{c}");
        }
        out.push('\n');
        for (i, p) in probs.iter().enumerate() {
            let _ = write!(out, "{i},{},{}", truth[i], pred[i]);
            for v in p {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        write_file(path, out)?;
    }
    Ok(())
}

enum SourceSpec {
    File(String),
    Tcp(String),
    Synth,
}

fn parse_source(s: &str) -> Result<SourceSpec, CliError> {
    if s == "synth" {
        Ok(SourceSpec::Synth)
    } else if let Some(addr) = s.strip_prefix("tcp:") {
        if addr.is_empty() {
            return Err(CliError::Usage("tcp source needs HOST:PORT".into()));
        }
        Ok(SourceSpec::Tcp(addr.to_string()))
    } else if let Some(path) = s.strip_prefix("file:") {
        Ok(SourceSpec::File(path.to_string()))
    } else if s.is_empty() {
        Err(CliError::Usage("empty --source".into()))
    } else {
        Ok(SourceSpec::File(s.to_string()))
    }
}

pub fn online(a: &OnlineArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let spec = parse_source(&a.source)?;
    let checkpoint = Checkpoint::load(&a.model)?;
    let doc = &checkpoint.doc;
    let schedule = checkpoint.schedule()?;
    let config = SessionConfig { timing: doc.timing.clone(), fs: doc.data.fs, n_trials: a.trials, ..SessionConfig::default() };

    let replayed: Dataset;
    let mut source: Box<dyn FrameSource + '_> = match spec {
        SourceSpec::File(path) => {
            replayed = load_dataset(Path::new(&path))?.0;
            doc.data.check_compatible(&replayed)?;
            let frames = Recording::new(&replayed, doc.timing.clone(), REPLAY_CHUNK)?;
            if a.realtime {
                Box::new(ReplaySource::paced(frames, doc.data.fs))
            } else {
                Box::new(ReplaySource::new(frames))
            }
        }
        SourceSpec::Synth => {
            let synth = SynthConfig {
                fs: doc.data.fs,
                baseline_s: doc.timing.baseline_s,
                imagery_s: doc.timing.imagery_s,
                seed: a.seed,
                ..SynthConfig::with_channels(doc.data.channels)
            };
            replayed = generate_cued_trials(&synth, a.trials)?;
            doc.data.check_compatible(&replayed)?;
            let frames = Recording::new(&replayed, doc.timing.clone(), REPLAY_CHUNK)?;
            if a.realtime {
                Box::new(ReplaySource::paced(frames, doc.data.fs))
            } else {
                Box::new(ReplaySource::new(frames))
            }
        }
        SourceSpec::Tcp(addr) => Box::new(TcpSource::connect(&addr, Duration::from_secs_f64(doc.timing.decode_s))?),
    };

    let mut events = Vec::new();
    let mut sink = |out: SessionOutput| match out {
        SessionOutput::Event(e) => events.push(e),
        SessionOutput::Prediction { trial_index, prediction } => {
            println!(
                "trial {:>3}  decoded {:<14} p={:.3}  {:.2} ms",
                trial_index,
                class_name(prediction.top1),
                prediction.confidence,
                prediction.decode_latency_ms
            );
        }
        SessionOutput::Feedback { trial_index, label, intensity } => {
            println!("trial {:>3}  feedback {:<13} intensity {:.3}", trial_index, class_name(label), intensity);
        }
        SessionOutput::Dropped { trial_index, reason } => println!("trial {trial_index:>3}  dropped ({reason})"),
    };
    let report = run_session(&config, &checkpoint.params, &schedule, source.as_mut(), &mut sink)?;
    let clock = TrialClock::new(doc.timing.clone(), doc.data.fs)?;
    validate_events(&events, &clock).map_err(|e| CliError::Data(format!("state machine: {e}")))?;
    report.verify().map_err(|e| CliError::Data(format!("report: {e}")))?;

    println!("state machine ok ({} events)", events.len());
    println!("trials {}  dropped {}", report.rows.len(), report.dropped());
    println!("top-1 {}  top-2 {}", pct(report.top1), pct(report.top2));
    if let Some(l) = &report.latency {
        println!("latency mean {:.2} ms  p95 {:.2} ms  max {:.2} ms", l.mean_ms, l.p95_ms, l.max_ms);
    }
    if let Some(path) = &a.report {
        write_file(path, report.to_text())?;
    }
    if let Some(path) = &a.predictions {
        write_file(path, report.predictions_csv())?;
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let checkpoint = Checkpoint::load(&a.model)?;
    let clock = TrialClock::new(checkpoint.doc.timing.clone(), checkpoint.doc.data.fs)?;
    let stats = latency_benchmark(&checkpoint.params, &checkpoint.schedule()?, &clock, a.n, a.seed)?;
    println!("{:>6} {:>10} {:>10} {:>10} {:>10} {:>10}", "n", "mean_ms", "p50_ms", "p95_ms", "max_ms", "cold_ms");
    println!(
        "{:>6} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
        stats.n,
        stats.mean_ms,
        stats.p50_ms,
        stats.p95_ms,
        stats.max_ms,
        stats.cold_ms.unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let (dataset, _) = load_dataset(&a.data)?;
    let frames = Recording::new(&dataset, timing_for(&dataset), REPLAY_CHUNK)?;
    let listener = TcpListener::bind(&a.listen).map_err(|e| CliError::Data(format!("{}: {e}", a.listen)))?;
    eprintln!("serving {} trials on {}", dataset.len(), listener.local_addr().map_err(|e| CliError::Data(e.to_string()))?);
    let n = serve_frames(&listener, frames)?;
    eprintln!("sent {n} frames");
    Ok(())
}

pub fn filters(a: &FiltersArgs) -> Result<(), CliError> {
    let chain = FilterChain::new(a.fs, 1).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("# low-pass");
    print!("{}", chain.lowpass().coefficient_table());
    println!("# notch");
    print!("{}", chain.notch().coefficient_table());
    Ok(())
}

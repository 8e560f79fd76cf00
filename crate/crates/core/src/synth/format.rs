//! `BCIE` dataset files, little-endian throughout:
//!
//! ```text
//! "BCIE" | u16 version | u32 fs_millihz | u16 channels | u16 n_classes
//!        | u32 n_trials | u32 samples_per_trial | u32 baseline_samples
//! per trial: u8 label, channels × samples f32 (channel-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, SynthError, Trial};

pub const DATASET_MAGIC: &[u8; 4] = b"BCIE";
pub const DATASET_VERSION: u16 = 1;

fn format_err(msg: impl Into<String>) -> SynthError {
    SynthError::Format(msg.into())
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<(), SynthError> {
    let narrow = |v: usize, what: &str, max: usize| {
        if v > max {
            Err(format_err(format!("{what} {v} does not fit the header")))
        } else {
            Ok(v)
        }
    };
    let fs_millihz = (dataset.fs * 1000.0).round();
    if !(fs_millihz > 0.0 && fs_millihz <= u32::MAX as f64) {
        return Err(format_err(format!("sampling rate {} Hz", dataset.fs)));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(fs_millihz as u32).to_le_bytes())?;
    w.write_all(&(narrow(dataset.channels, "channels", u16::MAX as usize)? as u16).to_le_bytes())?;
    w.write_all(&(narrow(dataset.n_classes, "classes", u16::MAX as usize)? as u16).to_le_bytes())?;
    w.write_all(&(narrow(dataset.len(), "trials", u32::MAX as usize)? as u32).to_le_bytes())?;
    w.write_all(&(narrow(dataset.samples_per_trial, "samples", u32::MAX as usize)? as u32).to_le_bytes())?;
    w.write_all(&(narrow(dataset.baseline_samples, "baseline", u32::MAX as usize)? as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(dataset.channels * dataset.samples_per_trial * 4 + 1);
    for t in &dataset.trials {
        if t.label >= dataset.n_classes || t.label > u8::MAX as usize {
            return Err(format_err(format!("label {}", t.label)));
        }
        if t.data.dim() != (dataset.channels, dataset.samples_per_trial) {
            return Err(format_err(format!("trial shape {:?}", t.data.dim())));
        }
        buf.clear();
        buf.push(t.label as u8);
        for v in t.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(dataset: &Dataset, path: &Path) -> Result<(), SynthError> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N], SynthError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format!("truncated file while reading {what}")),
        _ => SynthError::Io(e.to_string()),
    })?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, SynthError> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected \"BCIE\"")));
    }
    let version = u16::from_le_bytes(read_exact(&mut r, "version")?);
    if version != DATASET_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let fs_millihz = u32::from_le_bytes(read_exact(&mut r, "fs")?);
    let channels = u16::from_le_bytes(read_exact(&mut r, "channels")?) as usize;
    let n_classes = u16::from_le_bytes(read_exact(&mut r, "classes")?) as usize;
    let n_trials = u32::from_le_bytes(read_exact(&mut r, "trial count")?) as usize;
    let samples = u32::from_le_bytes(read_exact(&mut r, "samples")?) as usize;
    let baseline = u32::from_le_bytes(read_exact(&mut r, "baseline")?) as usize;
    if fs_millihz == 0 || channels == 0 || n_classes == 0 || samples == 0 || baseline >= samples {
        return Err(format_err(format!(
            "implausible header: fs {fs_millihz} mHz, {channels} channels, {n_classes} classes, {samples} samples, {baseline} baseline"
        )));
    }
    let mut bytes = vec![0u8; channels * samples * 4];
    let mut trials = Vec::with_capacity(n_trials.min(1 << 16));
    for i in 0..n_trials {
        let [label] = read_exact::<_, 1>(&mut r, "label")?;
        let label = label as usize;
        if label >= n_classes {
            return Err(format_err(format!("trial {i}: label {label} out of range")));
        }
        r.read_exact(&mut bytes).map_err(|_| format_err(format!("truncated file in trial {i}")))?;
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let data = Array2::from_shape_vec((channels, samples), values).map_err(|e| format_err(e.to_string()))?;
        trials.push(Trial { label, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes after last trial"));
    }
    Ok(Dataset {
        fs: fs_millihz as f64 / 1000.0,
        channels,
        n_classes,
        samples_per_trial: samples,
        baseline_samples: baseline,
        trials,
    })
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset, SynthError> {
    read_dataset(BufReader::new(File::open(path)?))
}

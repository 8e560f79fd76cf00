//! A model-free check that a dataset is learnable: log band power at the
//! signature frequencies, classified by nearest class centroid.

use std::f64::consts::PI;

use crate::dsp::EegEpoch;

/// Log power of every channel at each frequency in `freqs_hz`, measured by
/// projection onto a sine/cosine pair over the post-onset samples.
///
/// Features are laid out channel-major: `[c0f0, c0f1, …, c1f0, …]`.
pub fn band_power_features(epoch: &EegEpoch, freqs_hz: &[f64]) -> Vec<f64> {
    let start = epoch.baseline_samples;
    let n = (epoch.samples() - start) as f64;
    let mut out = Vec::with_capacity(epoch.channels() * freqs_hz.len());
    for row in epoch.data.rows() {
        let seg = row.slice(ndarray::s![start..]);
        let mean = seg.sum() / n;
        for &f in freqs_hz {
            let w = 2.0 * PI * f / epoch.fs;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in seg.iter().enumerate() {
                let ph = w * i as f64;
                re += (v - mean) * ph.cos();
                im += (v - mean) * ph.sin();
            }
            out.push(((re * re + im * im) / n + 1e-12).ln());
        }
    }
    out
}

/// Accuracy of assigning each test vector to the class whose training
/// centroid is nearest in Euclidean distance. Classes absent from training
/// are never predicted.
pub fn nearest_centroid_accuracy(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    n_classes: usize,
) -> f64 {
    let dim = train.first().map_or(0, |(f, _)| f.len());
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (f, l) in train {
        counts[*l] += 1;
        sums[*l].iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    if test.is_empty() {
        return 0.0;
    }
    let correct = test
        .iter()
        .filter(|(f, l)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, c) in centroids.iter().enumerate() {
                if let Some(c) = c {
                    let d: f64 = c.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
            }
            best.1 == *l
        })
        .count();
    correct as f64 / test.len() as f64
}

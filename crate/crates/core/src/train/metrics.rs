use super::TrainError;
use crate::diffusion::rank_classes;

/// `K×K` counts; entry `(i, j)` is the number of class-`i` trials predicted as `j`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>, TrainError> {
    if pred.len() != truth.len() {
        return Err(TrainError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(TrainError::LabelOutOfRange { label: p.max(t), n_classes: k });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Fraction of trials whose true label is among the first `k` ranked classes.
pub fn topk_accuracy(rankings: &[Vec<usize>], truth: &[usize], k: usize) -> Result<f64, TrainError> {
    if rankings.len() != truth.len() {
        return Err(TrainError::LengthMismatch { pred: rankings.len(), truth: truth.len() });
    }
    if let Some(r) = rankings.first() {
        if k == 0 || k > r.len() {
            return Err(TrainError::InvalidK { k, n_classes: r.len() });
        }
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings.iter().zip(truth).filter(|(r, t)| r.iter().take(k).any(|c| c == *t)).count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Top-1 accuracy straight from probability vectors.
pub fn accuracy_from_probs(probs: &[Vec<f64>], truth: &[usize]) -> Result<f64, TrainError> {
    let rankings: Vec<Vec<usize>> = probs.iter().map(|p| rank_classes(p)).collect();
    topk_accuracy(&rankings, truth, 1)
}

/// Renders a confusion matrix as comma-separated rows.
pub fn confusion_table(m: &[Vec<usize>]) -> String {
    m.iter()
        .map(|row| row.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

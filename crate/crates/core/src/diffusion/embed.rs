use super::ModelError;
use crate::tensor::{Graph, Tensor, Var};

/// Sinusoidal embedding of a timestep, before the learned projection:
/// `[sin(t·ω_i)…, cos(t·ω_i)…]` with `ω_i = 10000^(−2i/emb_dim)`.
pub fn time_embedding(t: usize, emb_dim: usize) -> Result<Vec<f64>, ModelError> {
    if emb_dim == 0 || !emb_dim.is_multiple_of(2) {
        return Err(ModelError::OddEmbedding(emb_dim));
    }
    let half = emb_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| 10000f64.powf(-2.0 * i as f64 / emb_dim as f64)).collect();
    let mut out = Vec::with_capacity(emb_dim);
    out.extend(freqs.iter().map(|w| (t as f64 * w).sin()));
    out.extend(freqs.iter().map(|w| (t as f64 * w).cos()));
    Ok(out)
}

/// Row `label` of the class matrix, or `None` for label-free conditioning.
///
/// A `None` label contributes the zero vector, which callers skip adding.
pub fn class_projection(
    g: &mut Graph,
    class_matrix: Var,
    label: Option<usize>,
) -> Result<Option<Var>, ModelError> {
    let n_classes = g.value(class_matrix).shape()[0];
    match label {
        None => Ok(None),
        Some(k) if k >= n_classes => Err(ModelError::LabelOutOfRange { label: k, n_classes }),
        Some(k) => Ok(Some(g.row(class_matrix, k)?)),
    }
}

/// Zero vector standing in for the null class embedding.
pub fn null_class_embedding(emb_dim: usize) -> Tensor {
    Tensor::zeros(&[emb_dim])
}

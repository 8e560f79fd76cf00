use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{classify, unet_forward, Conditioning, Heads, ModelParams};
use super::schedule::NoiseSchedule;
use super::ModelError;
use crate::par;
use crate::tensor::{softmax, Graph, Tensor, TensorError};

/// Fixed normalised noise level used for online decoding.
pub const TAU_INFER: f64 = 0.5;

/// `round(τ·(T−1))`, rounding halves up. τ = 0.5, T = 1000 gives 500.
pub fn inference_timestep(tau: f64, timesteps: usize) -> usize {
    (tau * timesteps.saturating_sub(1) as f64 + 0.5).floor() as usize
}

/// Class probabilities for one preprocessed window.
///
/// The clean window is fed once, in evaluation mode, with the time embedding
/// at the inference timestep and no class embedding. No noise is drawn.
pub fn infer_window(
    x: &Tensor,
    params: &ModelParams,
    schedule: &NoiseSchedule,
    tau: f64,
) -> Result<Vec<f64>, ModelError> {
    let cfg = params.config();
    if x.shape() != [cfg.channels_in, cfg.length_in] {
        return Err(ModelError::Shape(format!(
            "window {:?}, expected [{}, {}]",
            x.shape(),
            cfg.channels_in,
            cfg.length_in
        )));
    }
    let timestep = inference_timestep(tau, schedule.timesteps());
    // Evaluation mode never draws from the generator.
    let mut idle = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let p = params.add_to_graph(&mut g, false);
    let xv = g.constant(x.clone());
    let out = unet_forward(
        &mut g,
        params.layout(),
        &p,
        xv,
        Conditioning { timestep, label: None },
        false,
        &mut idle,
        Heads::EncoderOnly,
    )?;
    let logits = classify(&mut g, params.layout(), &p, out.z, false, &mut idle)?;
    let probs = softmax(g.value(logits).data());
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax" }.into());
    }
    Ok(probs)
}

/// [`infer_window`] over many windows, results in input order.
pub fn predict_batch(
    windows: &[Tensor],
    params: &ModelParams,
    schedule: &NoiseSchedule,
    tau: f64,
) -> Result<Vec<Vec<f64>>, ModelError> {
    par::collect_ordered(par::map(windows, |_, w| infer_window(w, params, schedule, tau)))
}

/// Class indices by descending probability; ties go to the lower index.
pub fn rank_classes(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    rank_classes(probs).first().copied().unwrap_or(0)
}

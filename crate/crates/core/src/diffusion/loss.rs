use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{classify, unet_forward, Conditioning, Heads, ModelParams};
use super::schedule::{forward_noising, NoiseSchedule};
use super::ModelError;
use crate::par;
use crate::tensor::{Graph, Tensor, Var};

/// Weights of the noise-prediction, reconstruction and classification terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ddpm: f64,
    pub rec: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ddpm: 1.0, rec: 1.0, ce: 1.0 }
    }
}

/// Batch-averaged loss and its unweighted components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ddpm: f64,
    pub rec: f64,
    pub ce: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.ddpm += other.ddpm;
        self.rec += other.rec;
        self.ce += other.ce;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.ddpm *= s;
        self.rec *= s;
        self.ce *= s;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Probability of replacing the class label by the null embedding.
    pub cond_drop: f64,
    /// Enables dropout.
    pub training: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { weights: LossWeights::default(), cond_drop: 0.5, training: true }
    }
}

/// A clean window and its class.
#[derive(Clone, Copy, Debug)]
pub struct TrainingExample<'a> {
    pub x0: &'a Tensor,
    pub label: usize,
}

struct ExampleGraph {
    graph: Graph,
    params: Vec<Var>,
    loss: Var,
    parts: LossBreakdown,
}

fn example_graph<R: Rng + ?Sized>(
    params: &ModelParams,
    schedule: &NoiseSchedule,
    ex: &TrainingExample<'_>,
    opts: &LossOptions,
    trainable: bool,
    rng: &mut R,
) -> Result<ExampleGraph, ModelError> {
    let n_classes = params.config().n_classes;
    if ex.label >= n_classes {
        return Err(ModelError::LabelOutOfRange { label: ex.label, n_classes });
    }
    let t = rng.random_range(1..=schedule.timesteps());
    let eps_data: Vec<f64> = (0..ex.x0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::new(ex.x0.shape().to_vec(), eps_data)?;
    let x_t = forward_noising(ex.x0, t, &eps, schedule)?;
    let label = if rng.random::<f64>() < opts.cond_drop { None } else { Some(ex.label) };

    let w = opts.weights;
    let heads = if w.ddpm != 0.0 || w.rec != 0.0 { Heads::All } else { Heads::EncoderOnly };
    let mut g = Graph::new();
    let p = params.add_to_graph(&mut g, trainable);
    let x = g.constant(x_t);
    let out = unet_forward(
        &mut g,
        params.layout(),
        &p,
        x,
        Conditioning { timestep: t, label },
        opts.training,
        rng,
        heads,
    )?;
    let logits = classify(&mut g, params.layout(), &p, out.z, opts.training, rng)?;
    let ce = g.softmax_cross_entropy(logits, ex.label)?;
    let mut parts = LossBreakdown { ce: g.value(ce).item(), ..Default::default() };
    let mut terms = vec![(ce, w.ce)];
    if let (Some(eps_hat), Some(x0_hat)) = (out.eps_hat, out.x0_hat) {
        let eps_var = g.constant(eps);
        let x0_var = g.constant(ex.x0.clone());
        let ddpm = g.mse(eps_hat, eps_var)?;
        let rec = g.mse(x0_hat, x0_var)?;
        parts.ddpm = g.value(ddpm).item();
        parts.rec = g.value(rec).item();
        terms.push((ddpm, w.ddpm));
        terms.push((rec, w.rec));
    }
    let loss = g.weighted_sum(&terms)?;
    parts.total = g.value(loss).item();
    Ok(ExampleGraph { graph: g, params: p, loss, parts })
}

fn example_rng(batch_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    rng.set_stream(index as u64);
    rng
}

/// Joint loss, averaged over the batch.
///
/// Each example draws its timestep, noise, label drop and dropout masks from
/// its own stream derived from one seed taken from `rng`.
pub fn total_loss<R: Rng + ?Sized>(
    batch: &[TrainingExample<'_>],
    params: &ModelParams,
    schedule: &NoiseSchedule,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<LossBreakdown, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let batch_seed = rng.random::<u64>();
    let parts = par::collect_ordered(par::map(batch, |i, ex| {
        example_graph(params, schedule, ex, opts, false, &mut example_rng(batch_seed, i)).map(|e| e.parts)
    }))?;
    let mut sum = LossBreakdown::default();
    parts.iter().for_each(|p| sum.accumulate(p));
    Ok(sum.scaled(1.0 / batch.len() as f64))
}

/// Joint loss and its gradient with respect to every parameter, both
/// averaged over the batch. Per-example gradients are reduced in index order.
pub fn batch_loss_and_grad(
    batch: &[TrainingExample<'_>],
    params: &ModelParams,
    schedule: &NoiseSchedule,
    opts: &LossOptions,
    batch_seed: u64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let per_example = par::collect_ordered(par::map(batch, |i, ex| {
        let mut e = example_graph(params, schedule, ex, opts, true, &mut example_rng(batch_seed, i))?;
        e.graph.backward(e.loss)?;
        let grads: Vec<Vec<f64>> = e.params.iter().map(|&v| e.graph.grad_or_zeros(v)).collect();
        Ok::<_, ModelError>((e.parts, grads))
    }))?;

    let scale = 1.0 / batch.len() as f64;
    let mut sum = LossBreakdown::default();
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (parts, g) in &per_example {
        sum.accumulate(parts);
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += v;
            }
        }
    }
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((sum.scaled(scale), grads))
}

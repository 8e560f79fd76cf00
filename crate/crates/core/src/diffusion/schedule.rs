use std::f64::consts::FRAC_PI_2;

use super::ModelError;
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_OFFSET: f64 = 0.008;
/// Lower clip applied to ᾱ.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

/// Closed-form cosine ᾱ_t, normalised by f(0) and clipped to `[1e-5, 1]`.
pub fn cosine_alpha_bar(t: usize, timesteps: usize, offset: f64) -> Result<f64, ModelError> {
    if timesteps == 0 || t > timesteps {
        return Err(ModelError::TimestepOutOfRange { t, timesteps });
    }
    let f = |t: usize| {
        let c = ((t as f64 / timesteps as f64 + offset) / (1.0 + offset) * FRAC_PI_2).cos();
        c * c
    };
    if t == 0 {
        return Ok(1.0);
    }
    Ok((f(t) / f(0)).clamp(ALPHA_BAR_FLOOR, 1.0))
}

/// Precomputed ᾱ_0 … ᾱ_T.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(timesteps: usize, offset: f64) -> Result<Self, ModelError> {
        let alpha_bar = (0..=timesteps)
            .map(|t| cosine_alpha_bar(t, timesteps, offset))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NoiseSchedule { timesteps, offset, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, ModelError> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(ModelError::TimestepOutOfRange { t, timesteps: self.timesteps })
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::cosine(DEFAULT_TIMESTEPS, DEFAULT_OFFSET).expect("default schedule")
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noising(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor, ModelError> {
    if x0.shape() != eps.shape() {
        return Err(ModelError::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

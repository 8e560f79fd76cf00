use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        AdamState { config, first_moment: zeros(), second_moment: zeros(), step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one update in place.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(TensorError::shape(
                    "adam_step",
                    format!("parameter {i}: {} values, gradient {}", p.len(), g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }

        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((theta, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::update`].
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
) -> Result<(), TensorError> {
    state.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::from_vec(vec![v])]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_param(0.3);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.update(&mut p, &[vec![0.0]]).unwrap();
        assert_eq!(p[0].data()[0], 0.3);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps).
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.update(&mut p, &[vec![0.1]]).unwrap();
        let expected = -1e-3 * 0.1 / (0.1 + 1e-8);
        assert!((p[0].data()[0] - 1.0 - expected).abs() < 1e-15);
        assert!((expected + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_does_not_grow_step() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.update(&mut p, &[vec![0.1]]).unwrap();
        let d1 = p[0].data()[0];
        s.update(&mut p, &[vec![0.1]]).unwrap();
        let d2 = p[0].data()[0] - d1;
        assert!(d2.abs() <= d1.abs() + 1e-18);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(
            s.update(&mut p, &[vec![0.1, 0.2]]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            s.update(&mut p, &[vec![f64::NAN]]),
            Err(TensorError::NonFinite { op: "adam_step" })
        ));
        assert_eq!(s.step_count(), 0);
        assert_eq!(s.first_moment()[0].len(), 1);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Adam moments and hyperparameters for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// In-place bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64]) -> Result<()> {
        check_dim("adam params", self.first_moment.len(), params.len())?;
        check_dim("adam gradient", params.len(), gradient.len())?;
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(gradient)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Value-returning form of [`OptimizerState::step`].
pub fn adam_step(params: &[f64], gradient: &[f64], state: &OptimizerState) -> Result<(Vec<f64>, OptimizerState)> {
    let mut params = params.to_vec();
    let mut state = state.clone();
    state.step(&mut params, gradient)?;
    Ok((params, state))
}

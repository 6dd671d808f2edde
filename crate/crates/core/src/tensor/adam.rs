use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.0,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay over a fixed parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub step_count: u64,
    params: Vec<ParamId>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, config: AdamConfig, learning_rate: f64) -> Self {
        let first_moment: Vec<Vec<f64>> = params.iter().map(|&p| vec![0.0; store.get(p).numel()]).collect();
        Self {
            config,
            learning_rate,
            step_count: 0,
            second_moment: first_moment.clone(),
            first_moment,
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.first_moment[i], &self.second_moment[i])
    }

    pub fn moments_mut(&mut self, i: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.first_moment[i], &mut self.second_moment[i])
    }

    /// Applies one update using the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (i, &id) in self.params.iter().enumerate() {
            let t = store.get(id);
            let gl = t.grad.as_ref().map_or(0, Vec::len);
            if gl != t.numel() || self.first_moment[i].len() != t.numel() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: t.shape().to_vec(),
                    rhs: vec![gl],
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        let lr = self.learning_rate;
        for (i, &id) in self.params.iter().enumerate() {
            let decay = if store.decays(id) { weight_decay } else { 0.0 };
            let t = store.get_mut(id);
            let grad = t.grad.take().expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (((p, g), m), v) in t.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + epsilon) + decay * *p);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

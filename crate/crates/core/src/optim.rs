//! Adam optimizer with decoupled weight decay.
//!
//! The decay term is applied directly to the weights instead of being folded
//! into the gradient, so it does not interact with the adaptive step size:
//! `w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradSet, ModelParams};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{} must be in [0, 1), got {}", name, beta)));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Per-parameter first and second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState<S> {
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let zeros: Vec<Vec<S>> =
            params.entries().iter().map(|e| vec![S::zero(); e.tensor.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. Gradients must line up with the parameters
    /// the state was created for.
    pub fn step(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &GradSet<S>,
        config: &AdamWConfig,
    ) -> Result<()> {
        if grads.by_entry.len() != self.m.len()
            || grads
                .by_entry
                .iter()
                .zip(&self.m)
                .any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::Shape {
                op: "adamw_step",
                details: "gradient layout does not match optimizer state".into(),
            });
        }
        self.step += 1;
        let lr = S::from_f64c(config.learning_rate);
        let b1 = S::from_f64c(config.beta1);
        let b2 = S::from_f64c(config.beta2);
        let eps = S::from_f64c(config.eps);
        let wd = S::from_f64c(config.weight_decay);
        let one = S::one();
        let m_corr = one / (one - S::from_f64c(config.beta1.powi(self.step as i32)));
        let v_corr = one / (one - S::from_f64c(config.beta2.powi(self.step as i32)));

        for (entry_idx, entry) in params.entries_mut().iter_mut().enumerate() {
            let weights = entry.tensor.data_mut();
            let gs = &grads.by_entry[entry_idx];
            let ms = &mut self.m[entry_idx];
            let vs = &mut self.v[entry_idx];
            for j in 0..weights.len() {
                let g = gs[j];
                ms[j] = b1 * ms[j] + (one - b1) * g;
                vs[j] = b2 * vs[j] + (one - b2) * g * g;
                let m_hat = ms[j] * m_corr;
                let v_hat = vs[j] * v_corr;
                weights[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * weights[j]);
            }
        }
        Ok(())
    }
}

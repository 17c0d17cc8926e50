use serde::{Deserialize, Serialize};

use super::{LogitMatrix, ModelParams, Recording, Weights};
use crate::error::{Error, Result};
use crate::num::Float;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction and a constant learning rate supplied per step.
/// Moment buffers persist across calls.
#[derive(Debug, Clone)]
pub struct Adam<F = f32> {
    config: AdamConfig,
    step: u64,
    first: Option<Weights<F>>,
    second: Option<Weights<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: None,
            second: None,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor of `params`.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &Weights<F>, learning_rate: f64) -> Result<()> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        let has_adapters = params.has_adapters();
        let first = self.first.get_or_insert_with(|| params.weights.zeros_like());
        let second = self.second.get_or_insert_with(|| params.weights.zeros_like());
        self.step += 1;

        let trainable = |is_adapter: bool| is_adapter || !has_adapters;
        let grad_tensors = grads.tensors();
        let mut sq_norm = 0.0f64;
        for t in grad_tensors.iter().filter(|t| trainable(t.is_adapter)) {
            sq_norm += t.tensor.data.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
        }
        if !sq_norm.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if sq_norm.sqrt() > max => F::lit(max / sq_norm.sqrt()),
            _ => F::one(),
        };

        let (b1, b2) = (F::lit(self.config.beta1), F::lit(self.config.beta2));
        let bc1 = F::lit(1.0 - self.config.beta1.powi(self.step as i32));
        let bc2 = F::lit(1.0 - self.config.beta2.powi(self.step as i32));
        let lr = F::lit(learning_rate);
        let eps = F::lit(self.config.eps);

        let params_t = params.weights.tensors_mut();
        let first_t = first.tensors_mut();
        let second_t = second.tensors_mut();
        for (((p, g), m), v) in params_t.into_iter().zip(grad_tensors).zip(first_t).zip(second_t) {
            if !trainable(p.is_adapter) {
                continue;
            }
            for (((w, &gr), mi), vi) in p
                .tensor
                .data
                .iter_mut()
                .zip(&g.tensor.data)
                .zip(m.tensor.data.iter_mut())
                .zip(v.tensor.data.iter_mut())
            {
                let gr = gr * clip;
                *mi = b1 * *mi + (F::one() - b1) * gr;
                *vi = b2 * *vi + (F::one() - b2) * gr * gr;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w -= lr * update;
            }
        }
        params.bump_version();
        Ok(())
    }
}

impl<F: Float> ModelParams<F> {
    /// Reverse pass over `recording` followed by one optimizer update.
    pub fn backward_and_step(
        &mut self,
        recording: Recording<F>,
        dlogits: &LogitMatrix<F>,
        optimizer: &mut Adam<F>,
        learning_rate: f64,
    ) -> Result<()> {
        let grads = self.backward(&recording, dlogits)?;
        optimizer.step(self, &grads, learning_rate)
    }
}

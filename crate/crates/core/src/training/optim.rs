//! Adaptive-moment optimizer.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Updates applied so far.
    pub steps: u64,
    /// First and second moments, in store order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update. Every weight needs a gradient of its own
    /// shape.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} weights",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let name = &store.names()[i];
            let g = g
                .as_ref()
                .ok_or_else(|| Error::contract(format!("missing gradient for weight {name}")))?;
            if g.shape() != store.values()[i].shape() {
                return Err(Error::contract(format!(
                    "gradient for weight {name} has shape {:?}, expected {:?}",
                    g.shape(),
                    store.values()[i].shape()
                )));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((w, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = g.as_ref().expect("checked above");
            for (((w, g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

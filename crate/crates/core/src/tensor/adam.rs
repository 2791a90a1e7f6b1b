use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every unfrozen parameter from its gradient, then clears all
    /// gradients. Frozen parameters are left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::one() - S::of(c.beta1.powi(self.step as i32));
        let bc2 = S::one() - S::of(c.beta2.powi(self.step as i32));
        let (lr, eps) = (S::of(c.lr), S::of(c.epsilon));
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            if p.frozen {
                continue;
            }
            let (m, v) = self.moments.entry(id).or_insert_with(|| {
                (
                    Tensor::zeros(p.value.shape().to_vec()),
                    Tensor::zeros(p.value.shape().to_vec()),
                )
            });
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

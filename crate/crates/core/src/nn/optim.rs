use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::autograd::{Gradients, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed parameter subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub params: Vec<ParamId>,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|&p| Tensor::zeros(store.value(p).shape()))
            .collect();
        Adam {
            config,
            step: 0,
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::from_f64c(c.learning_rate / (1.0 - c.beta1.powi(t)));
        let bias2 = T::from_f64c((1.0 - c.beta2.powi(t)).sqrt());
        let (b1, b2, eps) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2), T::from_f64c(c.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (k, &pid) in self.params.iter().enumerate() {
            let Some(g) = grads.param(pid) else {
                continue;
            };
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            let p = store.value_mut(pid).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] = p[i] - lr * m[i] / (v[i].sqrt() / bias2 + eps);
            }
        }
    }
}

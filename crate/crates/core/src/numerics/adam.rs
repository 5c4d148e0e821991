use crate::numerics::params::ParameterSet;
use crate::numerics::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update from the gradients currently stored
    /// in `params`. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParameterSet<T>) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let grad = params.grad(id).data().to_vec();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let theta = params.value_mut(id).data_mut();
            for k in 0..grad.len() {
                let gk = grad[k].as_f64();
                let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * gk;
                let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * gk * gk;
                m[k] = T::of(mk);
                v[k] = T::of(vk);
                let update = learning_rate * (mk / correct1) / ((vk / correct2).sqrt() + epsilon);
                theta[k] = T::of(theta[k].as_f64() - update);
            }
        }
    }
}

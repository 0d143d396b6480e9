//! SGD with momentum.

use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, nesterov: bool) -> Self {
        Self {
            lr,
            momentum,
            nesterov,
            velocity: HashMap::new(),
        }
    }

    /// Update `param` in place; `key` identifies its momentum buffer.
    pub fn step(&mut self, key: &str, param: &mut Tensor, grad: &Tensor) {
        let v = self
            .velocity
            .entry(key.to_string())
            .or_insert_with(|| Tensor::zeros_like(grad));
        let mu = self.momentum;
        for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = mu * *vi + gi;
        }
        let lr = self.lr;
        if self.nesterov {
            for ((p, vi), gi) in param.data_mut().iter_mut().zip(v.data()).zip(grad.data()) {
                *p -= lr * (gi + mu * vi);
            }
        } else {
            for (p, vi) in param.data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
    }

    pub fn step_scalar(&mut self, key: &str, param: &mut f64, grad: f64) {
        let mut t = Tensor::scalar(*param);
        self.step(key, &mut t, &Tensor::scalar(grad));
        *param = t.item();
    }
}

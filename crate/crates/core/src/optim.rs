//! Named-parameter optimizers.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `v ← μ·v + g`, `θ ← θ − lr·v`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let t = self.step.max(1) as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

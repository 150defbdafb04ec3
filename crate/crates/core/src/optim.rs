use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    /// Plain gradient descent, no momentum.
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }

    pub fn with_lr(&self, lr: f64) -> Self {
        let mut c = self.clone();
        match &mut c {
            OptimizerConfig::Sgd { lr: l } | OptimizerConfig::Adam { lr: l, .. } => *l = lr,
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Sgd { lr } => {
                contract!(lr >= 0.0 && lr.is_finite(), "learning rate must be non-negative")
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                contract!(lr >= 0.0 && lr.is_finite(), "learning rate must be non-negative");
                contract!(
                    (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
                    "adam needs β₁, β₂ in [0, 1) and ε > 0"
                );
            }
        }
        Ok(())
    }
}

/// Optimizer state. Moments are kept per parameter id and only for
/// parameters that have been trainable at some step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies one update to every trainable parameter from its accumulated
    /// gradient. Frozen parameters are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let t = self.step as i32;
        for id in store.ids() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            match self.config {
                OptimizerConfig::Sgd { lr } => {
                    if lr == 0.0 {
                        continue;
                    }
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                    let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                    if lr == 0.0 {
                        continue;
                    }
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (i, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if p.trainable {
            sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for id in store.ids() {
            let p = store.get_mut(id);
            if p.trainable {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        store.get_mut(id).grad = Tensor::scalar(2.0);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }).unwrap();
        opt.apply(&mut store);
        assert!((store.value(id).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        store.get_mut(id).grad = Tensor::scalar(-3.0);
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.apply(&mut store);
        assert!((store.value(id).data()[0] - 1.001).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        store.get_mut(id).grad = Tensor::scalar(5.0);
        store.get_mut(id).trainable = false;
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.apply(&mut store);
        assert_eq!(store.value(id).data()[0], 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2]));
        store.get_mut(id).grad = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.get(id).grad.data().to_vec();
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}

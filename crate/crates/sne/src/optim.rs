//! Parameter update rules: SGD with momentum and Adam.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.9 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

enum State {
    Sgd { velocity: Vec<Tensor> },
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, step: u64 },
}

/// Optimizer over a fixed list of parameter slots.
pub struct Optimizer {
    cfg: OptimizerConfig,
    state: State,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, shapes: &[Vec<usize>]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let state = match cfg {
            OptimizerConfig::Sgd { .. } => State::Sgd { velocity: zeros },
            OptimizerConfig::Adam { .. } => State::Adam {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
        };
        Optimizer { cfg, state }
    }

    /// Apply one update. `params[i]` and `grads[i]` must match the shapes
    /// given at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        match (&self.cfg, &mut self.state) {
            (OptimizerConfig::Sgd { lr, momentum }, State::Sgd { velocity }) => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for i in 0..p.data.len() {
                        vel.data[i] = momentum * vel.data[i] + g.data[i];
                        p.data[i] -= lr * vel.data[i];
                    }
                }
            }
            (
                OptimizerConfig::Adam { lr, beta1, beta2, eps },
                State::Adam { m, v, step },
            ) => {
                *step += 1;
                let t = *step as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for ((p, g), (mi, vi)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    for i in 0..p.data.len() {
                        mi.data[i] = beta1 * mi.data[i] + (1.0 - beta1) * g.data[i];
                        vi.data[i] = beta2 * vi.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
                        let mhat = mi.data[i] / bc1;
                        let vhat = vi.data[i] / bc2;
                        p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer state matches config by construction"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_descends_quadratic() {
        let mut p = Tensor::from_vec(vec![5.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.05), &[vec![1]]);
        for _ in 0..300 {
            let g = Tensor::from_vec(vec![2.0 * p.data[0]]);
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!(p.data[0].abs() < 1e-3);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Tensor::from_vec(vec![5.0]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &[vec![1]]);
        for _ in 0..500 {
            let g = Tensor::from_vec(vec![2.0 * p.data[0]]);
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!(p.data[0].abs() < 1e-2);
    }
}

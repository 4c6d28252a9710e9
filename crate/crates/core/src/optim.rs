//! First-order optimizers over flat parameter buffers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Update rule and state for one parameter tensor.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam {
        lr: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
    Sgd {
        lr: f64,
    },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        match self {
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for i in 0..param.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    param[i] -= *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
            Optimizer::Sgd { lr } => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[4.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 1);
        let mut p = vec![1.0];
        opt.step(&mut p, &[2.0]);
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, 1);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 1.0);
            opt.step(&mut p, &[g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}

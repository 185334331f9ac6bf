use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// First-order optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            kind,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update in place. Adam uses bias-corrected moments:
    /// `p ← p − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid("optimizer called with a different parameter list"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for k in 0..params.len() {
                    let g = grads[k].data();
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    let p = params[k].data_mut();
                    for i in 0..g.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_is_learn_rate_sized() {
        for scale in [1e-3, 1.0, 1e6] {
            let mut p = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
            let g = Tensor::vector(vec![scale, -3.0 * scale, 0.5 * scale]);
            let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
            opt.step(&mut p, &[g.clone()], 0.01).unwrap();
            for (pv, gv) in p[0].data().iter().zip(g.data()) {
                // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
                let want = -0.01 * gv / (gv.abs() + ADAM_EPS);
                assert!((pv - want).abs() < 1e-15);
                assert!((pv.abs() - 0.01).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn adam_second_step_by_hand() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        opt.step(&mut p, &[Tensor::scalar(2.0)], 0.1).unwrap();
        let m = 0.9 * 0.1 + 0.1 * 2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let step2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let step1 = 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].item() + step1 + step2).abs() < 1e-14);
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![Tensor::vector(vec![1.0, 1.0])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &p);
        opt.step(&mut p, &[Tensor::vector(vec![2.0, -4.0])], 0.5).unwrap();
        assert_eq!(p[0].data(), &[0.0, 3.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -2.0])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        for _ in 0..2000 {
            let g = p[0].map(|v| 2.0 * v);
            opt.step(&mut p, &[g], 0.01).unwrap();
        }
        assert!(p[0].max_abs() < 1e-3);
    }
}

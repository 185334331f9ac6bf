use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::flow::FlowBlock;
use crate::numcore::{Tape, Tensor, Var};
use crate::objectives::{optimize, LossTrace, TrainConfig};
use crate::odeint::{integrate_on_tape, Direction};
use crate::rng::batch_indices;
use crate::velocity::FieldSpec;
use crate::{Error, Result};

type RiskFn = dyn Fn(&mut Tape, Var) -> Result<Var> + Send + Sync;

/// User risk recorded on a tape; must map `m × d` rows to an `m × 1` column.
#[derive(Clone)]
pub struct CustomRisk(pub Arc<RiskFn>);

impl fmt::Debug for CustomRisk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomRisk(..)")
    }
}

/// Risk `R(x)` minimized together with the movement penalty.
#[derive(Clone, Debug)]
pub enum RiskFunction {
    Constant(f64),
    /// `cᵀx`
    Linear { c: Vec<f64> },
    /// `(weight / 2) ‖x − center‖²`
    Quadratic { center: Vec<f64>, weight: f64 },
    /// Negated cross-entropy of a fixed logistic classifier `σ(wᵀx + b)`
    /// at `label`; lowering it pushes points across the decision boundary.
    ClassifierLoss { weights: Vec<f64>, bias: f64, label: bool },
    Custom(CustomRisk),
}

impl RiskFunction {
    pub fn custom<F>(f: F) -> Self
    where
        F: Fn(&mut Tape, Var) -> Result<Var> + Send + Sync + 'static,
    {
        RiskFunction::Custom(CustomRisk(Arc::new(f)))
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let n = match self {
            RiskFunction::Linear { c } => c.len(),
            RiskFunction::Quadratic { center, .. } => center.len(),
            RiskFunction::ClassifierLoss { weights, .. } => weights.len(),
            _ => return Ok(()),
        };
        if n != d {
            return Err(Error::Dimension { expected: d, got: n });
        }
        Ok(())
    }

    /// Row-wise risk as an `m × 1` node.
    pub fn on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = tape.value(x).cols();
        self.check_dim(d)?;
        let out = match self {
            RiskFunction::Constant(c) => {
                let s = tape.row_sum(x)?;
                tape.scale_shift(s, 0.0, *c)?
            }
            RiskFunction::Linear { c } => {
                let w = tape.constant(Tensor::matrix(1, d, c.clone())?);
                tape.linear(x, w)?
            }
            RiskFunction::Quadratic { center, weight } => {
                let eye = tape.constant(Tensor::eye(d));
                let b = tape.constant(Tensor::vector(center.iter().map(|v| -v).collect()));
                let z = tape.affine(x, eye, b)?;
                let sq = tape.square(z)?;
                let s = tape.row_sum(sq)?;
                tape.scale(s, 0.5 * weight)?
            }
            RiskFunction::ClassifierLoss { weights, bias, label } => {
                let w = tape.constant(Tensor::matrix(1, d, weights.clone())?);
                let b = tape.constant(Tensor::vector(vec![*bias]));
                let z = tape.affine(x, w, b)?;
                let signed = if *label { tape.scale(z, -1.0)? } else { z };
                let ce = tape.softplus(signed)?;
                tape.scale(ce, -1.0)?
            }
            RiskFunction::Custom(f) => (f.0)(tape, x)?,
        };
        let shape = tape.value(out).shape().to_vec();
        if shape != [tape.value(x).rows(), 1] {
            return Err(Error::invalid(format!("risk must return an m × 1 column, got {shape:?}")));
        }
        Ok(out)
    }

    pub fn values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let r = self.on_tape(&mut tape, xv)?;
        Ok(tape.value(r).data().to_vec())
    }
}

/// Aborts training when the loss keeps falling without flattening.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DescentGuard {
    pub window: usize,
    /// Minimum drop over the window, relative to `1 + |loss|`.
    pub min_drop: f64,
}

impl Default for DescentGuard {
    fn default() -> Self {
        Self {
            window: 500,
            min_drop: 0.5,
        }
    }
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (y - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

impl DescentGuard {
    /// The last `window` losses fall steadily: the second half descends at
    /// least 90% as fast as the first and the total drop is large.
    pub fn triggered(&self, losses: &[f64]) -> bool {
        if self.window < 4 || losses.len() < self.window {
            return false;
        }
        let w = &losses[losses.len() - self.window..];
        let half = self.window / 2;
        let (s1, s2) = (slope(&w[..half]), slope(&w[half..]));
        let k = (self.window / 10).max(1);
        let head = w[..k].iter().sum::<f64>() / k as f64;
        let tail = w[w.len() - k..].iter().sum::<f64>() / k as f64;
        s1 < 0.0 && s2 <= 0.9 * s1 && head - tail > self.min_drop * (1.0 + tail.abs())
    }
}

#[derive(Clone, Debug)]
pub struct DroConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub init_seed: u64,
    pub guard: DescentGuard,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden: vec![32, 32],
            steps: 8,
            init_seed: 0,
            guard: DescentGuard::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DroResult {
    pub block: FlowBlock,
    /// `F*(x)` for every input row.
    pub samples: Tensor,
    /// `mean R(F*(x))`
    pub risk: f64,
    /// `mean ‖x − F*(x)‖²`
    pub movement: f64,
    /// `risk + movement / (2γ)`
    pub objective: f64,
    pub trace: LossTrace,
}

/// `mean R(F(x)) + (1/(2γ)) mean ‖x − F(x)‖²` for one block.
pub fn dro_on_tape(
    tape: &mut Tape,
    block: &FlowBlock,
    vars: &[Var],
    risk: &RiskFunction,
    x: &Tensor,
    gamma: f64,
    steps: Option<usize>,
) -> Result<(Var, Var, Var)> {
    let bound = block.field.bind_vars(vars);
    let cfg = steps.map_or(block.integrator, |s| block.integrator.with_steps(s));
    let x0 = tape.constant(x.clone());
    let fx = integrate_on_tape(tape, &bound, x0, &cfg, Direction::Forward)?;
    let r = risk.on_tape(tape, fx)?;
    let r = tape.mean(r)?;
    let d = tape.sub(fx, x0)?;
    let sq = tape.square(d)?;
    let rows = tape.row_sum(sq)?;
    let mv = tape.mean(rows)?;
    let pen = tape.scale(mv, 1.0 / (2.0 * gamma))?;
    Ok((tape.add(r, pen)?, r, mv))
}

/// Learns the single-block transport minimizing the risk plus movement
/// penalty over samples of `p`.
pub fn dro_train(risk: &RiskFunction, p_samples: &Tensor, gamma: f64, cfg: &DroConfig) -> Result<DroResult> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("γ = {gamma} must be positive")));
    }
    if p_samples.rank() != 2 || p_samples.rows() == 0 {
        return Err(Error::invalid("need a non-empty sample matrix"));
    }
    let d = p_samples.cols();
    risk.check_dim(d)?;
    let spec = FieldSpec::new(d).with_hidden(&cfg.hidden);
    let mut block = FlowBlock::init(&spec, cfg.steps, cfg.init_seed)?;
    let mut params = block.field.params();
    let template = block.clone();
    let mut history = Vec::new();
    let train = &cfg.train;
    let trace = optimize(&mut params, train, |p, rng, it| {
        if cfg.guard.triggered(&history) {
            return Err(Error::Divergence {
                iteration: it,
                reason: format!(
                    "unbounded risk descent: the loss fell steadily for {} iterations; \
                     the risk is likely unbounded below at this γ",
                    cfg.guard.window
                ),
            });
        }
        let x = p_samples.select_rows(&batch_indices(rng, p_samples.rows(), train.batch_size));
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
        let (loss, _, _) = dro_on_tape(&mut tape, &template, &vars, risk, &x, gamma, train.train_steps)?;
        let v = tape.value(loss).item();
        history.push(v);
        Ok((v, tape.grad_scalar(loss)?.into_vec()))
    })?;
    block.field.set_params(&params)?;
    block.trained = true;
    let samples = block.forward(p_samples)?;
    let r = risk.values(&samples)?;
    let risk_mean = r.iter().sum::<f64>() / r.len() as f64;
    let movement = samples
        .data()
        .chunks(d)
        .zip(p_samples.data().chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sum::<f64>()
        / samples.rows() as f64;
    Ok(DroResult {
        block,
        samples,
        risk: risk_mean,
        movement,
        objective: risk_mean + movement / (2.0 * gamma),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::check_gradient_fd;
    use crate::rng::{normal_tensor, seeded};

    fn cfg(iterations: usize) -> DroConfig {
        DroConfig {
            train: TrainConfig {
                learn_rate: 2e-2,
                batch_size: 128,
                iterations,
                seed: 1,
                train_steps: Some(2),
                min_lr_fraction: 0.05,
                ..TrainConfig::default()
            },
            hidden: vec![16],
            steps: 4,
            ..DroConfig::default()
        }
    }

    #[test]
    fn risk_values() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.0]).unwrap();
        assert_eq!(RiskFunction::Linear { c: vec![1.0, -1.0] }.values(&x).unwrap(), vec![-1.0, -1.0]);
        let q = RiskFunction::Quadratic {
            center: vec![1.0, 0.0],
            weight: -1.0,
        };
        assert_eq!(q.values(&x).unwrap(), vec![-2.0, -2.0]);
        let c = RiskFunction::ClassifierLoss {
            weights: vec![0.0, 0.0],
            bias: 0.0,
            label: true,
        };
        for v in c.values(&x).unwrap() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
        assert!(RiskFunction::Linear { c: vec![1.0] }.values(&x).is_err());
        let bad = RiskFunction::custom(|_, x| Ok(x));
        assert!(bad.values(&x).is_err());
    }

    #[test]
    fn constant_risk_keeps_identity() {
        let x = normal_tensor(&mut seeded(0), 256, 2);
        let r = dro_train(&RiskFunction::Constant(3.0), &x, 1.0, &cfg(50)).unwrap();
        assert!(r.movement < 1e-10, "{}", r.movement);
        assert!((r.risk - 3.0).abs() < 1e-12);
    }

    // Pointwise minimizer of cᵀy + ‖x − y‖²/(2γ) is y = x − γc.
    #[test]
    fn linear_risk_shifts_by_gamma_c() {
        let x = normal_tensor(&mut seeded(1), 512, 2);
        let c = vec![1.0, -0.5];
        let gamma = 1.0;
        let r = dro_train(&RiskFunction::Linear { c: c.clone() }, &x, gamma, &cfg(400)).unwrap();
        let norm = gamma * (c[0] * c[0] + c[1] * c[1]).sqrt();
        let mut worst: f64 = 0.0;
        for i in 0..x.rows() {
            for j in 0..2 {
                worst = worst.max((r.samples.row(i)[j] - (x.row(i)[j] - gamma * c[j])).abs());
            }
        }
        assert!(worst <= 0.05 * norm * 2f64.sqrt(), "worst {worst}");
    }

    // −‖y − μ‖²/2 + ‖x − y‖²/(2γ) is minimized at y = (x − γμ)/(1 − γ).
    #[test]
    fn concave_quadratic_risk_matches_closed_form() {
        let x = normal_tensor(&mut seeded(2), 512, 1);
        let (mu, gamma) = (1.0, 0.5);
        let risk = RiskFunction::Quadratic {
            center: vec![mu],
            weight: -1.0,
        };
        let r = dro_train(&risk, &x, gamma, &cfg(600)).unwrap();
        let mut err = 0.0;
        for i in 0..x.rows() {
            let want = (x.data()[i] - gamma * mu) / (1.0 - gamma);
            err += (r.samples.data()[i] - want).powi(2);
        }
        let rmse = (err / x.rows() as f64).sqrt();
        assert!(rmse < 0.1, "rmse {rmse}");
    }

    #[test]
    fn unbounded_risk_is_detected() {
        let x = normal_tensor(&mut seeded(3), 128, 1);
        let risk = RiskFunction::Quadratic {
            center: vec![0.0],
            weight: -4.0,
        };
        let mut c = cfg(1500);
        c.train.min_lr_fraction = 1.0;
        let err = dro_train(&risk, &x, 2.0, &c).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
        assert!(err.to_string().contains("unbounded"));
    }

    #[test]
    fn guard_ignores_converging_losses() {
        let g = DescentGuard::default();
        let conv: Vec<f64> = (0..800).map(|i| (-(i as f64) / 50.0).exp()).collect();
        assert!(!g.triggered(&conv));
        let lin: Vec<f64> = (0..800).map(|i| -(i as f64) * 0.01).collect();
        assert!(g.triggered(&lin));
        assert!(!g.triggered(&lin[..100]));
    }

    #[test]
    fn dro_gradient_matches_fd() {
        let risk = RiskFunction::ClassifierLoss {
            weights: vec![0.7, -0.3],
            bias: 0.2,
            label: false,
        };
        for seed in 0..5 {
            let spec = FieldSpec::new(2).with_hidden(&[4]);
            let mut block = FlowBlock::init(&spec, 3, seed).unwrap();
            let ps: Vec<Tensor> = block.field.params().iter().map(|t| t.map(|v| v + 0.05)).collect();
            block.field.set_params(&ps).unwrap();
            let x = normal_tensor(&mut seeded(seed), 7, 2);
            let rep = check_gradient_fd(
                |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
                    Ok(dro_on_tape(tape, &block, vars, &risk, &x, 0.7, None)?.0)
                },
                &ps,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed, "seed {seed}: {}", rep.max_rel_error);
        }
    }
}

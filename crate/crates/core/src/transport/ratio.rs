use crate::numcore::{Tape, Tensor, Var};
use crate::objectives::{optimize, TrainConfig};
use crate::rng::{batch_indices, stream};
use crate::velocity::{Activation, Mlp};
use crate::{Error, Result};

pub const DEFAULT_RATIO_HIDDEN: [usize; 2] = [32, 32];

/// Logistic classifier `φ(x) ≈ log(f₁(x)/f₀(x))` on standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioModel {
    mlp: Mlp,
    shift: Vec<f64>,
    scale: Vec<f64>,
    /// Bridge index when the model is one term of a telescope.
    pub step: Option<usize>,
    /// Sample counts `(m₀, m₁)` it was fitted on.
    pub counts: (usize, usize),
}

impl RatioModel {
    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn log_ratio(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.log_ratio_on_tape(&mut tape, xv, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// `m × 1` node; the network weights are `vars` when given, constants
    /// otherwise.
    pub fn log_ratio_on_tape(&self, tape: &mut Tape, x: Var, vars: Option<&[Var]>) -> Result<Var> {
        let d = self.dim();
        if tape.value(x).cols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: tape.value(x).cols(),
            });
        }
        let mut w = Tensor::zeros(&[d, d]);
        for j in 0..d {
            w.data_mut()[j * d + j] = 1.0 / self.scale[j];
        }
        let b: Vec<f64> = self.shift.iter().zip(&self.scale).map(|(m, s)| -m / s).collect();
        let w = tape.constant(w);
        let b = tape.constant(Tensor::vector(b));
        let z = tape.affine(x, w, b)?;
        let bound = match vars {
            Some(v) => self.mlp.bind_vars(v),
            None => self.mlp.bind(tape, false),
        };
        bound.forward(tape, z)
    }
}

/// Empirical `mean_{f₀} log(1 + e^φ) + mean_{f₁} log(1 + e^{−φ})`.
pub fn logistic_on_tape(
    tape: &mut Tape,
    model: &RatioModel,
    vars: &[Var],
    x0: &Tensor,
    x1: &Tensor,
) -> Result<Var> {
    let a = tape.constant(x0.clone());
    let b = tape.constant(x1.clone());
    let phi0 = model.log_ratio_on_tape(tape, a, Some(vars))?;
    let phi1 = model.log_ratio_on_tape(tape, b, Some(vars))?;
    let l0 = tape.softplus(phi0)?;
    let neg = tape.scale(phi1, -1.0)?;
    let l1 = tape.softplus(neg)?;
    let m0 = tape.mean(l0)?;
    let m1 = tape.mean(l1)?;
    Ok(tape.add(m0, m1)?)
}

fn column_moments(a: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = a.cols();
    let n = (a.rows() + b.rows()) as f64;
    let rows = || (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i)));
    let mut mean = vec![0.0; d];
    for r in rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Fits `φ` by minimizing the logistic loss; `φ` then estimates
/// `log(f₁/f₀)`. Minibatches of `cfg.batch_size` rows are drawn from each
/// sample (all rows when fewer).
pub fn fit_logistic_ratio(samples0: &Tensor, samples1: &Tensor, cfg: &TrainConfig) -> Result<RatioModel> {
    fit_logistic_ratio_with(samples0, samples1, &DEFAULT_RATIO_HIDDEN, cfg)
}

pub fn fit_logistic_ratio_with(
    samples0: &Tensor,
    samples1: &Tensor,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<RatioModel> {
    if samples0.rank() != 2 || samples1.rank() != 2 || samples0.rows() == 0 || samples1.rows() == 0 {
        return Err(Error::invalid("both classes need at least one sample"));
    }
    if samples0.cols() != samples1.cols() {
        return Err(Error::Dimension {
            expected: samples0.cols(),
            got: samples1.cols(),
        });
    }
    if !samples0.all_finite() || !samples1.all_finite() {
        return Err(Error::NonFinite("ratio training samples".into()));
    }
    let d = samples0.cols();
    let (shift, scale) = column_moments(samples0, samples1);
    let mlp = Mlp::init(d, hidden, 1, Activation::Tanh, true, &mut stream(cfg.seed, u64::MAX));
    let mut model = RatioModel {
        mlp,
        shift,
        scale,
        step: None,
        counts: (samples0.rows(), samples1.rows()),
    };
    let mut params = model.mlp.params();
    let template = model.clone();
    optimize(&mut params, cfg, |p, rng, _| {
        let a = samples0.select_rows(&batch_indices(rng, samples0.rows(), cfg.batch_size));
        let b = samples1.select_rows(&batch_indices(rng, samples1.rows(), cfg.batch_size));
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
        let loss = logistic_on_tape(&mut tape, &template, &vars, &a, &b)?;
        Ok((tape.value(loss).item(), tape.grad_scalar(loss)?.into_vec()))
    })?;
    model.mlp.set_params(&params)?;
    Ok(model)
}

use crate::datasets::AnalyticDensity;
use crate::flow::{FlowBlock, FlowChain, ParticleEnsemble};
use crate::numcore::{Tape, Tensor, Var};
use crate::odeint::{integrate_augmented_on_tape, Direction, IntegratorConfig};
use crate::rng::Rng;
use crate::velocity::{DivergenceEstimator, ProbeSet, VelocityField};
use crate::{Error, Result};

use super::fm::{fm_batch, FmOptions};

/// A scalar loss and its gradient, one tensor per parameter in binding order.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Records `field`'s parameters as gradient slots and returns their handles.
pub fn bind_params(tape: &mut Tape, field: &VelocityField) -> Vec<Var> {
    field.params().into_iter().map(|p| tape.param(p)).collect()
}

fn scalar_mean(tape: &mut Tape, col: Var) -> Result<Var> {
    Ok(tape.mean(col)?)
}

/// `−(1/m) Σ [log q(F(x_i)) + Σ_n ∫ ∇·v_n]` recorded end to end.
/// `vars[n]` holds block `n`'s parameter handles.
pub fn nll_on_tape(
    tape: &mut Tape,
    chain: &FlowChain,
    vars: &[Vec<Var>],
    x: Var,
    probes: &ProbeSet,
    steps: Option<usize>,
) -> Result<Var> {
    if vars.len() != chain.blocks().len() {
        return Err(Error::invalid("one parameter list per block is required"));
    }
    let mut h = x;
    let mut total: Option<Var> = None;
    for (b, v) in chain.blocks().iter().zip(vars) {
        let bound = b.field.bind_vars(v);
        let cfg = train_integrator(b, steps);
        let (next, ld) = integrate_augmented_on_tape(tape, &bound, h, &cfg, Direction::Forward, probes)?;
        total = Some(match total {
            Some(t) => tape.add(t, ld)?,
            None => ld,
        });
        h = next;
    }
    let lq = chain.base().log_pdf_on_tape(tape, h)?;
    let ll = tape.add(lq, total.expect("non-empty chain"))?;
    let m = scalar_mean(tape, ll)?;
    Ok(tape.scale(m, -1.0)?)
}

pub(crate) fn train_integrator(block: &FlowBlock, steps: Option<usize>) -> IntegratorConfig {
    match steps {
        Some(s) => block.integrator.with_steps(s),
        None => block.integrator,
    }
}

/// Negative log-likelihood of `batch` with gradients for every block.
pub fn nll_loss(
    chain: &FlowChain,
    batch: &ParticleEnsemble,
    est: DivergenceEstimator,
    rng: &mut Rng,
) -> Result<LossValue> {
    let probes = est.draw(rng, batch.len(), chain.dim())?;
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = chain.blocks().iter().map(|b| bind_params(&mut tape, &b.field)).collect();
    let x = tape.constant(batch.points().clone());
    let loss = nll_on_tape(&mut tape, chain, &vars, x, &probes, None)?;
    finish(&tape, loss)
}

fn finish(tape: &Tape, loss: Var) -> Result<LossValue> {
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossValue {
        value,
        grads: tape.grad_scalar(loss)?.into_vec(),
    })
}

/// Nodes of the per-block JKO objective (all scalars).
#[derive(Clone, Copy, Debug)]
pub struct JkoTerms {
    pub loss: Var,
    /// `(1/m) Σ V(x_i(t_n))`
    pub potential: Var,
    /// `(1/m) Σ ∫ ∇·v`
    pub logdet: Var,
    /// `(1/m) Σ ‖x_i(t_n) − x_i(t_{n−1})‖²`
    pub movement: Var,
}

/// `(1/m) Σ [V(x(t_n)) − ∫∇·v] + (1/(2γm)) Σ ‖x(t_n) − x(t_{n−1})‖²`, with
/// `V = −log q` up to its normalising constant.
#[allow(clippy::too_many_arguments)]
pub fn jko_on_tape(
    tape: &mut Tape,
    block: &FlowBlock,
    vars: &[Var],
    x0: Var,
    gamma: f64,
    base: &AnalyticDensity,
    probes: &ProbeSet,
    steps: Option<usize>,
) -> Result<JkoTerms> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("JKO step size γ = {gamma} must be positive")));
    }
    let bound = block.field.bind_vars(vars);
    let cfg = train_integrator(block, steps);
    let (x1, ld) = integrate_augmented_on_tape(tape, &bound, x0, &cfg, Direction::Forward, probes)?;
    let v = base.potential_on_tape(tape, x1)?;
    let potential = scalar_mean(tape, v)?;
    let logdet = scalar_mean(tape, ld)?;
    let dx = tape.sub(x1, x0)?;
    let sq = tape.square(dx)?;
    let per_row = tape.row_sum(sq)?;
    let movement = scalar_mean(tape, per_row)?;
    let kl = tape.sub(potential, logdet)?;
    let pen = tape.scale(movement, 1.0 / (2.0 * gamma))?;
    let loss = tape.add(kl, pen)?;
    Ok(JkoTerms {
        loss,
        potential,
        logdet,
        movement,
    })
}

#[derive(Clone, Debug)]
pub struct JkoValue {
    pub value: f64,
    pub potential: f64,
    pub logdet: f64,
    pub movement: f64,
    pub grads: Vec<Tensor>,
}

pub fn jko_block_loss(
    block: &FlowBlock,
    batch_prev: &ParticleEnsemble,
    gamma: f64,
    base: &AnalyticDensity,
    est: DivergenceEstimator,
    rng: &mut Rng,
) -> Result<JkoValue> {
    jko_eval(block, batch_prev.points(), gamma, base, est, rng, None)
}

pub(crate) fn jko_eval(
    block: &FlowBlock,
    x: &Tensor,
    gamma: f64,
    base: &AnalyticDensity,
    est: DivergenceEstimator,
    rng: &mut Rng,
    steps: Option<usize>,
) -> Result<JkoValue> {
    let probes = est.draw(rng, x.rows(), block.dim())?;
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &block.field);
    let x0 = tape.constant(x.clone());
    let t = jko_on_tape(&mut tape, block, &vars, x0, gamma, base, &probes, steps)?;
    let lv = finish(&tape, t.loss)?;
    Ok(JkoValue {
        value: lv.value,
        potential: tape.value(t.potential).item(),
        logdet: tape.value(t.logdet).item(),
        movement: tape.value(t.movement).item(),
        grads: lv.grads,
    })
}

/// `(1/n) Σ ‖v(x_j, t_j) − target_j‖²` on prepared regression triples.
pub fn fm_on_tape(
    tape: &mut Tape,
    field: &VelocityField,
    vars: &[Var],
    points: &Tensor,
    times: &Tensor,
    targets: &Tensor,
) -> Result<Var> {
    let bound = field.bind_vars(vars);
    let x = tape.constant(points.clone());
    let v = bound.velocity_at(tape, x, times)?;
    let target = tape.constant(targets.clone());
    let r = tape.sub(v, target)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / points.rows() as f64)?)
}

/// Monte-Carlo flow-matching loss between `x0 ~ p` and `x1 ~ q`.
pub fn fm_loss(
    field: &VelocityField,
    x0: &Tensor,
    x1: &Tensor,
    opts: &FmOptions,
    rng: &mut Rng,
) -> Result<LossValue> {
    let b = fm_batch(field.interval(), x0, x1, opts, rng)?;
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, field);
    let loss = fm_on_tape(&mut tape, field, &vars, &b.points, &b.times, &b.targets)?;
    finish(&tape, loss)
}

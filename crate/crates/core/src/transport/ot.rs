use serde::Serialize;

use crate::datasets::AnalyticDensity;
use crate::flow::{FlowChain, ParticleEnsemble};
use crate::numcore::{Tape, Tensor, Var};
use crate::objectives::{optimize, LossTrace, TrainConfig};
use crate::odeint::{integrate_augmented_on_tape, integrate_on_tape, Direction, IntegratorConfig};
use crate::rng::{batch_indices, stream};
use crate::velocity::{DivergenceEstimator, ProbeSet};
use crate::{Error, Result};

use super::ratio::{fit_logistic_ratio, RatioModel};

/// One end of a transport problem: samples plus the density when known.
#[derive(Clone, Debug)]
pub struct Marginal {
    pub samples: Tensor,
    pub density: Option<AnalyticDensity>,
}

impl Marginal {
    pub fn analytic(density: AnalyticDensity, samples: Tensor) -> Self {
        Self {
            samples,
            density: Some(density),
        }
    }

    pub fn empirical(samples: Tensor) -> Self {
        Self { samples, density: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointMode {
    Analytic,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtConfig {
    pub train: TrainConfig,
    /// Classifier training for the endpoint terms when a density is missing.
    pub ratio: TrainConfig,
    /// Iterations between classifier refits.
    pub refit_every: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ratio: TrainConfig {
                iterations: 200,
                learn_rate: 1e-2,
                batch_size: 256,
                ..TrainConfig::default()
            },
            refit_every: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OtResult {
    pub chain: FlowChain,
    /// Particle transport cost on unit time, `T Σ_n |I_n|⁻¹ (1/m) Σ ‖Δx‖²`.
    pub cost: f64,
    /// `KL(p ‖ p̂)` with `p̂ = F⁻¹♯q`.
    pub kl_p: f64,
    /// `KL(q ‖ q̂)` with `q̂ = F♯p`.
    pub kl_q: f64,
    pub mode: EndpointMode,
    pub trace: LossTrace,
}

fn integrator(cfg: &IntegratorConfig, steps: Option<usize>) -> IntegratorConfig {
    steps.map_or(*cfg, |s| cfg.with_steps(s))
}

/// Nodes of the regularized transport objective (scalars).
#[derive(Clone, Copy, Debug)]
pub struct OtTerms {
    pub loss: Var,
    pub cost: Var,
    pub kl_p: Var,
    pub kl_q: Var,
}

/// `cost + γ (KL(p‖p̂) + KL(q‖q̂))` with both KLs from the analytic
/// endpoint densities and the chain's divergence integrals.
#[allow(clippy::too_many_arguments)]
pub fn ot_analytic_on_tape(
    tape: &mut Tape,
    chain: &FlowChain,
    vars: &[Vec<Var>],
    (p, q): (&AnalyticDensity, &AnalyticDensity),
    x: &Tensor,
    y: &Tensor,
    gamma: f64,
    probes: (&ProbeSet, &ProbeSet),
    steps: Option<usize>,
) -> Result<OtTerms> {
    let total = chain.t_total() - chain.blocks()[0].interval().0;
    let mut h = tape.constant(x.clone());
    let mut cost: Option<Var> = None;
    let mut ld_f: Option<Var> = None;
    for (b, v) in chain.blocks().iter().zip(vars) {
        let (ta, tb) = b.interval();
        let bound = b.field.bind_vars(v);
        let cfg = integrator(&b.integrator, steps);
        let (next, ld) = integrate_augmented_on_tape(tape, &bound, h, &cfg, Direction::Forward, probes.0)?;
        let c = movement(tape, h, next, total / (tb - ta))?;
        cost = Some(accumulate(tape, cost, c)?);
        ld_f = Some(accumulate(tape, ld_f, ld)?);
        h = next;
    }
    let log_p = const_column(tape, p.log_pdf_rows(x))?;
    let lq = q.log_pdf_on_tape(tape, h)?;
    let kl_p = kl_term(tape, log_p, lq, ld_f.expect("non-empty chain"))?;

    let mut g = tape.constant(y.clone());
    let mut ld_r: Option<Var> = None;
    for (b, v) in chain.blocks().iter().zip(vars).rev() {
        let bound = b.field.bind_vars(v);
        let cfg = integrator(&b.integrator, steps);
        let (prev, ld) = integrate_augmented_on_tape(tape, &bound, g, &cfg, Direction::Reverse, probes.1)?;
        ld_r = Some(accumulate(tape, ld_r, ld)?);
        g = prev;
    }
    let log_q = const_column(tape, q.log_pdf_rows(y))?;
    let lp = p.log_pdf_on_tape(tape, g)?;
    let kl_q = kl_term(tape, log_q, lp, ld_r.expect("non-empty chain"))?;

    finish(tape, cost.expect("non-empty chain"), kl_p, kl_q, gamma)
}

fn finish(tape: &mut Tape, cost: Var, kl_p: Var, kl_q: Var, gamma: f64) -> Result<OtTerms> {
    let kl = tape.add(kl_p, kl_q)?;
    let pen = tape.scale(kl, gamma)?;
    let loss = tape.add(cost, pen)?;
    Ok(OtTerms { loss, cost, kl_p, kl_q })
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Var> {
    Ok(match acc {
        Some(a) => tape.add(a, v)?,
        None => v,
    })
}

fn const_column(tape: &mut Tape, v: Vec<f64>) -> Result<Var> {
    let n = v.len();
    Ok(tape.constant(Tensor::matrix(n, 1, v)?))
}

/// `mean(own − other − logdet)`.
fn kl_term(tape: &mut Tape, own: Var, other: Var, logdet: Var) -> Result<Var> {
    let a = tape.sub(own, other)?;
    let b = tape.sub(a, logdet)?;
    Ok(tape.mean(b)?)
}

/// `weight · (1/m) Σ ‖b − a‖²`
fn movement(tape: &mut Tape, a: Var, b: Var, weight: f64) -> Result<Var> {
    let d = tape.sub(b, a)?;
    let sq = tape.square(d)?;
    let rows = tape.row_sum(sq)?;
    let m = tape.mean(rows)?;
    Ok(tape.scale(m, weight)?)
}

/// Classifier variant: `KL(p‖p̂) = KL(F♯p ‖ q) ≈ mean φ_a(F(x))` with
/// `φ_a ≈ log(F♯p / q)` frozen, and symmetrically `mean φ_b(F⁻¹(y))` with
/// `φ_b ≈ log(F⁻¹♯q / p)`.
#[allow(clippy::too_many_arguments)]
pub fn ot_classifier_on_tape(
    tape: &mut Tape,
    chain: &FlowChain,
    vars: &[Vec<Var>],
    (phi_a, phi_b): (&RatioModel, &RatioModel),
    x: &Tensor,
    y: &Tensor,
    gamma: f64,
    steps: Option<usize>,
) -> Result<OtTerms> {
    let total = chain.t_total() - chain.blocks()[0].interval().0;
    let mut h = tape.constant(x.clone());
    let mut cost: Option<Var> = None;
    for (b, v) in chain.blocks().iter().zip(vars) {
        let (ta, tb) = b.interval();
        let bound = b.field.bind_vars(v);
        let next = integrate_on_tape(tape, &bound, h, &integrator(&b.integrator, steps), Direction::Forward)?;
        let c = movement(tape, h, next, total / (tb - ta))?;
        cost = Some(accumulate(tape, cost, c)?);
        h = next;
    }
    let ra = phi_a.log_ratio_on_tape(tape, h, None)?;
    let kl_p = tape.mean(ra)?;
    let mut g = tape.constant(y.clone());
    for (b, v) in chain.blocks().iter().zip(vars).rev() {
        let bound = b.field.bind_vars(v);
        g = integrate_on_tape(tape, &bound, g, &integrator(&b.integrator, steps), Direction::Reverse)?;
    }
    let rb = phi_b.log_ratio_on_tape(tape, g, None)?;
    let kl_q = tape.mean(rb)?;
    finish(tape, cost.expect("non-empty chain"), kl_p, kl_q, gamma)
}

/// Unit-time particle cost of `chain` on `x`.
pub fn transport_cost(chain: &FlowChain, x: &Tensor) -> Result<f64> {
    let ens = ParticleEnsemble::new(x.clone())?;
    let traj = chain.forward_trajectory(&ens)?;
    let total = chain.t_total() - chain.blocks()[0].interval().0;
    let m = x.rows() as f64;
    let mut cost = 0.0;
    for (b, w) in chain.blocks().iter().zip(traj.windows(2)) {
        let (ta, tb) = b.interval();
        let sq: f64 = w[0].data().iter().zip(w[1].data()).map(|(a, c)| (c - a).powi(2)).sum();
        cost += total / (tb - ta) * sq / m;
    }
    Ok(cost)
}

fn refit(chain: &FlowChain, p: &Tensor, q: &Tensor, cfg: &TrainConfig) -> Result<(RatioModel, RatioModel)> {
    let pushed = chain.forward_map(&ParticleEnsemble::new(p.clone())?)?;
    let pulled = chain.inverse_map(&ParticleEnsemble::new(q.clone())?)?;
    let a = fit_logistic_ratio(q, pushed.points(), cfg)?;
    let b = fit_logistic_ratio(p, pulled.points(), cfg)?;
    Ok((a, b))
}

/// Trains `chain` to carry `p` onto `q` at minimal transport cost with
/// penalty weight `gamma` on the two endpoint KLs.
pub fn ot_train(p: &Marginal, q: &Marginal, mut chain: FlowChain, gamma: f64, cfg: &OtConfig) -> Result<OtResult> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("penalty weight γ = {gamma} must be positive")));
    }
    let d = chain.dim();
    for s in [&p.samples, &q.samples] {
        if s.rank() != 2 || s.cols() != d || s.rows() == 0 {
            return Err(Error::Dimension {
                expected: d,
                got: s.cols(),
            });
        }
    }
    let train = &cfg.train;
    let est = train.divergence.unwrap_or_else(|| DivergenceEstimator::default_for(d));
    let counts: Vec<usize> = chain.blocks().iter().map(|b| b.field.params().len()).collect();
    let mut flat: Vec<Tensor> = chain.blocks().iter().flat_map(|b| b.field.params()).collect();
    let split = |flat: &[Tensor]| -> Vec<Vec<Tensor>> {
        let mut k = 0;
        counts
            .iter()
            .map(|&c| {
                k += c;
                flat[k - c..k].to_vec()
            })
            .collect()
    };
    let analytic = match (&p.density, &q.density) {
        (Some(a), Some(b)) => Some((a.clone(), b.clone())),
        _ => None,
    };
    let mode = if analytic.is_some() {
        EndpointMode::Analytic
    } else {
        EndpointMode::Classifier
    };
    let mut work = chain.clone();
    let mut ratios: Option<(RatioModel, RatioModel)> = None;
    let refit_every = cfg.refit_every.max(1);
    let trace = optimize(&mut flat, train, |params, rng, it| {
        for (b, ps) in work.blocks_mut().iter_mut().zip(split(params)) {
            b.field.set_params(&ps)?;
        }
        let xi = batch_indices(rng, p.samples.rows(), train.batch_size);
        let yi = batch_indices(rng, q.samples.rows(), train.batch_size);
        let (x, y) = (p.samples.select_rows(&xi), q.samples.select_rows(&yi));
        let mut tape = Tape::new();
        let vars: Vec<Vec<Var>> = split(params)
            .into_iter()
            .map(|ps| ps.into_iter().map(|t| tape.param(t)).collect())
            .collect();
        let terms = match &analytic {
            Some((pd, qd)) => {
                let pa = est.draw(rng, x.rows(), d)?;
                let pb = est.draw(rng, y.rows(), d)?;
                ot_analytic_on_tape(&mut tape, &work, &vars, (pd, qd), &x, &y, gamma, (&pa, &pb), train.train_steps)?
            }
            None => {
                if it % refit_every == 0 || ratios.is_none() {
                    let rc = TrainConfig {
                        seed: cfg.ratio.seed.wrapping_add(it as u64),
                        ..cfg.ratio.clone()
                    };
                    ratios = Some(refit(&work, &p.samples, &q.samples, &rc)?);
                }
                let (a, b) = ratios.as_ref().expect("fitted");
                ot_classifier_on_tape(&mut tape, &work, &vars, (a, b), &x, &y, gamma, train.train_steps)?
            }
        };
        Ok((tape.value(terms.loss).item(), tape.grad_scalar(terms.loss)?.into_vec()))
    })?;
    for (b, ps) in chain.blocks_mut().iter_mut().zip(split(&flat)) {
        b.field.set_params(&ps)?;
        b.trained = true;
    }
    let cost = transport_cost(&chain, &p.samples)?;
    let (kl_p, kl_q) = endpoint_kls(&chain, p, q, est, train.seed)?;
    Ok(OtResult {
        chain,
        cost,
        kl_p,
        kl_q,
        mode,
        trace,
    })
}

/// Final endpoint KL estimates on the full sample sets.
fn endpoint_kls(chain: &FlowChain, p: &Marginal, q: &Marginal, est: DivergenceEstimator, seed: u64) -> Result<(f64, f64)> {
    let mut rng = stream(seed, u64::MAX - 1);
    match (&p.density, &q.density) {
        (Some(pd), Some(qd)) => {
            let fx = chain.forward_with_logdet(&ParticleEnsemble::new(p.samples.clone())?, est, &mut rng)?;
            let ld = fx.logdet().expect("accumulated");
            let kl_p = mean((0..p.samples.rows()).map(|i| {
                pd.log_pdf(p.samples.row(i)) - qd.log_pdf(fx.points().row(i)) - ld[i]
            }));
            let gy = chain.inverse_with_logdet(&ParticleEnsemble::new(q.samples.clone())?, est, &mut rng)?;
            let ld = gy.logdet().expect("accumulated");
            let kl_q = mean((0..q.samples.rows()).map(|i| {
                qd.log_pdf(q.samples.row(i)) - pd.log_pdf(gy.points().row(i)) - ld[i]
            }));
            Ok((kl_p, kl_q))
        }
        _ => {
            let cfg = TrainConfig {
                seed,
                ..OtConfig::default().ratio
            };
            let (a, b) = refit(chain, &p.samples, &q.samples, &cfg)?;
            let pushed = chain.forward_map(&ParticleEnsemble::new(p.samples.clone())?)?;
            let pulled = chain.inverse_map(&ParticleEnsemble::new(q.samples.clone())?)?;
            Ok((
                mean(a.log_ratio(pushed.points())?.into_iter()),
                mean(b.log_ratio(pulled.points())?.into_iter()),
            ))
        }
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::AnalyticDensity;
use crate::flow::{FlowBlock, FlowChain, ParticleEnsemble};
use crate::numcore::{Tape, Tensor, Var};
use crate::rng::{batch_indices, stream, Rng};
use crate::velocity::{DivergenceEstimator, FieldSpec};
use crate::{Error, Result};

use super::fm::{fm_batch, make_local_fm_targets, FmOptions};
use super::losses::{fm_on_tape, jko_eval, nll_on_tape};
use super::optim::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learn_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// JKO / local step size `γ > 0`.
    pub gamma: f64,
    pub optimizer: OptimizerKind,
    /// Cosine decay of the learning rate down to `learn_rate · min_lr_fraction`
    /// (1 keeps it constant).
    pub min_lr_fraction: f64,
    /// Integrator steps used while training through trajectories; the
    /// block's own setting when absent.
    pub train_steps: Option<usize>,
    /// Divergence mode during training; `default_for(d)` when absent.
    pub divergence: Option<DivergenceEstimator>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learn_rate: 5e-3,
            batch_size: 128,
            iterations: 500,
            seed: 0,
            gamma: 1.0,
            optimizer: OptimizerKind::Adam,
            min_lr_fraction: 1.0,
            train_steps: None,
            divergence: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learn_rate > 0.0) || !self.learn_rate.is_finite() {
            return Err(Error::invalid("learn_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma = {} must be positive", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::invalid("min_lr_fraction must lie in [0, 1]"));
        }
        if self.train_steps == Some(0) {
            return Err(Error::invalid("train_steps must be at least 1"));
        }
        if let Some(e) = self.divergence {
            e.validate()?;
        }
        Ok(())
    }

    fn check_batch(&self, n: usize) -> Result<()> {
        if self.batch_size > n {
            return Err(Error::invalid(format!(
                "batch_size {} exceeds the {n} available samples",
                self.batch_size
            )));
        }
        Ok(())
    }

    pub fn learn_rate_at(&self, iteration: usize) -> f64 {
        if self.min_lr_fraction >= 1.0 || self.iterations <= 1 {
            return self.learn_rate;
        }
        let frac = iteration as f64 / (self.iterations - 1) as f64;
        let floor = self.min_lr_fraction;
        self.learn_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (PI * frac).cos()))
    }

    fn estimator(&self, d: usize) -> DivergenceEstimator {
        self.divergence.unwrap_or_else(|| DivergenceEstimator::default_for(d))
    }

    pub(crate) fn iteration_rng(&self, iteration: usize) -> Rng {
        stream(self.seed, iteration as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Per-iteration losses of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn push(&mut self, iteration: usize, loss: f64, wall_ms: f64) {
        self.rows.push(TraceRow {
            iteration,
            loss,
            wall_ms,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Running minimum of the loss (monotone non-increasing).
    pub fn smoothed(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.rows
            .iter()
            .map(|r| {
                best = best.min(r.loss);
                best
            })
            .collect()
    }

    /// Mean loss over the last `k` iterations.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let k = k.min(self.rows.len());
        if k == 0 {
            return None;
        }
        let tail = &self.rows[self.rows.len() - k..];
        Some(tail.iter().map(|r| r.loss).sum::<f64>() / k as f64)
    }

    /// Appends another run with iterations offset to follow this one.
    pub fn extend(&mut self, other: &LossTrace) {
        let base = self.rows.last().map_or(0, |r| r.iteration + 1);
        self.rows.extend(other.rows.iter().map(|r| TraceRow {
            iteration: base + r.iteration,
            ..*r
        }));
    }

    /// `iteration,loss,wall_ms` with a header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "loss", "wall_ms"])?;
        for r in &self.rows {
            out.write_record([
                r.iteration.to_string(),
                format!("{:?}", r.loss),
                format!("{:.3}", r.wall_ms),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Runs `cfg.iterations` optimizer steps on `params`. `eval` returns the loss
/// and gradient for the current parameters; it receives an rng stream keyed
/// by `(cfg.seed, iteration)`.
pub fn optimize<F>(params: &mut [Tensor], cfg: &TrainConfig, mut eval: F) -> Result<LossTrace>
where
    F: FnMut(&[Tensor], &mut Rng, usize) -> Result<(f64, Vec<Tensor>)>,
{
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer, params);
    let mut trace = LossTrace::default();
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let mut rng = cfg.iteration_rng(it);
        let (loss, grads) = eval(params, &mut rng, it).map_err(|e| match e {
            Error::Num(_) | Error::Integration { .. } | Error::NonFinite(_) => Error::Divergence {
                iteration: it,
                reason: e.to_string(),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                reason: format!("loss became {loss}"),
            });
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                reason: "non-finite gradient".into(),
            });
        }
        trace.push(it, loss, start.elapsed().as_secs_f64() * 1e3);
        opt.step(params, &grads, cfg.learn_rate_at(it))?;
    }
    Ok(trace)
}

fn minibatch(data: &Tensor, cfg: &TrainConfig, rng: &mut Rng) -> Tensor {
    data.select_rows(&batch_indices(rng, data.rows(), cfg.batch_size))
}

fn split_params(flat: &[Tensor], counts: &[usize]) -> Vec<Vec<Tensor>> {
    let mut out = Vec::with_capacity(counts.len());
    let mut k = 0;
    for &c in counts {
        out.push(flat[k..k + c].to_vec());
        k += c;
    }
    out
}

/// End-to-end maximum likelihood over every block of `chain`.
pub fn train_nll(chain: &mut FlowChain, data: &Tensor, cfg: &TrainConfig) -> Result<LossTrace> {
    cfg.validate()?;
    cfg.check_batch(data.rows())?;
    let est = cfg.estimator(chain.dim());
    let counts: Vec<usize> = chain.blocks().iter().map(|b| b.field.params().len()).collect();
    let mut flat: Vec<Tensor> = chain.blocks().iter().flat_map(|b| b.field.params()).collect();
    let template = chain.clone();
    let trace = optimize(&mut flat, cfg, |params, rng, _| {
        let x = minibatch(data, cfg, rng);
        let probes = est.draw(rng, x.rows(), template.dim())?;
        let mut tape = Tape::new();
        let vars: Vec<Vec<Var>> = split_params(params, &counts)
            .into_iter()
            .map(|ps| ps.into_iter().map(|p| tape.param(p)).collect())
            .collect();
        let xv = tape.constant(x);
        let loss = nll_on_tape(&mut tape, &template, &vars, xv, &probes, cfg.train_steps)?;
        Ok((tape.value(loss).item(), tape.grad_scalar(loss)?.into_vec()))
    })?;
    for (b, ps) in chain.blocks_mut().iter_mut().zip(split_params(&flat, &counts)) {
        b.field.set_params(&ps)?;
        b.trained = true;
    }
    Ok(trace)
}

/// One JKO proximal step: trains `block` on particles `x_prev` (outputs of
/// the already-trained blocks).
pub fn train_jko_block(
    block: &mut FlowBlock,
    x_prev: &Tensor,
    base: &AnalyticDensity,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    cfg.check_batch(x_prev.rows())?;
    let est = cfg.estimator(block.dim());
    let mut params = block.field.params();
    let mut work = block.clone();
    let trace = optimize(&mut params, cfg, |p, rng, _| {
        work.field.set_params(p)?;
        let x = minibatch(x_prev, cfg, rng);
        let v = jko_eval(&work, &x, cfg.gamma, base, est, rng, cfg.train_steps)?;
        Ok((v.value, v.grads))
    })?;
    block.field.set_params(&params)?;
    block.trained = true;
    Ok(trace)
}

/// Flow matching of `block` between samples `x0` (its start) and `x1` (its
/// end); each iteration draws independent minibatches from both pools.
pub fn train_fm_block(
    block: &mut FlowBlock,
    x0: &Tensor,
    x1: &Tensor,
    opts: &FmOptions,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    cfg.check_batch(x0.rows().min(x1.rows()))?;
    let interval = block.interval();
    let field = block.field.clone();
    let mut params = block.field.params();
    let trace = optimize(&mut params, cfg, |p, rng, _| {
        let a = minibatch(x0, cfg, rng);
        let b = minibatch(x1, cfg, rng);
        let batch = fm_batch(interval, &a, &b, opts, rng)?;
        regress(&field, p, &batch)
    })?;
    block.field.set_params(&params)?;
    block.trained = true;
    Ok(trace)
}

fn regress(field: &crate::velocity::VelocityField, p: &[Tensor], b: &super::fm::FmBatch) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = p.iter().map(|t| tape.param(t.clone())).collect();
    let loss = fm_on_tape(&mut tape, field, &vars, &b.points, &b.times, &b.targets)?;
    Ok((tape.value(loss).item(), tape.grad_scalar(loss)?.into_vec()))
}

/// Local flow matching: `block` learns to carry `x_prev` one OU step of
/// length `gamma_n` forward, pairing each `x_l` with its own OU successor.
pub fn train_local_fm_block(
    block: &mut FlowBlock,
    x_prev: &Tensor,
    gamma_n: f64,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    cfg.check_batch(x_prev.rows())?;
    let interval = block.interval();
    let field = block.field.clone();
    let mut params = block.field.params();
    let trace = optimize(&mut params, cfg, |p, rng, _| {
        let xl = minibatch(x_prev, cfg, rng);
        let xr = make_local_fm_targets(&xl, gamma_n, rng)?;
        let batch = paired_fm_batch(interval, &xl, &xr, rng)?;
        regress(&field, p, &batch)
    })?;
    block.field.set_params(&params)?;
    block.trained = true;
    Ok(trace)
}

/// Linear-interpolant regression triples for already-paired rows.
fn paired_fm_batch(interval: (f64, f64), xl: &Tensor, xr: &Tensor, rng: &mut Rng) -> Result<super::fm::FmBatch> {
    use rand::Rng as _;
    let (m, d) = (xl.rows(), xl.cols());
    let strata = super::fm::DEFAULT_STRATA;
    let mut labels: Vec<usize> = (0..m).map(|j| j % strata).collect();
    crate::rng::shuffle(rng, &mut labels);
    let (ta, tb) = interval;
    let rate = 1.0 / (tb - ta);
    let mut points = Vec::with_capacity(m * d);
    let mut times = Vec::with_capacity(m);
    let mut targets = Vec::with_capacity(m * d);
    for (i, &k) in labels.iter().enumerate() {
        let u = (k as f64 + rng.random::<f64>()) / strata as f64;
        times.push(ta + u * (tb - ta));
        for (&a, &b) in xl.row(i).iter().zip(xr.row(i)) {
            points.push((1.0 - u) * a + u * b);
            targets.push((b - a) * rate);
        }
    }
    Ok(super::fm::FmBatch {
        points: Tensor::matrix(m, d, points)?,
        times: Tensor::matrix(m, 1, times)?,
        targets: Tensor::matrix(m, d, targets)?,
    })
}

/// Per-block step sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GammaSchedule {
    Constant { gamma: f64 },
    /// `γ_n = first · ratio^n`
    Geometric { first: f64, ratio: f64 },
}

impl GammaSchedule {
    pub fn gamma(&self, n: usize) -> f64 {
        match *self {
            GammaSchedule::Constant { gamma } => gamma,
            GammaSchedule::Geometric { first, ratio } => first * ratio.powi(n as i32),
        }
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        for n in 0..n_blocks {
            let g = self.gamma(n);
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::invalid(format!("step size γ_{n} = {g} must be positive")));
            }
        }
        Ok(())
    }
}

/// Outcome of block-by-block training.
#[derive(Clone, Debug)]
pub struct ProgressiveRun {
    pub chain: FlowChain,
    pub traces: Vec<LossTrace>,
    /// Particle positions before block 0 and after every block.
    pub particles: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Nll,
    Jko,
    Fm,
    LocalFm,
}

/// What a single block is trained against.
#[derive(Clone, Copy, Debug)]
pub enum BlockData<'a> {
    /// Particles at the block's start plus the target density (`jko`).
    Jko { x_prev: &'a Tensor, base: &'a AnalyticDensity },
    /// Start and end sample pools (`fm`).
    Fm { x0: &'a Tensor, x1: &'a Tensor, opts: &'a FmOptions },
    /// Particles at the block's start and the OU step (`local_fm`).
    LocalFm { x_prev: &'a Tensor, gamma_n: f64 },
}

/// Trains one block with the objective matching `data`.
pub fn train_block(block: &mut FlowBlock, data: BlockData<'_>, cfg: &TrainConfig) -> Result<LossTrace> {
    match data {
        BlockData::Jko { x_prev, base } => train_jko_block(block, x_prev, base, cfg),
        BlockData::Fm { x0, x1, opts } => train_fm_block(block, x0, x1, opts, cfg),
        BlockData::LocalFm { x_prev, gamma_n } => train_local_fm_block(block, x_prev, gamma_n, cfg),
    }
}

/// Layout shared by the progressive drivers.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainLayout {
    pub spec: FieldSpec,
    pub n_blocks: usize,
    pub steps_per_block: usize,
    pub init_seed: u64,
}

fn progressive<F>(
    data: &Tensor,
    base: AnalyticDensity,
    layout: &ChainLayout,
    cfg: &TrainConfig,
    mut train_one: F,
) -> Result<ProgressiveRun>
where
    F: FnMut(usize, &mut FlowBlock, &Tensor, &TrainConfig) -> Result<LossTrace>,
{
    if layout.n_blocks == 0 {
        return Err(Error::invalid("need at least one block"));
    }
    let mut chain = FlowChain::init(
        layout.n_blocks,
        &layout.spec,
        layout.steps_per_block,
        base,
        layout.init_seed,
    )?;
    let mut particles = vec![data.clone()];
    let mut traces = Vec::with_capacity(layout.n_blocks);
    for n in 0..layout.n_blocks {
        let block_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(1_000_003 * n as u64),
            ..cfg.clone()
        };
        let x_prev = particles.last().expect("non-empty").clone();
        let block = &mut chain.blocks_mut()[n];
        traces.push(train_one(n, block, &x_prev, &block_cfg)?);
        // particles are pushed through the new block once and stored
        let next = chain.blocks()[n].forward(&x_prev)?;
        particles.push(next);
    }
    Ok(ProgressiveRun {
        chain,
        traces,
        particles,
    })
}

/// Progressive JKO: block `n` solves the proximal step from the particles
/// produced by blocks `0..n`, which stay frozen.
pub fn progressive_jko(
    data: &Tensor,
    base: AnalyticDensity,
    layout: &ChainLayout,
    gammas: &GammaSchedule,
    cfg: &TrainConfig,
) -> Result<ProgressiveRun> {
    gammas.validate(layout.n_blocks)?;
    let target = base.clone();
    progressive(data, base, layout, cfg, |n, block, x, c| {
        let c = TrainConfig {
            gamma: gammas.gamma(n),
            ..c.clone()
        };
        train_jko_block(block, x, &target, &c)
    })
}

/// Progressive local flow matching with OU steps `gammas`.
pub fn progressive_local_fm(
    data: &Tensor,
    base: AnalyticDensity,
    layout: &ChainLayout,
    gammas: &GammaSchedule,
    cfg: &TrainConfig,
) -> Result<ProgressiveRun> {
    gammas.validate(layout.n_blocks)?;
    progressive(data, base, layout, cfg, |n, block, x, c| {
        train_local_fm_block(block, x, gammas.gamma(n), c)
    })
}

/// Global flow matching: block `n` learns the `n`-th time window of the
/// interpolant between `data` and samples of `base`.
pub fn train_fm_chain(
    data: &Tensor,
    base: AnalyticDensity,
    layout: &ChainLayout,
    opts: &FmOptions,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(FlowChain, Vec<LossTrace>)> {
    let noise = base.sample(rng, data.rows());
    let mut chain = FlowChain::init(
        layout.n_blocks,
        &layout.spec,
        layout.steps_per_block,
        base,
        layout.init_seed,
    )?;
    let n = layout.n_blocks as f64;
    let mut traces = Vec::new();
    for (k, block) in chain.blocks_mut().iter_mut().enumerate() {
        let o = FmOptions {
            window: (k as f64 / n, (k + 1) as f64 / n),
            ..*opts
        };
        let c = TrainConfig {
            seed: cfg.seed.wrapping_add(1_000_003 * k as u64),
            ..cfg.clone()
        };
        traces.push(train_fm_block(block, data, &noise, &o, &c)?);
    }
    Ok((chain, traces))
}

/// Evaluates a block's data-to-noise map on an ensemble (for callers that
/// only hold the block).
pub fn push_forward(block: &FlowBlock, ens: &ParticleEnsemble) -> Result<ParticleEnsemble> {
    ParticleEnsemble::new(block.forward(ens.points())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Gaussian;
    use crate::rng::{normal_tensor, seeded};

    fn shifted_1d(mean: f64, m: usize, seed: u64) -> Tensor {
        normal_tensor(&mut seeded(seed), m, 1).map(|v| v + mean)
    }

    fn layout(d: usize, n: usize) -> ChainLayout {
        ChainLayout {
            spec: FieldSpec::new(d).with_hidden(&[16]),
            n_blocks: n,
            steps_per_block: 4,
            init_seed: 7,
        }
    }

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            learn_rate: 2e-2,
            batch_size: 64,
            iterations,
            seed: 3,
            train_steps: Some(2),
            ..TrainConfig::default()
        }
    }

    fn mean_var(x: &Tensor) -> (f64, f64) {
        let n = x.rows() as f64;
        let m = x.data().iter().sum::<f64>() / n;
        let v = x.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn zero_iterations_leave_block_untouched() {
        let base = AnalyticDensity::standard_normal(1).unwrap();
        let mut chain = FlowChain::init(1, &layout(1, 1).spec, 4, base.clone(), 0).unwrap();
        let before = chain.blocks()[0].field.checksum();
        let x = shifted_1d(2.0, 64, 0);
        let tr = train_jko_block(&mut chain.blocks_mut()[0], &x, &base, &quick(0)).unwrap();
        assert!(tr.is_empty());
        assert_eq!(chain.blocks()[0].field.checksum(), before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { gamma: 0.0, ..quick(1) }.validate().is_err());
        assert!(TrainConfig { learn_rate: -1.0, ..quick(1) }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..quick(1) }.validate().is_err());
        assert!(TrainConfig { train_steps: Some(0), ..quick(1) }.validate().is_err());
        let base = AnalyticDensity::standard_normal(1).unwrap();
        let mut block = FlowBlock::init(&layout(1, 1).spec, 4, 0).unwrap();
        let x = shifted_1d(0.0, 10, 0);
        assert!(train_jko_block(&mut block, &x, &base, &quick(1)).is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"iterations": 3, "gamma": 0.5}"#).unwrap();
        assert_eq!(parsed.iterations, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iters": 3}"#).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig {
            min_lr_fraction: 0.1,
            iterations: 11,
            learn_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!((c.learn_rate_at(0) - 1.0).abs() < 1e-15);
        assert!((c.learn_rate_at(5) - 0.55).abs() < 1e-12);
        assert!((c.learn_rate_at(10) - 0.1).abs() < 1e-12);
        assert_eq!(quick(10).learn_rate_at(9), quick(10).learn_rate);
    }

    #[test]
    fn non_finite_loss_reports_iteration() {
        let mut p = vec![Tensor::scalar(1.0)];
        let err = optimize(&mut p, &quick(10), |_, _, it| {
            let v = if it == 3 { f64::NAN } else { 1.0 };
            Ok((v, vec![Tensor::scalar(0.0)]))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 3, .. }));
    }

    #[test]
    fn optimize_is_reproducible() {
        let run = || {
            let mut p = vec![Tensor::vector(vec![2.0, -1.0])];
            let tr = optimize(&mut p, &quick(20), |p, rng, _| {
                use rand::Rng as _;
                let noise: f64 = rng.random::<f64>() - 0.5;
                let v = p[0].data().iter().map(|a| a * a).sum::<f64>() + noise;
                Ok((v, vec![p[0].map(|a| 2.0 * a)]))
            })
            .unwrap();
            (p, tr.losses())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trace_csv_and_smoothing() {
        let mut t = LossTrace::default();
        for (i, l) in [3.0, 1.0, 2.0, 0.5].iter().enumerate() {
            t.push(i, *l, i as f64);
        }
        assert_eq!(t.smoothed(), vec![3.0, 1.0, 1.0, 0.5]);
        assert_eq!(t.tail_mean(2), Some(1.25));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,loss,wall_ms\n0,3.0,0.000\n"));
        let mut u = t.clone();
        u.extend(&t);
        assert_eq!(u.rows[4].iteration, 4);
    }

    #[test]
    fn gamma_schedules() {
        let g = GammaSchedule::Geometric { first: 1.0, ratio: 0.5 };
        assert_eq!(g.gamma(3), 0.125);
        assert!(GammaSchedule::Constant { gamma: -1.0 }.validate(2).is_err());
        let s: GammaSchedule = serde_json::from_str(r#"{"kind": "constant", "gamma": 0.3}"#).unwrap();
        assert_eq!(s.gamma(9), 0.3);
    }

    // One JKO step towards N(0, 1) from a Gaussian with mean μ moves the mean
    // to μ/(1 + γ).
    #[test]
    fn jko_step_matches_gaussian_prox_mean() {
        let base = AnalyticDensity::standard_normal(1).unwrap();
        let x = shifted_1d(3.0, 256, 11);
        let (m0, _) = mean_var(&x);
        let mut block = FlowBlock::init(&layout(1, 1).spec, 4, 1).unwrap();
        let cfg = TrainConfig {
            iterations: 300,
            learn_rate: 1e-2,
            ..quick(0)
        };
        let tr = train_jko_block(&mut block, &x, &base, &cfg).unwrap();
        let first = tr.rows[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(tr.tail_mean(20).unwrap() < first);
        let y = block.forward(&x).unwrap();
        let (m1, _) = mean_var(&y);
        assert!((m1 - m0 / 2.0).abs() < 0.15, "mean {m1} vs {}", m0 / 2.0);
    }

    #[test]
    fn progressive_training_freezes_earlier_blocks() {
        let base = AnalyticDensity::standard_normal(1).unwrap();
        let x = shifted_1d(2.0, 128, 5);
        let g = GammaSchedule::Constant { gamma: 1.0 };
        let one = progressive_jko(&x, base.clone(), &layout(1, 1), &g, &quick(15)).unwrap();
        let two = progressive_jko(&x, base, &layout(1, 2), &g, &quick(15)).unwrap();
        assert_eq!(two.particles.len(), 3);
        assert_eq!(two.traces.len(), 2);
        assert!(two.chain.blocks().iter().all(|b| b.trained));
        let pushed = two.chain.blocks()[0].forward(&x).unwrap();
        assert_eq!(pushed, two.particles[1]);
        assert_eq!(one.particles[0], x);
    }

    #[test]
    fn progressive_runs_are_deterministic() {
        let base = AnalyticDensity::standard_normal(1).unwrap();
        let x = shifted_1d(2.0, 128, 5);
        let g = GammaSchedule::Constant { gamma: 0.5 };
        let a = progressive_local_fm(&x, base.clone(), &layout(1, 2), &g, &quick(10)).unwrap();
        let b = progressive_local_fm(&x, base, &layout(1, 2), &g, &quick(10)).unwrap();
        for (p, q) in a.chain.blocks().iter().zip(b.chain.blocks()) {
            assert_eq!(p.field.checksum(), q.field.checksum());
        }
    }

    // Local FM over one OU step of length ln 2 from N(3, 1) lands on
    // N(1.5, 0.25 + 0.75) = N(1.5, 1).
    #[test]
    fn local_fm_block_reproduces_ou_step() {
        let x = shifted_1d(3.0, 512, 21);
        let mut block = FlowBlock::init(&layout(1, 1).spec, 8, 2).unwrap();
        let cfg = TrainConfig {
            iterations: 400,
            learn_rate: 1e-2,
            batch_size: 128,
            ..quick(0)
        };
        train_local_fm_block(&mut block, &x, 2f64.ln(), &cfg).unwrap();
        let (m0, v0) = mean_var(&x);
        let (m1, v1) = mean_var(&block.forward(&x).unwrap());
        assert!((m1 - 0.5 * m0).abs() < 0.15, "mean {m1}");
        assert!((v1 - (0.25 * v0 + 0.75)).abs() < 0.25, "var {v1}");
    }

    #[test]
    fn fm_chain_moves_data_towards_noise() {
        let base = AnalyticDensity::Gaussian(Gaussian::standard(1).unwrap());
        let x = shifted_1d(4.0, 256, 8);
        let cfg = TrainConfig {
            iterations: 300,
            learn_rate: 1e-2,
            ..quick(0)
        };
        let (chain, traces) =
            train_fm_chain(&x, base, &layout(1, 2), &FmOptions::default(), &cfg, &mut seeded(9)).unwrap();
        assert_eq!(traces.len(), 2);
        let z = chain.forward_map(&ParticleEnsemble::new(x).unwrap()).unwrap();
        let (m, v) = mean_var(z.points());
        assert!(m.abs() < 0.3 && (v - 1.0).abs() < 0.3, "mean {m} var {v}");
    }
}

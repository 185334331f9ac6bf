//! One runner per task; each writes its artifacts and returns the report body.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::json;

use wflow::datasets::{AnalyticDensity, Gaussian};
use wflow::flow::{load_checkpoint, save_checkpoint, FlowChain, ParticleEnsemble};
use wflow::metrics::{
    gauss_fid, gaussian_fit_kl, kl_from_terms, mmd_permutation_test, w2_exact, Bandwidth,
    MetricReport, MAX_ASSIGNMENT_SIZE,
};
use wflow::numcore::Tensor;
use wflow::objectives::{
    progressive_jko, progressive_local_fm, train_fm_chain, train_nll, ChainLayout, LossTrace,
};
use wflow::transport::{
    compare_dre, dre_grid, dro_train, ot_train, DescentGuard, DroConfig, GridSpec, Marginal, OtConfig,
};
use wflow::velocity::DivergenceEstimator;

use crate::config::{ExperimentConfig, Metric, Source, Task};
use crate::error::CliError;
use crate::output::{points_csv, OutputDir, Svg};

const TRAJECTORY_ROWS: usize = 100;

/// Everything that goes into `report.json` besides the config echo.
#[derive(Debug, Default, Serialize)]
pub struct RunSummary {
    pub metrics: Vec<MetricReport>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
    pub artifacts: Vec<String>,
    /// Wall-clock training time per block, kept out of the report.
    #[serde(skip)]
    pub block_wall_ms: Vec<f64>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a mut OutputDir,
    summary: RunSummary,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        self.out.write(name, contents)?;
        self.summary.artifacts.push(name.to_string());
        Ok(())
    }

    fn metric(&mut self, name: &str, value: f64, sizes: Vec<usize>, params: serde_json::Value) -> Result<&mut MetricReport, CliError> {
        let m = MetricReport::new(name, value, sizes, self.cfg.seed, params)?;
        self.summary.metrics.push(m);
        Ok(self.summary.metrics.last_mut().expect("pushed"))
    }

    fn save_chain(&mut self, chain: &FlowChain) -> Result<(), CliError> {
        let p = self.out.claim("chain.wflw");
        save_checkpoint(chain, &p)?;
        self.summary.artifacts.push("chain.wflw".into());
        Ok(())
    }

    fn save_traces(&mut self, traces: &[LossTrace]) -> Result<(), CliError> {
        let mut s = String::from("block,iteration,loss\n");
        for (b, t) in traces.iter().enumerate() {
            for r in &t.rows {
                s.push_str(&format!("{b},{},{:?}\n", r.iteration, r.loss));
            }
        }
        self.summary.block_wall_ms = traces.iter().map(|t| t.rows.iter().map(|r| r.wall_ms).sum()).collect();
        self.write("loss.csv", s)
    }

    fn scatter(&mut self, name: &str, title: &str, sets: &[(&Tensor, &str)]) -> Result<(), CliError> {
        if sets.iter().any(|(t, _)| t.cols() != 2) {
            return Ok(());
        }
        let all: Vec<&Tensor> = sets.iter().map(|(t, _)| *t).collect();
        let mut svg = Svg::covering(&all);
        for (t, color) in sets {
            svg.scatter(t, color);
        }
        self.write(name, svg.render(title))
    }
}

pub fn run(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunSummary, CliError> {
    let mut ctx = Ctx {
        cfg,
        out,
        summary: RunSummary::default(),
    };
    match cfg.task() {
        Task::TrainCnf => train_cnf(&mut ctx)?,
        Task::TrainJko | Task::TrainLfm => train_progressive(&mut ctx)?,
        Task::TrainFm => train_fm(&mut ctx)?,
        Task::Ot => ot(&mut ctx)?,
        Task::Dre => dre(&mut ctx)?,
        Task::Dro => dro(&mut ctx)?,
        Task::Eval => eval(&mut ctx)?,
        Task::Sample => sample(&mut ctx)?,
    }
    Ok(ctx.summary)
}

fn base_density(d: usize) -> Result<AnalyticDensity, CliError> {
    Ok(AnalyticDensity::standard_normal(d)?)
}

fn layout(cfg: &ExperimentConfig, d: usize) -> ChainLayout {
    ChainLayout {
        spec: cfg.model.field_spec(d),
        n_blocks: cfg.model.blocks,
        steps_per_block: cfg.model.steps,
        init_seed: cfg.model.init_seed,
    }
}

/// Log-density of held-out rows under the chain: `nll`, plus `kl_mc`
/// against the exact data density when known.
fn likelihood_metrics(ctx: &mut Ctx<'_>, chain: &FlowChain, held: &Source) -> Result<(), CliError> {
    let x = &held.samples;
    let est = DivergenceEstimator::default_for(x.cols());
    let lp = chain.log_density_batch(x, est, &mut ctx.cfg.rng(1))?;
    let nll = -lp.iter().sum::<f64>() / lp.len() as f64;
    ctx.metric("nll", nll, vec![x.rows()], json!({ "divergence": est }))?;
    if let Some(p) = &held.density {
        let terms: Vec<f64> = (0..x.rows()).map(|i| p.log_pdf(x.row(i)) - lp[i]).collect();
        let k = kl_from_terms(&terms)?;
        ctx.metric("kl_mc", k.value, vec![x.rows()], json!({ "divergence": est }))?
            .extra
            .insert("std_error".into(), k.std_error);
    }
    Ok(())
}

/// Checkpoint, held-out likelihood and generated samples of a trained chain.
fn finish_chain(ctx: &mut Ctx<'_>, chain: &FlowChain, data: &Tensor) -> Result<(), CliError> {
    ctx.save_chain(chain)?;
    let held = ctx.cfg.data()?.draw_n(ctx.cfg.eval.count, 1)?;
    likelihood_metrics(ctx, chain, &held)?;
    let generated = chain.sample(ctx.cfg.eval.count, &mut ctx.cfg.rng(0))?;
    ctx.write("samples.csv", points_csv(generated.points()))?;
    ctx.scatter("samples.svg", "data (blue) and generated samples (red)", &[(data, "#1f77b4"), (generated.points(), "#d62728")])
}

fn train_cnf(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let data = cfg.data()?.draw()?;
    let d = data.samples.cols();
    let mut chain = FlowChain::init(cfg.model.blocks, &cfg.model.field_spec(d), cfg.model.steps, base_density(d)?, cfg.model.init_seed)?;
    let trace = train_nll(&mut chain, &data.samples, &cfg.train)?;
    ctx.save_traces(&[trace])?;
    finish_chain(ctx, &chain, &data.samples)
}

fn train_progressive(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let data = cfg.data()?.draw()?;
    let d = data.samples.cols();
    let base = base_density(d)?;
    let lay = layout(cfg, d);
    let run = if cfg.task() == Task::TrainJko {
        progressive_jko(&data.samples, base, &lay, &cfg.schedule, &cfg.train)?
    } else {
        progressive_local_fm(&data.samples, base, &lay, &cfg.schedule, &cfg.train)?
    };
    let target = Gaussian::standard(d)?;
    let trace = run
        .particles
        .iter()
        .map(|p| gaussian_fit_kl(&ParticleEnsemble::new(p.clone())?, &target))
        .collect::<wflow::Result<Vec<f64>>>()?;
    let gammas: Vec<f64> = (0..cfg.model.blocks).map(|n| cfg.schedule.gamma(n)).collect();
    let last = *trace.last().expect("initial snapshot");
    let m = ctx.metric("kl_gaussian_fit", last, vec![data.samples.rows()], json!({ "target": "standard-gaussian" }))?;
    m.extra.insert("initial".into(), trace[0]);
    if trace.windows(2).any(|w| w[1] > w[0]) {
        m.flags.push("kl_trace_not_monotone".into());
    }
    ctx.summary.series.insert("kl_trace".into(), trace);
    ctx.summary.series.insert("gammas".into(), gammas);
    ctx.save_traces(&run.traces)?;
    if d == 2 {
        let first = &run.particles[0];
        let last = run.particles.last().expect("snapshot");
        let mut svg = Svg::covering(&run.particles.iter().collect::<Vec<_>>());
        svg.trajectories(&run.particles, TRAJECTORY_ROWS, "#555")
            .scatter(first, "#1f77b4")
            .scatter(last, "#d62728");
        ctx.write("trajectories.svg", svg.render("particles per block: data (blue) to noise (red)"))?;
    }
    finish_chain(ctx, &run.chain, &data.samples)
}

fn train_fm(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let data = cfg.data()?.draw()?;
    let d = data.samples.cols();
    let (chain, traces) = train_fm_chain(&data.samples, base_density(d)?, &layout(cfg, d), &cfg.fm, &cfg.train, &mut cfg.rng(2))?;
    ctx.save_traces(&traces)?;
    finish_chain(ctx, &chain, &data.samples)
}

fn marginal(s: Source) -> Marginal {
    match s.density {
        Some(d) => Marginal::analytic(d, s.samples),
        None => Marginal::empirical(s.samples),
    }
}

fn ot(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let p = cfg.data()?.draw()?;
    let q = cfg.target()?.draw()?;
    let d = p.samples.cols();
    let chain = FlowChain::init(cfg.model.blocks, &cfg.model.field_spec(d), cfg.model.steps, base_density(d)?, cfg.model.init_seed)?;
    let ot_cfg = OtConfig {
        train: cfg.train.clone(),
        ratio: cfg.ratio.clone(),
        refit_every: cfg.ot.refit_every,
    };
    let (x, y) = (p.samples.clone(), q.samples.clone());
    let r = ot_train(&marginal(p), &marginal(q), chain, cfg.ot.gamma, &ot_cfg)?;
    let sizes = vec![x.rows(), y.rows()];
    let params = json!({ "gamma": cfg.ot.gamma, "endpoint_mode": r.mode });
    ctx.metric("transport_cost", r.cost, sizes.clone(), params.clone())?;
    ctx.metric("kl_p", r.kl_p, sizes.clone(), params.clone())?;
    ctx.metric("kl_q", r.kl_q, sizes, params)?;
    ctx.save_traces(&[r.trace.clone()])?;
    ctx.save_chain(&r.chain)?;
    let ens = ParticleEnsemble::new(x.clone())?;
    let pushed = r.chain.forward_map(&ens)?;
    ctx.write("samples.csv", points_csv(pushed.points()))?;
    if d == 2 {
        let snaps = r.chain.forward_trajectory(&ens)?;
        let mut svg = Svg::covering(&[&x, &y, pushed.points()]);
        svg.scatter(&y, "#2ca02c")
            .trajectories(&snaps, TRAJECTORY_ROWS, "#555")
            .scatter(&x, "#1f77b4")
            .scatter(pushed.points(), "#d62728");
        ctx.write("transport.svg", svg.render("p (blue) pushed to F(p) (red) against q (green)"))?;
    }
    Ok(())
}

fn bounding_box(sets: &[&Tensor]) -> (Vec<f64>, Vec<f64>) {
    let d = sets[0].cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for t in sets {
        for i in 0..t.rows() {
            for j in 0..d {
                lo[j] = lo[j].min(t.get(i, j));
                hi[j] = hi[j].max(t.get(i, j));
            }
        }
    }
    (lo.iter().map(|v| v - 1.0).collect(), hi.iter().map(|v| v + 1.0).collect())
}

fn dre(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let ps = cfg.data()?.draw()?;
    let qs = cfg.target()?.draw()?;
    let need = |s: &Source, which: &str| {
        s.density
            .clone()
            .ok_or_else(|| CliError::config(format!("dre needs a [{which}] preset with an exact density")))
    };
    let (p, q) = (need(&ps, "data")?, need(&qs, "target")?);
    let (lo, hi) = bounding_box(&[&ps.samples, &qs.samples]);
    let spec = GridSpec {
        lower: cfg.dre.lower.clone().unwrap_or(lo),
        upper: cfg.dre.upper.clone().unwrap_or(hi),
        per_axis: cfg.dre.per_axis,
        min_density: cfg.dre.min_density,
    };
    let grid = dre_grid(&p, &q, &spec)?;
    if grid.rows() == 0 {
        return Err(CliError::config("no grid point clears dre.min_density"));
    }
    let c = compare_dre(&p, &q, cfg.data()?.count, &cfg.dre.gammas, &grid, &cfg.train, &mut cfg.rng(3))?;
    let (direct, tele) = c.mse().expect("analytic densities");
    let params = json!({ "grid": spec, "bridges": c.bridges, "bridge": c.bridge });
    let sizes = vec![cfg.data()?.count, grid.rows()];
    ctx.metric("mse_direct", direct, sizes.clone(), params.clone())?;
    ctx.metric("mse_telescopic", tele, sizes, params)?;
    let mut buf = Vec::new();
    c.write_csv(&mut buf)?;
    ctx.write("dre.csv", buf)?;
    ctx.scatter("samples.svg", "p (blue) and q (red) samples", &[(&ps.samples, "#1f77b4"), (&qs.samples, "#d62728")])
}

fn dro(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let data = cfg.data()?.draw()?;
    let x = &data.samples;
    let d = x.cols();
    let risk = cfg.dro.risk_function();
    let dro_cfg = DroConfig {
        train: cfg.train.clone(),
        hidden: cfg.model.hidden.clone(),
        steps: cfg.model.steps,
        init_seed: cfg.model.init_seed,
        guard: DescentGuard {
            window: cfg.dro.guard_window,
            min_drop: cfg.dro.guard_min_drop,
        },
    };
    let r = dro_train(&risk, x, cfg.dro.gamma, &dro_cfg)?;
    let before = risk.values(x)?;
    let before = before.iter().sum::<f64>() / before.len() as f64;
    let params = json!({ "gamma": cfg.dro.gamma, "risk": cfg.dro.risk });
    let sizes = vec![x.rows()];
    ctx.metric("risk", r.risk, sizes.clone(), params.clone())?.extra.insert("risk_before".into(), before);
    ctx.metric("movement", r.movement, sizes.clone(), params.clone())?;
    ctx.metric("objective", r.objective, sizes, params)?;
    ctx.save_traces(&[r.trace.clone()])?;
    ctx.save_chain(&FlowChain::new(vec![r.block.clone()], base_density(d)?)?)?;
    ctx.write("samples.csv", points_csv(&r.samples))?;
    ctx.scatter("samples.svg", "nominal (blue) and worst-case (red) samples", &[(x, "#1f77b4"), (&r.samples, "#d62728")])
}

fn head(t: &Tensor, n: usize) -> Tensor {
    t.select_rows(&(0..n.min(t.rows())).collect::<Vec<_>>())
}

/// Sample-based metrics between two point sets.
fn two_sample_metrics(ctx: &mut Ctx<'_>, a: &Tensor, b: &Tensor, metrics: &[Metric]) -> Result<(), CliError> {
    let sizes = vec![a.rows(), b.rows()];
    for m in metrics {
        match m {
            Metric::Mmd => {
                let perms = ctx.cfg.eval.permutations;
                let t = mmd_permutation_test(a, b, Bandwidth::Median, perms, &mut ctx.cfg.rng(4))?;
                let q99 = t.quantile(0.99);
                let r = ctx.metric("mmd2", t.statistic.mmd2, sizes.clone(), json!({ "bandwidth": "median", "permutations": perms }))?;
                r.extra.insert("bandwidth".into(), t.statistic.bandwidth);
                r.extra.insert("p_value".into(), t.p_value);
                r.extra.insert("null_q99".into(), q99);
            }
            Metric::Fid => {
                let f = gauss_fid(a, b)?;
                let r = ctx.metric("fid", f.value, sizes.clone(), json!({}))?;
                if f.clamped {
                    r.flags.push("covariance_clamped".into());
                }
            }
            Metric::W2 => {
                let (a, b) = (head(a, MAX_ASSIGNMENT_SIZE), head(b, MAX_ASSIGNMENT_SIZE));
                let n = a.rows().min(b.rows());
                let v = w2_exact(&head(&a, n), &head(&b, n))?;
                ctx.metric("w2", v, vec![n, n], json!({}))?;
            }
            Metric::Nll | Metric::KlMc => {}
        }
    }
    Ok(())
}

fn eval(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let metrics = cfg.eval.metrics.clone();
    let p = cfg.data()?.draw()?;
    let x = p.samples.clone();
    if let Some(path) = &cfg.eval.checkpoint {
        let chain = load_checkpoint(path)?;
        if metrics.iter().any(|m| matches!(m, Metric::Nll | Metric::KlMc)) {
            likelihood_metrics(ctx, &chain, &p)?;
            if !metrics.contains(&Metric::KlMc) {
                ctx.summary.metrics.retain(|m| m.name != "kl_mc");
            }
            if !metrics.contains(&Metric::Nll) {
                ctx.summary.metrics.retain(|m| m.name != "nll");
            }
        }
        let generated = chain.sample(cfg.eval.count, &mut cfg.rng(0))?;
        return two_sample_metrics(ctx, &x, generated.points(), &metrics);
    }
    let q = cfg.target()?.draw()?;
    for m in &metrics {
        match m {
            Metric::Nll => {
                let qd = q.density.as_ref().ok_or_else(|| CliError::config("nll needs a [target] density"))?;
                let v = -(0..x.rows()).map(|i| qd.log_pdf(x.row(i))).sum::<f64>() / x.rows() as f64;
                ctx.metric("nll", v, vec![x.rows()], json!({ "model": "target" }))?;
            }
            Metric::KlMc => {
                let (Some(pd), Some(qd)) = (&p.density, &q.density) else {
                    return Err(CliError::config("kl_mc needs exact densities for [data] and [target]"));
                };
                let terms: Vec<f64> = (0..x.rows()).map(|i| pd.log_pdf(x.row(i)) - qd.log_pdf(x.row(i))).collect();
                let k = kl_from_terms(&terms)?;
                ctx.metric("kl_mc", k.value, vec![x.rows()], json!({}))?
                    .extra
                    .insert("std_error".into(), k.std_error);
            }
            _ => {}
        }
    }
    two_sample_metrics(ctx, &x, &q.samples, &metrics)
}

fn sample(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let s = cfg.sample.as_ref().ok_or_else(|| CliError::config("missing [sample] section"))?;
    let chain = load_checkpoint(&s.checkpoint)?;
    let generated = chain.sample(s.count, &mut cfg.rng(0))?;
    ctx.write("samples.csv", points_csv(generated.points()))?;
    ctx.scatter("samples.svg", "generated samples", &[(generated.points(), "#d62728")])
}

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::datasets::{AnalyticDensity, Gaussian, Mixture};
use crate::flow::{FlowChain, ParticleEnsemble};
use crate::numcore::Tensor;
use crate::objectives::{make_local_fm_targets, TrainConfig};
use crate::rng::Rng;
use crate::{Error, Result};

use super::ratio::{fit_logistic_ratio, RatioModel};

/// How the intermediate ensembles of a telescope were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeKind {
    Direct,
    OuBridge,
    Flow,
}

#[derive(Clone, Debug)]
pub struct TelescopeEstimate {
    /// `Σ_n φ_n(x)` per query row.
    pub total: Vec<f64>,
    /// `φ_n(x)` per bridge.
    pub terms: Vec<Vec<f64>>,
    pub models: Vec<RatioModel>,
}

/// Row-wise sum of per-bridge log-ratios.
pub fn telescope_sum(terms: &[Vec<f64>]) -> Vec<f64> {
    let n = terms.first().map_or(0, Vec::len);
    let mut total = vec![0.0; n];
    for t in terms {
        for (s, v) in total.iter_mut().zip(t) {
            *s += v;
        }
    }
    total
}

/// `log q(x)/p(x) ≈ Σ_n φ_n(x)` where `φ_n` is the logistic ratio fitted
/// between `path[n]` and `path[n+1]`, `path[0] ~ p` and `path[N] ~ q`.
pub fn telescopic_log_ratio(path: &[ParticleEnsemble], x: &Tensor, cfg: &TrainConfig) -> Result<TelescopeEstimate> {
    if path.len() < 2 {
        return Err(Error::invalid(format!("a telescope needs at least 2 ensembles, got {}", path.len())));
    }
    let mut models = Vec::with_capacity(path.len() - 1);
    let mut terms = Vec::with_capacity(path.len() - 1);
    for (n, pair) in path.windows(2).enumerate() {
        let c = TrainConfig {
            seed: cfg.seed.wrapping_add(n as u64),
            ..cfg.clone()
        };
        let mut m = fit_logistic_ratio(pair[0].points(), pair[1].points(), &c)?;
        m.step = Some(n);
        terms.push(m.log_ratio(x)?);
        models.push(m);
    }
    Ok(TelescopeEstimate {
        total: telescope_sum(&terms),
        terms,
        models,
    })
}

/// `[p, OU_{γ₁}(p), …, OU_{Σγ}(p), OU_{Σγ}(q), …, OU_{γ₁}(q), q]`: both ends
/// are diffused towards `N(0, I)` and the two arms meet in the middle.
pub fn ou_bridge_path(
    p: &ParticleEnsemble,
    q: &ParticleEnsemble,
    gammas: &[f64],
    rng: &mut Rng,
) -> Result<Vec<ParticleEnsemble>> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let arm = |start: &ParticleEnsemble, rng: &mut Rng| -> Result<Vec<ParticleEnsemble>> {
        let mut out = vec![start.clone()];
        for &g in gammas {
            let next = make_local_fm_targets(out.last().expect("non-empty").points(), g, rng)?;
            out.push(ParticleEnsemble::new(next)?);
        }
        Ok(out)
    };
    let mut path = arm(p, rng)?;
    let mut back = arm(q, rng)?;
    back.reverse();
    path.extend(back);
    Ok(path)
}

/// Like [`ou_bridge_path`] with the arms produced by trained chains that
/// carry `p` and `q` towards a common base.
pub fn flow_bridge_path(
    chain_p: &FlowChain,
    p: &ParticleEnsemble,
    chain_q: &FlowChain,
    q: &ParticleEnsemble,
) -> Result<Vec<ParticleEnsemble>> {
    let to_ens = |v: Vec<Tensor>| v.into_iter().map(ParticleEnsemble::new).collect::<Result<Vec<_>>>();
    let mut path = to_ens(chain_p.forward_trajectory(p)?)?;
    let mut back = to_ens(chain_q.forward_trajectory(q)?)?;
    back.reverse();
    path.extend(back);
    Ok(path)
}

fn ou_gaussian(g: &Gaussian, t: f64) -> Result<Gaussian> {
    let a = (-t).exp();
    let d = g.dim();
    let cov = g.cov();
    let mut c = cov.map(|v| a * a * v);
    for j in 0..d {
        c.data_mut()[j * d + j] += 1.0 - a * a;
    }
    Gaussian::new(g.mean().iter().map(|m| a * m).collect(), c)
}

/// Law of the OU process `dX = −X dt + √2 dW` after time `t` started from
/// `density` (closed form for Gaussians and mixtures).
pub fn ou_evolve_density(density: &AnalyticDensity, t: f64) -> Result<AnalyticDensity> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("OU time {t} must be non-negative")));
    }
    Ok(match density {
        AnalyticDensity::Gaussian(g) => AnalyticDensity::Gaussian(ou_gaussian(g, t)?),
        AnalyticDensity::Mixture(m) => AnalyticDensity::Mixture(Mixture::new(
            m.weights().to_vec(),
            m.components().iter().map(|g| ou_gaussian(g, t)).collect::<Result<Vec<_>>>()?,
        )?),
    })
}

/// Densities matching [`ou_bridge_path`] element by element.
pub fn ou_bridge_densities(p: &AnalyticDensity, q: &AnalyticDensity, gammas: &[f64]) -> Result<Vec<AnalyticDensity>> {
    let arm = |d: &AnalyticDensity| -> Result<Vec<AnalyticDensity>> {
        let mut t = 0.0;
        let mut out = vec![d.clone()];
        for &g in gammas {
            t += g;
            out.push(ou_evolve_density(d, t)?);
        }
        Ok(out)
    };
    let mut all = arm(p)?;
    let mut back = arm(q)?;
    back.reverse();
    all.extend(back);
    Ok(all)
}

/// Axis-aligned evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub per_axis: usize,
    /// Keep only points where `max(p, q)` is at least this density.
    pub min_density: f64,
}

/// Grid points inside the box where either density reaches
/// `spec.min_density`.
pub fn dre_grid(p: &AnalyticDensity, q: &AnalyticDensity, spec: &GridSpec) -> Result<Tensor> {
    let d = spec.lower.len();
    if d == 0 || spec.upper.len() != d || p.dim() != d || q.dim() != d || spec.per_axis < 2 {
        return Err(Error::invalid("grid bounds must match the density dimension"));
    }
    let k = spec.per_axis;
    let total = k.pow(d as u32);
    let log_min = spec.min_density.ln();
    let mut data = Vec::new();
    let mut point = vec![0.0; d];
    for idx in 0..total {
        let mut r = idx;
        for j in 0..d {
            let i = r % k;
            r /= k;
            point[j] = spec.lower[j] + (spec.upper[j] - spec.lower[j]) * i as f64 / (k - 1) as f64;
        }
        if p.log_pdf(&point).max(q.log_pdf(&point)) >= log_min {
            data.extend_from_slice(&point);
        }
    }
    let rows = data.len() / d;
    if rows == 0 {
        return Err(Error::invalid("no grid point reaches the density threshold"));
    }
    Ok(Tensor::matrix(rows, d, data)?)
}

pub fn mse(estimate: &[f64], truth: &[f64]) -> f64 {
    estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len().max(1) as f64
}

/// Direct and telescopic estimates on a shared grid.
#[derive(Clone, Debug)]
pub struct DreComparison {
    pub grid: Tensor,
    pub analytic: Option<Vec<f64>>,
    pub direct: Vec<f64>,
    pub telescopic: Vec<f64>,
    pub bridge: BridgeKind,
    pub bridges: usize,
}

impl DreComparison {
    /// `(direct, telescopic)` mean squared errors against the analytic ratio.
    pub fn mse(&self) -> Option<(f64, f64)> {
        let a = self.analytic.as_ref()?;
        Some((mse(&self.direct, a), mse(&self.telescopic, a)))
    }

    /// Columns `x_0 … x_{d−1}, analytic, direct, telescopic`; `analytic` is
    /// empty when unknown.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.grid.cols();
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.extend(["analytic", "direct", "telescopic"].map(String::from));
        out.write_record(&header)?;
        for i in 0..self.grid.rows() {
            let mut rec: Vec<String> = self.grid.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.analytic.as_ref().map_or(String::new(), |a| format!("{:?}", a[i])));
            rec.push(format!("{:?}", self.direct[i]));
            rec.push(format!("{:?}", self.telescopic[i]));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Samples `m` points from each density, fits the direct classifier and the
/// OU-bridge telescope, and evaluates both on `grid`.
pub fn compare_dre(
    p: &AnalyticDensity,
    q: &AnalyticDensity,
    m: usize,
    gammas: &[f64],
    grid: &Tensor,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<DreComparison> {
    let ps = ParticleEnsemble::new(p.sample(rng, m))?;
    let qs = ParticleEnsemble::new(q.sample(rng, m))?;
    let direct = fit_logistic_ratio(ps.points(), qs.points(), cfg)?.log_ratio(grid)?;
    let path = ou_bridge_path(&ps, &qs, gammas, rng)?;
    let tele = telescopic_log_ratio(&path, grid, cfg)?;
    let analytic = (0..grid.rows())
        .map(|i| q.log_pdf(grid.row(i)) - p.log_pdf(grid.row(i)))
        .collect();
    Ok(DreComparison {
        grid: grid.clone(),
        analytic: Some(analytic),
        direct,
        telescopic: tele.total,
        bridge: BridgeKind::OuBridge,
        bridges: path.len() - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{fig10_p, fig10_q};
    use crate::rng::{normal_tensor, seeded};

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            learn_rate: 1e-2,
            batch_size: 256,
            iterations,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn short_path_is_rejected() {
        let e = ParticleEnsemble::new(normal_tensor(&mut seeded(0), 8, 1)).unwrap();
        assert!(telescopic_log_ratio(&[e], &Tensor::zeros(&[1, 1]), &quick(1)).is_err());
    }

    #[test]
    fn one_term_telescope_is_the_direct_fit() {
        let a = ParticleEnsemble::new(normal_tensor(&mut seeded(1), 300, 1)).unwrap();
        let b = ParticleEnsemble::new(normal_tensor(&mut seeded(2), 300, 1).map(|v| v + 1.0)).unwrap();
        let x = Tensor::matrix(3, 1, vec![-1.0, 0.0, 1.0]).unwrap();
        let t = telescopic_log_ratio(&[a.clone(), b.clone()], &x, &quick(50)).unwrap();
        let mut c = quick(50);
        c.seed = 4;
        let d = fit_logistic_ratio(a.points(), b.points(), &c).unwrap().log_ratio(&x).unwrap();
        assert_eq!(t.total, d);
    }

    #[test]
    fn identical_path_estimates_zero() {
        let all = normal_tensor(&mut seeded(3), 3000, 1);
        let path: Vec<ParticleEnsemble> = (0..3)
            .map(|k| ParticleEnsemble::new(all.select_rows(&((k * 1000)..((k + 1) * 1000)).collect::<Vec<_>>())).unwrap())
            .collect();
        let x = Tensor::matrix(5, 1, vec![-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let t = telescopic_log_ratio(&path, &x, &quick(300)).unwrap();
        assert!(t.total.iter().all(|v| v.abs() < 0.25), "{:?}", t.total);
    }

    // Exact per-bridge log-ratios telescope to log q − log p.
    #[test]
    fn analytic_bridges_telescope_exactly() {
        let (p, q) = (fig10_p(), fig10_q());
        let dens = ou_bridge_densities(&p, &q, &[0.2, 0.5, 1.0]).unwrap();
        let x = normal_tensor(&mut seeded(5), 50, 2);
        let terms: Vec<Vec<f64>> = dens
            .windows(2)
            .map(|w| (0..x.rows()).map(|i| w[1].log_pdf(x.row(i)) - w[0].log_pdf(x.row(i))).collect())
            .collect();
        let total = telescope_sum(&terms);
        for (i, t) in total.iter().enumerate() {
            let want = q.log_pdf(x.row(i)) - p.log_pdf(x.row(i));
            assert!((t - want).abs() <= 1e-12 * (1.0 + want.abs()), "{t} vs {want}");
        }
    }

    #[test]
    fn ou_density_matches_sampled_bridge() {
        let g = AnalyticDensity::Gaussian(Gaussian::isotropic(vec![3.0, -2.0], 0.25).unwrap());
        let e = ParticleEnsemble::new(g.sample(&mut seeded(6), 20_000)).unwrap();
        let path = ou_bridge_path(&e, &e, &[0.3, 0.7], &mut seeded(7)).unwrap();
        assert_eq!(path.len(), 6);
        let (mean, cov) = ou_evolve_density(&g, 1.0).unwrap().moments();
        let got = path[2].mean();
        for j in 0..2 {
            assert!((got[j] - mean[j]).abs() < 0.03);
        }
        let c = path[2].covariance();
        assert!(c.zip_map(&cov, |a, b| a - b).max_abs() < 0.05);
    }

    #[test]
    fn grid_is_thresholded() {
        let (p, q) = (fig10_p(), fig10_q());
        let spec = GridSpec {
            lower: vec![-5.0, -5.0],
            upper: vec![3.0, 4.0],
            per_axis: 21,
            min_density: 1e-3,
        };
        let g = dre_grid(&p, &q, &spec).unwrap();
        assert!(g.rows() > 20 && g.rows() < 441);
        for i in 0..g.rows() {
            assert!(p.log_pdf(g.row(i)).max(q.log_pdf(g.row(i))) >= 1e-3f64.ln());
        }
    }
}

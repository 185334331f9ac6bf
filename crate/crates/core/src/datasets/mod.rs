//! Analytic densities, synthetic 2D samplers and ensemble CSV files.

mod density;

pub use density::{log_sum_exp, AnalyticDensity, DensitySpec, Gaussian, GaussianSpec, Mixture};

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::flow::ParticleEnsemble;
use crate::numcore::Tensor;
use crate::rng::{normal_tensor, Rng};
use crate::{Error, Result};

pub const PRESETS: [&str; 6] = [
    "standard-gaussian",
    "fig10-p",
    "fig10-q",
    "two-moons",
    "checkerboard",
    "branch-tree",
];

/// Where a dataset comes from: a named preset or inline mixture parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub density: Option<DensitySpec>,
    /// Dimension for `standard-gaussian`.
    #[serde(default)]
    pub dim: Option<usize>,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn preset(name: &str, count: usize, seed: u64) -> Self {
        Self {
            preset: Some(name.to_string()),
            density: None,
            dim: None,
            count,
            seed,
        }
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.dim = Some(d);
        self
    }
}

/// A resolved data source.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Density(AnalyticDensity),
    TwoMoons { noise: f64 },
    /// Uniform on the 8 dark cells of a 4×4 board over `[−2, 2]²`.
    Checkerboard,
}

impl Dataset {
    pub fn from_spec(spec: &DatasetSpec) -> Result<Self> {
        match (&spec.preset, &spec.density) {
            (Some(_), Some(_)) => Err(Error::invalid(
                "give either a dataset preset or inline density parameters, not both",
            )),
            (None, None) => Err(Error::invalid("dataset needs a preset or a density")),
            (None, Some(d)) => Ok(Dataset::Density(AnalyticDensity::try_from(d.clone())?)),
            (Some(name), None) => Self::preset(name, spec.dim.unwrap_or(2)),
        }
    }

    pub fn preset(name: &str, dim: usize) -> Result<Self> {
        if name != "standard-gaussian" && dim != 2 {
            return Err(Error::invalid(format!("preset `{name}` is two-dimensional")));
        }
        Ok(match name {
            "standard-gaussian" => Dataset::Density(AnalyticDensity::standard_normal(dim)?),
            "fig10-p" => Dataset::Density(fig10_p()),
            "fig10-q" => Dataset::Density(fig10_q()),
            "two-moons" => Dataset::TwoMoons { noise: 0.1 },
            "checkerboard" => Dataset::Checkerboard,
            "branch-tree" => Dataset::Density(AnalyticDensity::Mixture(branch_tree())),
            other => return Err(Error::UnknownPreset(other.to_string())),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Dataset::Density(d) => d.dim(),
            _ => 2,
        }
    }

    pub fn density(&self) -> Option<&AnalyticDensity> {
        match self {
            Dataset::Density(d) => Some(d),
            _ => None,
        }
    }

    /// Exact log-density where one is available.
    pub fn log_pdf(&self, x: &[f64]) -> Option<f64> {
        match self {
            Dataset::Density(d) => Some(d.log_pdf(x)),
            Dataset::TwoMoons { .. } => None,
            Dataset::Checkerboard => Some(if checker_cell(x[0], x[1]) {
                -(8.0f64).ln()
            } else {
                f64::NEG_INFINITY
            }),
        }
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor {
        match self {
            Dataset::Density(d) => d.sample(rng, n),
            Dataset::TwoMoons { noise } => two_moons(rng, n, *noise),
            Dataset::Checkerboard => checkerboard(rng, n),
        }
    }
}

/// Draws `spec.count` particles; `rng` supplies all randomness.
pub fn sample_dataset(spec: &DatasetSpec, rng: &mut Rng) -> Result<ParticleEnsemble> {
    if spec.count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    let ds = Dataset::from_spec(spec)?;
    ParticleEnsemble::new(ds.sample(rng, spec.count))
}

pub fn fig10_p() -> AnalyticDensity {
    AnalyticDensity::Mixture(
        Mixture::isotropic(
            &[vec![-2.0, 2.0], vec![-1.5, 1.5], vec![-1.0, 1.0]],
            &[0.75, 0.25, 0.75],
        )
        .expect("valid preset"),
    )
}

pub fn fig10_q() -> AnalyticDensity {
    AnalyticDensity::Mixture(
        Mixture::isotropic(&[vec![0.75, -1.5], vec![-2.0, -3.0]], &[0.5, 0.5])
            .expect("valid preset"),
    )
}

/// Binary tree of line segments, each covered by small isotropic Gaussians.
/// The trunk runs from (0, −2) to (0, −0.8); every branch splits into two
/// children rotated by ±0.45 rad with length ×0.7, four levels deep.
pub fn branch_tree() -> Mixture {
    let mut means = Vec::new();
    let mut vars = Vec::new();
    let mut stack = vec![((0.0, -2.0), PI / 2.0, 1.2, 0usize)];
    while let Some(((x, y), angle, len, depth)) = stack.pop() {
        let (ex, ey) = (x + len * angle.cos(), y + len * angle.sin());
        let pieces = 4;
        for k in 0..pieces {
            let s = (k as f64 + 0.5) / pieces as f64;
            means.push(vec![x + s * (ex - x), y + s * (ey - y)]);
            vars.push((0.12 * len).powi(2));
        }
        if depth < 4 {
            for turn in [-0.45, 0.45] {
                stack.push(((ex, ey), angle + turn, 0.7 * len, depth + 1));
            }
        }
    }
    Mixture::isotropic(&means, &vars).expect("valid preset")
}

fn two_moons(rng: &mut Rng, n: usize, noise: f64) -> Tensor {
    let eps = normal_tensor(rng, n, 2);
    let mut out = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        let theta = rng.random_range(0.0..PI);
        let (x, y) = if rng.random::<bool>() {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        let r = out.row_mut(i);
        r[0] = x + noise * eps.get(i, 0);
        r[1] = y + noise * eps.get(i, 1);
    }
    out
}

fn checker_cell(x: f64, y: f64) -> bool {
    if !(-2.0..2.0).contains(&x) || !(-2.0..2.0).contains(&y) {
        return false;
    }
    (x.floor() as i64 + y.floor() as i64).rem_euclid(2) == 0
}

fn checkerboard(rng: &mut Rng, n: usize) -> Tensor {
    let mut out = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        let x: f64 = rng.random_range(-2.0..2.0);
        let row = rng.random_range(0..2) as f64;
        let parity = x.floor().rem_euclid(2.0);
        // dark cells have floor(x) + floor(y) even
        let y = -2.0 + 2.0 * row + parity + rng.random::<f64>();
        let r = out.row_mut(i);
        r[0] = x;
        r[1] = y;
    }
    out
}

/// Writes one particle per row, no header.
pub fn write_csv(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for i in 0..x.rows() {
        w.write_record(x.row(i).iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::invalid(format!("row {}: `{f}` is not a number", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::invalid("empty ensemble file"));
    }
    Ok(Tensor::from_rows(&rows)?)
}

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numcore::{Tape, Tensor, Var};
use crate::rng::{normal_tensor, Rng};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(μ, Σ)` with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    chol_inv: DMatrix<f64>,
    log_norm: f64,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Tensor) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("Gaussian needs dimension ≥ 1"));
        }
        if cov.shape() != [d, d] {
            return Err(Error::invalid(format!(
                "covariance shape {:?} does not match mean length {d}",
                cov.shape()
            )));
        }
        if mean.iter().chain(cov.data()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        let cov = DMatrix::from_row_slice(d, d, cov.data());
        if (&cov - cov.transpose()).amax() > 1e-12 * (1.0 + cov.amax()) {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?
            .l();
        let chol_inv = chol
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::invalid("singular Cholesky factor"))?;
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            chol_inv,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, Tensor::eye(d).map(|v| v * var))
    }

    pub fn standard(d: usize) -> Result<Self> {
        Self::isotropic(vec![0.0; d], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> Tensor {
        let d = self.dim();
        Tensor::matrix(d, d, self.cov.transpose().as_slice().to_vec()).expect("shape")
    }

    /// `log det Σ`.
    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.dim() as f64 * LN_2PI
    }

    /// Closed-form `KL(self ‖ other)`.
    pub fn kl_to(&self, other: &Gaussian) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                expected: other.dim(),
                got: self.dim(),
            });
        }
        let d = self.dim() as f64;
        // tr(Σ₁⁻¹Σ₀) = ‖L₁⁻¹ L₀‖²_F
        let trace = (&other.chol_inv * &self.chol).norm_squared();
        let quad = 2.0 * other.quadratic(&self.mean);
        Ok(0.5 * (trace + quad - d + other.log_det() - self.log_det()))
    }

    fn whiten(&self, x: &[f64]) -> DVector<f64> {
        let r = DVector::from_iterator(self.dim(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        &self.chol_inv * r
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.whiten(x).norm_squared()
    }

    /// `½ (x−μ)ᵀ Σ⁻¹ (x−μ)`.
    pub fn quadratic(&self, x: &[f64]) -> f64 {
        0.5 * self.whiten(x).norm_squared()
    }

    /// `∇ log p(x) = −Σ⁻¹ (x − μ)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let z = self.whiten(x);
        (-(self.chol_inv.transpose() * z)).as_slice().to_vec()
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor {
        let d = self.dim();
        let mut z = normal_tensor(rng, n, d);
        for i in 0..n {
            let zi = DVector::from_row_slice(z.row(i));
            let x = &self.chol * zi;
            for (j, out) in z.row_mut(i).iter_mut().enumerate() {
                *out = x[j] + self.mean[j];
            }
        }
        z
    }

    /// One draw written into `out`.
    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let z = normal_tensor(rng, 1, self.dim());
        let x = &self.chol * DVector::from_row_slice(z.data());
        for (j, o) in out.iter_mut().enumerate() {
            *o = x[j] + self.mean[j];
        }
    }

    fn whiten_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = self.dim();
        let w = Tensor::matrix(d, d, self.chol_inv.transpose().as_slice().to_vec())?;
        let shift: Vec<f64> = (-(&self.chol_inv * DVector::from_column_slice(&self.mean)))
            .as_slice()
            .to_vec();
        let w = tape.constant(w);
        let b = tape.constant(Tensor::vector(shift));
        let z = tape.affine(x, w, b)?;
        let sq = tape.square(z)?;
        Ok(tape.row_sum(sq)?)
    }

    /// Row-wise `½ (x−μ)ᵀ Σ⁻¹ (x−μ)` as an `m × 1` node.
    pub fn quadratic_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let q = self.whiten_on_tape(tape, x)?;
        Ok(tape.scale(q, 0.5)?)
    }

    /// Row-wise log-density as an `m × 1` node.
    pub fn log_pdf_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let q = self.whiten_on_tape(tape, x)?;
        Ok(tape.scale_shift(q, -0.5, self.log_norm)?)
    }
}

/// Finite Gaussian mixture `Σ w_k N(μ_k, Σ_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("mixture components differ in dimension"));
        }
        Ok(Self { weights, components })
    }

    /// Equal-weight isotropic mixture.
    pub fn isotropic(means: &[Vec<f64>], vars: &[f64]) -> Result<Self> {
        let k = means.len();
        let comps = means
            .iter()
            .zip(vars)
            .map(|(m, &v)| Gaussian::isotropic(m.clone(), v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(vec![1.0 / k as f64; k], comps)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    fn component_logs(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_pdf(x))
            .collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_logs(x))
    }

    /// Posterior-weighted component scores.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_logs(x);
        let lse = log_sum_exp(&logs);
        let mut s = vec![0.0; self.dim()];
        for (l, c) in logs.iter().zip(&self.components) {
            let r = (l - lse).exp();
            for (o, g) in s.iter_mut().zip(c.score(x)) {
                *o += r * g;
            }
        }
        s
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor {
        let d = self.dim();
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            self.components[k].sample_into(rng, out.row_mut(i));
        }
        out
    }

    /// Row-wise log-density as an `m × 1` node, stabilised by the per-row
    /// maximum (held constant; the gradient does not depend on it).
    pub fn log_pdf_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let logs = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| {
                let l = c.log_pdf_on_tape(tape, x)?;
                Ok(tape.scale_shift(l, 1.0, w.ln())?)
            })
            .collect::<Result<Vec<Var>>>()?;
        let m = tape.value(logs[0]).rows();
        let shift: Vec<f64> = (0..m)
            .map(|i| {
                logs.iter()
                    .map(|&l| tape.value(l).data()[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let c = tape.constant(Tensor::matrix(m, 1, shift)?);
        let mut total: Option<Var> = None;
        for l in logs {
            let centred = tape.sub(l, c)?;
            let e = tape.exp(centred)?;
            total = Some(match total {
                Some(t) => tape.add(t, e)?,
                None => e,
            });
        }
        let lg = tape.log(total.expect("non-empty"))?;
        Ok(tape.add(lg, c)?)
    }
}

/// Stable `log Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A density with exact log-pdf and sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensitySpec", into = "DensitySpec")]
pub enum AnalyticDensity {
    Gaussian(Gaussian),
    Mixture(Mixture),
}

impl AnalyticDensity {
    pub fn standard_normal(d: usize) -> Result<Self> {
        Ok(Self::Gaussian(Gaussian::standard(d)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.dim(),
            Self::Mixture(m) => m.dim(),
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            Self::Gaussian(g) => g.log_pdf(x),
            Self::Mixture(m) => m.log_pdf(x),
        }
    }

    pub fn log_pdf_rows(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|i| self.log_pdf(x.row(i))).collect()
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Gaussian(g) => g.score(x),
            Self::Mixture(m) => m.score(x),
        }
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor {
        match self {
            Self::Gaussian(g) => g.sample(rng, n),
            Self::Mixture(m) => m.sample(rng, n),
        }
    }

    /// `m × 1` log-density node.
    pub fn log_pdf_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::Gaussian(g) => g.log_pdf_on_tape(tape, x),
            Self::Mixture(m) => m.log_pdf_on_tape(tape, x),
        }
    }

    /// Potential `V` with `q ∝ e^{−V}`: the quadratic form for a Gaussian,
    /// `−log q` for a mixture. Returned as an `m × 1` node.
    pub fn potential_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Self::Gaussian(g) => g.quadratic_on_tape(tape, x),
            Self::Mixture(m) => {
                let l = m.log_pdf_on_tape(tape, x)?;
                Ok(tape.scale(l, -1.0)?)
            }
        }
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        match self {
            Self::Gaussian(g) => g.quadratic(x),
            Self::Mixture(m) => -m.log_pdf(x),
        }
    }

    /// First and second moments `(μ, Σ)`.
    pub fn moments(&self) -> (Vec<f64>, Tensor) {
        match self {
            Self::Gaussian(g) => (g.mean().to_vec(), g.cov()),
            Self::Mixture(m) => {
                let d = m.dim();
                let mut mean = vec![0.0; d];
                let mut second = Tensor::zeros(&[d, d]);
                for (w, c) in m.weights.iter().zip(&m.components) {
                    let cov = c.cov();
                    for i in 0..d {
                        mean[i] += w * c.mean[i];
                        for j in 0..d {
                            second.data_mut()[i * d + j] +=
                                w * (cov.get(i, j) + c.mean[i] * c.mean[j]);
                        }
                    }
                }
                for i in 0..d {
                    for j in 0..d {
                        second.data_mut()[i * d + j] -= mean[i] * mean[j];
                    }
                }
                (mean, second)
            }
        }
    }
}

/// Serialised form of a Gaussian: mean and row-major covariance rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DensitySpec {
    Gaussian(GaussianSpec),
    Mixture {
        weights: Vec<f64>,
        components: Vec<GaussianSpec>,
    },
}

impl GaussianSpec {
    fn build(&self) -> Result<Gaussian> {
        Gaussian::new(self.mean.clone(), Tensor::from_rows(&self.cov)?)
    }

    fn of(g: &Gaussian) -> Self {
        let cov = g.cov();
        Self {
            mean: g.mean.clone(),
            cov: (0..g.dim()).map(|i| cov.row(i).to_vec()).collect(),
        }
    }
}

impl TryFrom<DensitySpec> for AnalyticDensity {
    type Error = Error;

    fn try_from(spec: DensitySpec) -> Result<Self> {
        match spec {
            DensitySpec::Gaussian(g) => Ok(Self::Gaussian(g.build()?)),
            DensitySpec::Mixture { weights, components } => {
                let comps = components.iter().map(GaussianSpec::build).collect::<Result<_>>()?;
                Ok(Self::Mixture(Mixture::new(weights, comps)?))
            }
        }
    }
}

impl From<AnalyticDensity> for DensitySpec {
    fn from(d: AnalyticDensity) -> Self {
        match d {
            AnalyticDensity::Gaussian(g) => DensitySpec::Gaussian(GaussianSpec::of(&g)),
            AnalyticDensity::Mixture(m) => DensitySpec::Mixture {
                weights: m.weights.clone(),
                components: m.components.iter().map(GaussianSpec::of).collect(),
            },
        }
    }
}

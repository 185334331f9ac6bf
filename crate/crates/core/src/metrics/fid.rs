use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::flow::ParticleEnsemble;
use crate::numcore::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FidResult {
    pub value: f64,
    /// Set when a covariance or the matrix under the square root had
    /// eigenvalues at or below zero that were clamped.
    pub clamped: bool,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn clamp_tol(vals: &[f64]) -> f64 {
    1e-12 * vals.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Principal square root of a symmetric PSD matrix.
fn sqrt_psd(m: DMatrix<f64>, clamped: &mut bool) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let tol = clamp_tol(eig.eigenvalues.as_slice());
    let roots = eig.eigenvalues.map(|l| {
        if l <= tol {
            *clamped = true;
        }
        l.max(0.0).sqrt()
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians with the sample moments of `a` and `b`:
/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2 (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn gauss_fid(a: &Tensor, b: &Tensor) -> Result<FidResult> {
    let d = a.cols();
    if b.cols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: b.cols(),
        });
    }
    if a.rows() < d + 1 || b.rows() < d + 1 {
        return Err(Error::invalid(format!(
            "FID needs at least d + 1 = {} points per ensemble",
            d + 1
        )));
    }
    let ea = ParticleEnsemble::new(a.clone())?;
    let eb = ParticleEnsemble::new(b.clone())?;
    let (ma, mb) = (ea.mean(), eb.mean());
    let (ca, cb) = (to_matrix(&ea.covariance()), to_matrix(&eb.covariance()));
    gauss_fid_moments(&ma, &ca, &mb, &cb)
}

/// Fréchet distance from explicit moments.
pub fn gauss_fid_moments(
    ma: &[f64],
    ca: &DMatrix<f64>,
    mb: &[f64],
    cb: &DMatrix<f64>,
) -> Result<FidResult> {
    let mut clamped = false;
    let sa = sqrt_psd(ca.clone(), &mut clamped);
    let inner = &sa * cb * &sa;
    let inner = 0.5 * (&inner + inner.transpose());
    let eig = SymmetricEigen::new(inner);
    let tol = clamp_tol(eig.eigenvalues.as_slice());
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < -tol {
                clamped = true;
            }
            l.max(0.0).sqrt()
        })
        .sum();
    let dm: f64 = ma.iter().zip(mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let value = dm + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::NonFinite("FID".into()));
    }
    Ok(FidResult {
        value: value.max(0.0),
        clamped,
    })
}

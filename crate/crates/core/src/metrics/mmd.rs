use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::rng::{shuffle, Rng};
use crate::{Error, Result};

pub const FALLBACK_BANDWIDTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled sample.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MmdResult {
    /// Unbiased `MMD²` (may be slightly negative).
    pub mmd2: f64,
    pub bandwidth: f64,
    /// The median distance was zero and the fallback bandwidth was used.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationTest {
    pub statistic: MmdResult,
    pub null: Vec<f64>,
    pub null_mean: f64,
    pub null_sd: f64,
    /// `(1 + #{null ≥ stat}) / (1 + permutations)`.
    pub p_value: f64,
}

impl PermutationTest {
    /// Empirical `q`-quantile of the null draws.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut s = self.null.clone();
        s.sort_by(f64::total_cmp);
        let k = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
        s[k]
    }

    pub fn rejects_at(&self, q: f64) -> bool {
        self.statistic.mmd2 > self.quantile(q)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            expected: a.cols(),
            got: b.cols(),
        });
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::invalid("MMD needs at least two points per sample"));
    }
    Ok(())
}

fn pooled<'a>(a: &'a Tensor, b: &'a Tensor) -> Vec<&'a [f64]> {
    (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect()
}

fn resolve(bw: Bandwidth, pts: &[&[f64]]) -> Result<(f64, bool)> {
    match bw {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok((s, false)),
        Bandwidth::Fixed(s) => Err(Error::invalid(format!("bandwidth {s} must be positive"))),
        Bandwidth::Median => {
            let n = pts.len();
            let mut d = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    d.push(sq_dist(pts[i], pts[j]));
                }
            }
            let mid = d.len() / 2;
            let (_, med, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
            let med = med.sqrt();
            if med > 0.0 {
                Ok((med, false))
            } else {
                Ok((FALLBACK_BANDWIDTH, true))
            }
        }
    }
}

fn kernel_matrix(pts: &[&[f64]], sigma: f64) -> Vec<f64> {
    let n = pts.len();
    let g = 1.0 / (2.0 * sigma * sigma);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (-g * sq_dist(pts[i], pts[j])).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Unbiased `MMD²` for the split `labels[i] = true` (first sample) vs false.
fn mmd2_split(k: &[f64], n: usize, labels: &[bool]) -> f64 {
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let v = k[i * n + j];
            match (labels[i], labels[j]) {
                (true, true) => xx += v,
                (false, false) => yy += v,
                _ => xy += v,
            }
        }
    }
    let m = labels.iter().filter(|&&l| l).count() as f64;
    let r = n as f64 - m;
    2.0 * xx / (m * (m - 1.0)) + 2.0 * yy / (r * (r - 1.0)) - 2.0 * xy / (m * r)
}

/// Unbiased RBF-kernel `MMD²` with `k(x, y) = exp(−‖x − y‖² / (2σ²))`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bw: Bandwidth) -> Result<MmdResult> {
    check(a, b)?;
    let pts = pooled(a, b);
    let (sigma, fallback) = resolve(bw, &pts)?;
    let k = kernel_matrix(&pts, sigma);
    let labels: Vec<bool> = (0..pts.len()).map(|i| i < a.rows()).collect();
    Ok(MmdResult {
        mmd2: mmd2_split(&k, pts.len(), &labels),
        bandwidth: sigma,
        fallback,
    })
}

/// `mmd_rbf` plus its permutation null: the pooled sample is relabelled
/// `permutations` times with the bandwidth held fixed.
pub fn mmd_permutation_test(
    a: &Tensor,
    b: &Tensor,
    bw: Bandwidth,
    permutations: usize,
    rng: &mut Rng,
) -> Result<PermutationTest> {
    check(a, b)?;
    if permutations == 0 {
        return Err(Error::invalid("need at least one permutation"));
    }
    let pts = pooled(a, b);
    let n = pts.len();
    let (sigma, fallback) = resolve(bw, &pts)?;
    let k = kernel_matrix(&pts, sigma);
    let mut labels: Vec<bool> = (0..n).map(|i| i < a.rows()).collect();
    let stat = mmd2_split(&k, n, &labels);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        shuffle(rng, &mut labels);
        null.push(mmd2_split(&k, n, &labels));
    }
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let var = null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (null.len().max(2) - 1) as f64;
    let exceed = null.iter().filter(|&&v| v >= stat).count();
    Ok(PermutationTest {
        statistic: MmdResult {
            mmd2: stat,
            bandwidth: sigma,
            fallback,
        },
        null_mean: mean,
        null_sd: var.sqrt(),
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        null,
    })
}

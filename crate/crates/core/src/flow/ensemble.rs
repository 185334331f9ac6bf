use crate::numcore::Tensor;
use crate::{Error, Result};

/// `m × d` particle positions with an optional per-particle log-density
/// accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    points: Tensor,
    logdet: Option<Vec<f64>>,
}

impl ParticleEnsemble {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.rank() != 2 || points.rows() == 0 || points.cols() == 0 {
            return Err(Error::invalid(format!(
                "an ensemble needs an m × d array with m, d ≥ 1, got shape {:?}",
                points.shape()
            )));
        }
        if !points.all_finite() {
            return Err(Error::NonFinite("ensemble coordinates".into()));
        }
        Ok(Self {
            points,
            logdet: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn with_logdet(mut self, logdet: Vec<f64>) -> Result<Self> {
        if logdet.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: logdet.len(),
            });
        }
        self.logdet = Some(logdet);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn into_points(self) -> Tensor {
        self.points
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn logdet(&self) -> Option<&[f64]> {
        self.logdet.as_deref()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: self.points.select_rows(idx),
            logdet: self
                .logdet
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let m = self.len() as f64;
        (0..self.dim())
            .map(|j| self.points.column(j).iter().sum::<f64>() / m)
            .collect()
    }

    /// Sample covariance with denominator `m − 1` (`m` when `m = 1`).
    pub fn covariance(&self) -> Tensor {
        let (m, d) = (self.len(), self.dim());
        let mu = self.mean();
        let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
        let mut c = Tensor::zeros(&[d, d]);
        for i in 0..m {
            let r = self.points.row(i);
            for a in 0..d {
                for b in a..d {
                    c.data_mut()[a * d + b] += (r[a] - mu[a]) * (r[b] - mu[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = c.get(a, b) / denom;
                c.data_mut()[a * d + b] = v;
                c.data_mut()[b * d + a] = v;
            }
        }
        c
    }
}

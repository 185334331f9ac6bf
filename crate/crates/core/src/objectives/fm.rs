use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::rng::{normal_tensor, shuffle, Rng};
use crate::{Error, Result};

/// Interpolation path `I_s(x0, x1)` with `I_0 = x0`, `I_1 = x1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolant {
    /// `(1 − s) x0 + s x1`
    #[default]
    Linear,
    /// `cos(πs/2) x0 + sin(πs/2) x1`
    Trig,
}

impl Interpolant {
    /// Coefficients `(a, b, ȧ, ḃ)` with `I_s = a x0 + b x1`.
    pub fn coefficients(self, s: f64) -> (f64, f64, f64, f64) {
        match self {
            Interpolant::Linear => (1.0 - s, s, -1.0, 1.0),
            Interpolant::Trig => {
                let (sin, cos) = (FRAC_PI_2 * s).sin_cos();
                (cos, sin, -FRAC_PI_2 * sin, FRAC_PI_2 * cos)
            }
        }
    }

    pub fn point(self, s: f64, x0: f64, x1: f64) -> f64 {
        let (a, b, _, _) = self.coefficients(s);
        a * x0 + b * x1
    }

    pub fn derivative(self, s: f64, x0: f64, x1: f64) -> f64 {
        let (_, _, da, db) = self.coefficients(s);
        da * x0 + db * x1
    }
}

pub const DEFAULT_STRATA: usize = 8;

/// How interpolant times are drawn and where they land on the field's clock.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmOptions {
    pub interpolant: Interpolant,
    /// Time draws per pair.
    pub time_draws: usize,
    pub strata: usize,
    /// Interpolant-time window `[s0, s1]` mapped onto the field interval.
    pub window: (f64, f64),
}

impl Default for FmOptions {
    fn default() -> Self {
        Self {
            interpolant: Interpolant::Linear,
            time_draws: 1,
            strata: DEFAULT_STRATA,
            window: (0.0, 1.0),
        }
    }
}

/// Regression inputs for one flow-matching evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FmBatch {
    pub points: Tensor,
    /// Field-clock times, `n × 1`.
    pub times: Tensor,
    /// `∂_t I` in field time units.
    pub targets: Tensor,
}

/// Builds `(I_s, t, ∂_t I)` triples. `x1` is shuffled against `x0`
/// (independent coupling); times are stratified uniform over `opts.strata` bins.
pub fn fm_batch(
    interval: (f64, f64),
    x0: &Tensor,
    x1: &Tensor,
    opts: &FmOptions,
    rng: &mut Rng,
) -> Result<FmBatch> {
    if x0.rows() == 0 || x0.rows() != x1.rows() || x0.cols() != x1.cols() {
        return Err(Error::invalid(format!(
            "flow matching needs equal non-empty batches, got {:?} and {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if opts.time_draws == 0 || opts.strata == 0 {
        return Err(Error::invalid("time_draws and strata must be positive"));
    }
    let (s0, s1) = opts.window;
    if !(0.0..=1.0).contains(&s0) || !(0.0..=1.0).contains(&s1) || s0 >= s1 {
        return Err(Error::invalid(format!("interpolant window [{s0}, {s1}] is invalid")));
    }
    let (m, d) = (x0.rows(), x0.cols());
    let mut pairing: Vec<usize> = (0..m).collect();
    shuffle(rng, &mut pairing);
    let n = m * opts.time_draws;
    let mut strata: Vec<usize> = (0..n).map(|j| j % opts.strata).collect();
    shuffle(rng, &mut strata);
    let (ta, tb) = interval;
    let rate = (s1 - s0) / (tb - ta);
    let mut points = Vec::with_capacity(n * d);
    let mut times = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n * d);
    for (j, &k) in strata.iter().enumerate() {
        let i = j % m;
        let u = (k as f64 + rng.random::<f64>()) / opts.strata as f64;
        let s = s0 + u * (s1 - s0);
        times.push(ta + u * (tb - ta));
        let (a, b, da, db) = opts.interpolant.coefficients(s);
        for (&p, &q) in x0.row(i).iter().zip(x1.row(pairing[i])) {
            points.push(a * p + b * q);
            targets.push((da * p + db * q) * rate);
        }
    }
    Ok(FmBatch {
        points: Tensor::matrix(n, d, points)?,
        times: Tensor::matrix(n, 1, times)?,
        targets: Tensor::matrix(n, d, targets)?,
    })
}

/// One OU step of length `gamma` from each row of `x_l`:
/// `x_r = e^{−γ} x_l + √(1 − e^{−2γ}) g` with fresh `g ~ N(0, I)`.
pub fn make_local_fm_targets(x_l: &Tensor, gamma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("OU step {gamma} must be non-negative")));
    }
    let g = normal_tensor(rng, x_l.rows(), x_l.cols());
    let a = (-gamma).exp();
    let b = (1.0 - (-2.0 * gamma).exp()).sqrt();
    Ok(x_l.zip_map(&g, |x, z| a * x + b * z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ParticleEnsemble;
    use crate::rng::seeded;

    #[test]
    fn interpolant_endpoints() {
        for interp in [Interpolant::Linear, Interpolant::Trig] {
            for (x0, x1) in [(0.3, -1.2), (5.0, 2.0)] {
                assert!((interp.point(0.0, x0, x1) - x0).abs() < 1e-15);
                assert!((interp.point(1.0, x0, x1) - x1).abs() < 1e-15);
                let h = 1e-6;
                let fd = (interp.point(0.4 + h, x0, x1) - interp.point(0.4 - h, x0, x1)) / (2.0 * h);
                assert!((fd - interp.derivative(0.4, x0, x1)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ou_step_coefficients() {
        let x = normal_tensor(&mut seeded(0), 6, 2);
        assert_eq!(make_local_fm_targets(&x, 0.0, &mut seeded(1)).unwrap(), x);
        let r = make_local_fm_targets(&x, 2f64.ln(), &mut seeded(1)).unwrap();
        let g = normal_tensor(&mut seeded(1), 6, 2);
        for i in 0..12 {
            let want = 0.5 * x.data()[i] + 0.866_025_403_784_438_6 * g.data()[i];
            assert!((r.data()[i] - want).abs() < 1e-15);
        }
        assert!(make_local_fm_targets(&x, -0.1, &mut seeded(1)).is_err());
    }

    #[test]
    fn long_ou_step_forgets_start() {
        let x = Tensor::full(&[20_000, 2], 5.0);
        let r = ParticleEnsemble::new(make_local_fm_targets(&x, 10.0, &mut seeded(2)).unwrap()).unwrap();
        let c = r.covariance();
        assert!(c.zip_map(&Tensor::eye(2), |a, b| a - b).max_abs() < 0.05);
        assert!(r.mean().iter().all(|m| m.abs() < 0.05));
    }

    #[test]
    fn fm_batch_shapes_and_strata() {
        let x0 = normal_tensor(&mut seeded(3), 16, 2);
        let x1 = normal_tensor(&mut seeded(4), 16, 2);
        let opts = FmOptions {
            time_draws: 2,
            ..FmOptions::default()
        };
        let b = fm_batch((2.0, 3.0), &x0, &x1, &opts, &mut seeded(5)).unwrap();
        assert_eq!(b.points.shape(), &[32, 2]);
        let mut per = [0usize; 8];
        for &t in b.times.data() {
            assert!((2.0..3.0).contains(&t));
            per[((t - 2.0) * 8.0) as usize] += 1;
        }
        assert!(per.iter().all(|&c| c == 4));
        assert!(fm_batch((0.0, 1.0), &x0, &x1.select_rows(&[0]), &opts, &mut seeded(5)).is_err());
    }
}

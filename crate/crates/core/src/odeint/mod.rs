//! Fixed-step integration of `ẋ = v(x, t)`, optionally carrying `∫ ∇·v dτ`.
//!
//! The tape-level functions record every stage so losses can be differentiated
//! through the trajectory; the value-level functions run each step on a
//! scratch tape and keep nothing.

use serde::{Deserialize, Serialize};

use crate::numcore::{NumError, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::velocity::{BoundField, DivergenceEstimator, ProbeSet, VelocityField};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

impl Scheme {
    pub fn code(self) -> u8 {
        match self {
            Scheme::Euler => 0,
            Scheme::Rk4 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Scheme::Euler),
            1 => Some(Scheme::Rk4),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Uniform grid of `steps` steps over `interval`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub interval: (f64, f64),
}

impl IntegratorConfig {
    /// RK4 with 32 steps.
    pub fn rk4(interval: (f64, f64)) -> Self {
        Self {
            scheme: Scheme::Rk4,
            steps: 32,
            interval,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn step_size(&self) -> f64 {
        (self.interval.1 - self.interval.0) / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps_per_block must be at least 1"));
        }
        if !(self.interval.0 < self.interval.1) {
            return Err(Error::invalid(format!(
                "integration interval [{}, {}] is empty",
                self.interval.0, self.interval.1
            )));
        }
        Ok(())
    }

    fn check_against(&self, field: &VelocityField) -> Result<()> {
        self.validate()?;
        let (fa, fb) = field.interval();
        let slack = 1e-12 * (1.0 + fb.abs());
        if self.interval.0 < fa - slack || self.interval.1 > fb + slack {
            return Err(Error::invalid(format!(
                "integration interval [{}, {}] leaves the field interval [{fa}, {fb}]",
                self.interval.0, self.interval.1
            )));
        }
        Ok(())
    }

    /// `(t_k, h)` for step `k` in the given direction.
    fn grid(&self, k: usize, dir: Direction) -> (f64, f64) {
        let h = self.step_size();
        match dir {
            Direction::Forward => (self.interval.0 + k as f64 * h, h),
            Direction::Reverse => (self.interval.1 - k as f64 * h, -h),
        }
    }
}

/// State carried by the augmented system at the end of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub x: Tensor,
    /// Per-row `∫ ∇·v dτ` along the integration direction (negative of the
    /// forward value for reverse integration).
    pub logdet: Vec<f64>,
    /// Entry points, kept for the displacement `‖x − F(x)‖²`.
    pub start: Tensor,
}

impl AugmentedState {
    pub fn displacement_sq(&self) -> Vec<f64> {
        (0..self.x.rows())
            .map(|i| {
                self.x
                    .row(i)
                    .iter()
                    .zip(self.start.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect()
    }
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Num(source) => Error::Integration { step, source },
        other => other,
    }
}

fn axpy(tape: &mut Tape, x: Var, a: f64, k: Var) -> std::result::Result<Var, NumError> {
    let s = tape.scale(k, a)?;
    tape.add(x, s)
}

fn eval(
    tape: &mut Tape,
    field: &BoundField,
    x: Var,
    t: f64,
    probes: Option<&ProbeSet>,
) -> Result<(Var, Option<Var>)> {
    match probes {
        None => Ok((field.velocity(tape, x, t)?, None)),
        Some(p) => {
            let (v, d) = field.velocity_and_divergence(tape, x, t, p)?;
            Ok((v, Some(d)))
        }
    }
}

/// One step; returns the new state and, with probes, `∫ ∇·v` over the step.
fn step(
    tape: &mut Tape,
    field: &BoundField,
    scheme: Scheme,
    x: Var,
    t: f64,
    h: f64,
    probes: Option<&ProbeSet>,
) -> Result<(Var, Option<Var>)> {
    match scheme {
        Scheme::Euler => {
            let (k1, d1) = eval(tape, field, x, t, probes)?;
            let next = axpy(tape, x, h, k1)?;
            let inc = match d1 {
                Some(d) => Some(tape.scale(d, h)?),
                None => None,
            };
            Ok((next, inc))
        }
        Scheme::Rk4 => {
            let (k1, d1) = eval(tape, field, x, t, probes)?;
            let x2 = axpy(tape, x, 0.5 * h, k1)?;
            let (k2, d2) = eval(tape, field, x2, t + 0.5 * h, probes)?;
            let x3 = axpy(tape, x, 0.5 * h, k2)?;
            let (k3, d3) = eval(tape, field, x3, t + 0.5 * h, probes)?;
            let x4 = axpy(tape, x, h, k3)?;
            let (k4, d4) = eval(tape, field, x4, t + h, probes)?;
            let combine = |tape: &mut Tape, a: Var, b: Var, c: Var, d: Var| {
                let bc = tape.add(b, c)?;
                let bc2 = tape.scale(bc, 2.0)?;
                let ad = tape.add(a, d)?;
                let s = tape.add(ad, bc2)?;
                tape.scale(s, h / 6.0)
            };
            let dx = combine(tape, k1, k2, k3, k4)?;
            let next = tape.add(x, dx)?;
            let inc = match (d1, d2, d3, d4) {
                (Some(a), Some(b), Some(c), Some(d)) => Some(combine(tape, a, b, c, d)?),
                _ => None,
            };
            Ok((next, inc))
        }
    }
}

/// Records the whole trajectory on `tape`; returns the end state.
pub fn integrate_on_tape(
    tape: &mut Tape,
    field: &BoundField,
    x0: Var,
    cfg: &IntegratorConfig,
    dir: Direction,
) -> Result<Var> {
    cfg.validate()?;
    let mut x = x0;
    for k in 0..cfg.steps {
        let (t, h) = cfg.grid(k, dir);
        x = step(tape, field, cfg.scheme, x, t, h, None)
            .map_err(at_step(k))?
            .0;
    }
    Ok(x)
}

/// Records the augmented trajectory; returns the end state and the per-row
/// divergence integral (`m × 1`), both integrated jointly at the same stages.
pub fn integrate_augmented_on_tape(
    tape: &mut Tape,
    field: &BoundField,
    x0: Var,
    cfg: &IntegratorConfig,
    dir: Direction,
    probes: &ProbeSet,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let mut x = x0;
    let mut acc: Option<Var> = None;
    for k in 0..cfg.steps {
        let (t, h) = cfg.grid(k, dir);
        let (next, inc) =
            step(tape, field, cfg.scheme, x, t, h, Some(probes)).map_err(at_step(k))?;
        let inc = inc.expect("probes given");
        acc = Some(match acc {
            Some(a) => tape.add(a, inc).map_err(|e| at_step(k)(e.into()))?,
            None => inc,
        });
        x = next;
    }
    Ok((x, acc.expect("at least one step")))
}

fn check_points(field: &VelocityField, x0: &Tensor) -> Result<()> {
    if x0.rank() != 2 || x0.cols() != field.dim() {
        return Err(Error::Dimension {
            expected: field.dim(),
            got: x0.cols(),
        });
    }
    Ok(())
}

/// Integrates every row of `x0` (`m × d`) across `cfg.interval`.
pub fn integrate(
    field: &VelocityField,
    x0: &Tensor,
    cfg: &IntegratorConfig,
    dir: Direction,
) -> Result<Tensor> {
    cfg.check_against(field)?;
    check_points(field, x0)?;
    let mut x = x0.clone();
    for k in 0..cfg.steps {
        let (t, h) = cfg.grid(k, dir);
        let mut tape = Tape::new();
        let bound = field.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (next, _) =
            step(&mut tape, &bound, cfg.scheme, xv, t, h, None).map_err(at_step(k))?;
        x = tape.value(next).clone();
    }
    Ok(x)
}

/// Integrates state and divergence jointly; Hutchinson probes are drawn once
/// per call and held fixed along the trajectory.
pub fn integrate_augmented(
    field: &VelocityField,
    x0: &Tensor,
    cfg: &IntegratorConfig,
    dir: Direction,
    est: DivergenceEstimator,
    rng: &mut Rng,
) -> Result<AugmentedState> {
    cfg.check_against(field)?;
    check_points(field, x0)?;
    let probes = est.draw(rng, x0.rows(), field.dim())?;
    let mut x = x0.clone();
    let mut logdet = vec![0.0; x0.rows()];
    for k in 0..cfg.steps {
        let (t, h) = cfg.grid(k, dir);
        let mut tape = Tape::new();
        let bound = field.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (next, inc) = step(&mut tape, &bound, cfg.scheme, xv, t, h, Some(&probes))
            .map_err(at_step(k))?;
        for (acc, v) in logdet.iter_mut().zip(tape.value(inc.expect("probes")).data()) {
            *acc += v;
        }
        x = tape.value(next).clone();
    }
    Ok(AugmentedState {
        x,
        logdet,
        start: x0.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use crate::velocity::FieldSpec;

    fn linear(a: &[f64], d: usize, interval: (f64, f64)) -> VelocityField {
        let m = Tensor::matrix(d, d, a.to_vec()).unwrap();
        VelocityField::affine(&m, &vec![0.0; d], &vec![0.0; d], 1.0, interval).unwrap()
    }

    #[test]
    fn exponential_growth_rk4() {
        let f = linear(&[1.0], 1, (0.0, 1.0));
        let cfg = IntegratorConfig::rk4((0.0, 1.0)).with_steps(100);
        let x = integrate(&f, &Tensor::matrix(1, 1, vec![1.0]).unwrap(), &cfg, Direction::Forward)
            .unwrap();
        assert!((x.item() - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn euler_matches_compound_interest() {
        let f = linear(&[1.0], 1, (0.0, 1.0));
        let cfg = IntegratorConfig::rk4((0.0, 1.0))
            .with_steps(10)
            .with_scheme(Scheme::Euler);
        let x = integrate(&f, &Tensor::matrix(1, 1, vec![1.0]).unwrap(), &cfg, Direction::Forward)
            .unwrap();
        assert!((x.item() - 1.1f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn zero_field_is_identity() {
        let f = VelocityField::init_near_identity(&FieldSpec::new(3), 1).unwrap();
        let x0 = normal_tensor(&mut seeded(2), 4, 3);
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            let cfg = IntegratorConfig::rk4((0.0, 1.0)).with_scheme(scheme).with_steps(7);
            assert_eq!(integrate(&f, &x0, &cfg, Direction::Forward).unwrap(), x0);
            let aug = integrate_augmented(
                &f,
                &x0,
                &cfg,
                Direction::Forward,
                DivergenceEstimator::Exact,
                &mut seeded(0),
            )
            .unwrap();
            assert!(aug.logdet.iter().all(|&v| v == 0.0));
            assert!(aug.displacement_sq().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_divergence_integrates_to_trace() {
        let f = linear(&[1.0, 0.0, 0.0, 2.0], 2, (0.0, 1.0));
        let cfg = IntegratorConfig::rk4((0.0, 1.0));
        let x0 = normal_tensor(&mut seeded(3), 5, 2);
        let aug = integrate_augmented(
            &f,
            &x0,
            &cfg,
            Direction::Forward,
            DivergenceEstimator::Exact,
            &mut seeded(0),
        )
        .unwrap();
        assert!(aug.logdet.iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn logdet_matches_fd_jacobian_determinant() {
        let a = [0.3, -0.8, 0.5, 0.1];
        let m = Tensor::matrix(2, 2, a.to_vec()).unwrap();
        let f = VelocityField::affine(&m, &[0.4, -0.2], &[0.1, 0.3], 1.0, (0.0, 1.0)).unwrap();
        let cfg = IntegratorConfig::rk4((0.0, 1.0));
        let x = Tensor::matrix(1, 2, vec![0.2, -0.5]).unwrap();
        let aug = integrate_augmented(
            &f,
            &x,
            &cfg,
            Direction::Forward,
            DivergenceEstimator::Exact,
            &mut seeded(0),
        )
        .unwrap();
        let h = 1e-5;
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut up = x.clone();
            let mut dn = x.clone();
            up.data_mut()[j] += h;
            dn.data_mut()[j] -= h;
            let fu = integrate(&f, &up, &cfg, Direction::Forward).unwrap();
            let fd = integrate(&f, &dn, &cfg, Direction::Forward).unwrap();
            for i in 0..2 {
                jac[i][j] = (fu.data()[i] - fd.data()[i]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let rel = (aug.logdet[0].exp() - det.abs()).abs() / det.abs();
        assert!(rel < 1e-4, "{} vs {det}", aug.logdet[0].exp());
    }

    fn small_random_field(seed: u64) -> VelocityField {
        let spec = FieldSpec::new(2).with_hidden(&[16, 16]);
        let mut f = VelocityField::init_near_identity(&spec, seed).unwrap();
        let mut p = f.params();
        let n = p.len();
        p[n - 2] = normal_tensor(&mut seeded(seed + 1), 2, 16).map(|v| 0.4 * v);
        p[n - 1] = Tensor::vector(vec![0.3, -0.2]);
        f.set_params(&p).unwrap();
        f
    }

    #[test]
    fn forward_reverse_round_trip() {
        let f = small_random_field(8);
        let cfg = IntegratorConfig::rk4((0.0, 1.0)).with_steps(64);
        let x0 = normal_tensor(&mut seeded(4), 20, 2);
        let y = integrate(&f, &x0, &cfg, Direction::Forward).unwrap();
        let back = integrate(&f, &y, &cfg, Direction::Reverse).unwrap();
        for i in 0..20 {
            let err: f64 = x0
                .row(i)
                .iter()
                .zip(back.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err <= 1e-6, "row {i}: {err}");
        }
    }

    #[test]
    fn rk4_error_has_fourth_order_slope() {
        let f = small_random_field(9);
        let x0 = normal_tensor(&mut seeded(5), 10, 2).map(|v| 2.0 * v);
        let run = |steps: usize| {
            let cfg = IntegratorConfig::rk4((0.0, 1.0)).with_steps(steps);
            integrate(&f, &x0, &cfg, Direction::Forward).unwrap()
        };
        let reference = run(1024);
        let err = |steps: usize| run(steps).zip_map(&reference, |a, b| a - b).max_abs();
        let (e1, e2) = (err(4), err(8));
        let slope = (e1 / e2).log2();
        assert!((3.5..=4.5).contains(&slope), "errors {e1} {e2}, slope {slope}");
    }

    #[test]
    fn composition_over_subintervals() {
        let f = small_random_field(10);
        let x0 = normal_tensor(&mut seeded(6), 6, 2);
        let whole = IntegratorConfig::rk4((0.0, 1.0)).with_steps(16);
        let first = IntegratorConfig::rk4((0.0, 0.5)).with_steps(8);
        let second = IntegratorConfig::rk4((0.5, 1.0)).with_steps(8);
        let mut rng = seeded(0);
        let direct =
            integrate_augmented(&f, &x0, &whole, Direction::Forward, DivergenceEstimator::Exact, &mut rng)
                .unwrap();
        let a = integrate_augmented(&f, &x0, &first, Direction::Forward, DivergenceEstimator::Exact, &mut rng)
            .unwrap();
        let b = integrate_augmented(&f, &a.x, &second, Direction::Forward, DivergenceEstimator::Exact, &mut rng)
            .unwrap();
        assert!(direct.x.zip_map(&b.x, |p, q| p - q).max_abs() < 1e-12);
        for i in 0..6 {
            assert!((direct.logdet[i] - (a.logdet[i] + b.logdet[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let f = small_random_field(1);
        let x0 = Tensor::zeros(&[1, 2]);
        let zero_steps = IntegratorConfig::rk4((0.0, 1.0)).with_steps(0);
        assert!(integrate(&f, &x0, &zero_steps, Direction::Forward).is_err());
        let outside = IntegratorConfig::rk4((0.0, 2.0));
        assert!(integrate(&f, &x0, &outside, Direction::Forward).is_err());
        assert!(integrate(&f, &Tensor::zeros(&[1, 3]), &IntegratorConfig::rk4((0.0, 1.0)), Direction::Forward).is_err());
    }

    #[test]
    fn blow_up_reports_step() {
        let f = linear(&[1e3], 1, (0.0, 1.0));
        let cfg = IntegratorConfig::rk4((0.0, 1.0)).with_steps(4);
        let err = integrate(&f, &Tensor::matrix(1, 1, vec![1e300]).unwrap(), &cfg, Direction::Forward)
            .unwrap_err();
        assert!(matches!(err, Error::Integration { step: 0, .. }), "{err}");
    }
}

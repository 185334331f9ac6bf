use serde::{Deserialize, Serialize};

use super::mlp::{Activation, BoundMlp, Layer, Mlp};
use crate::numcore::{Tape, Tensor, Var};
use crate::rng::{rademacher_tensor, seeded, Rng};
use crate::{Error, Result};

/// How `∇·v` is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DivergenceEstimator {
    /// `Σⱼ ∂vⱼ/∂xⱼ` from one tangent pass per coordinate.
    Exact,
    /// `(1/K) Σₖ εₖᵀ (∂v/∂x) εₖ` with Rademacher probes.
    Hutchinson { probes: usize },
}

impl DivergenceEstimator {
    /// Exact up to eight dimensions, eight Rademacher probes above.
    pub fn default_for(dim: usize) -> Self {
        if dim <= 8 {
            DivergenceEstimator::Exact
        } else {
            DivergenceEstimator::Hutchinson { probes: 8 }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DivergenceEstimator::Hutchinson { probes: 0 } => {
                Err(Error::invalid("Hutchinson estimator needs at least one probe"))
            }
            _ => Ok(()),
        }
    }

    /// Materialises the probe directions for a batch of `rows` points in `dim`
    /// dimensions. Hutchinson probes are drawn once and reused along a trajectory.
    pub fn draw(&self, rng: &mut Rng, rows: usize, dim: usize) -> Result<ProbeSet> {
        self.validate()?;
        let augment = |eps: &Tensor| {
            let mut data = Vec::with_capacity(rows * (dim + 1));
            for i in 0..rows {
                data.extend_from_slice(eps.row(i));
                data.push(0.0);
            }
            Tensor::matrix(rows, dim + 1, data).expect("shape")
        };
        Ok(match *self {
            DivergenceEstimator::Exact => {
                let directions = (0..dim)
                    .map(|j| {
                        let mut t = Tensor::zeros(&[rows, dim + 1]);
                        for i in 0..rows {
                            t.data_mut()[i * (dim + 1) + j] = 1.0;
                        }
                        t
                    })
                    .collect();
                ProbeSet {
                    rows,
                    dim,
                    directions,
                    rademacher: None,
                }
            }
            DivergenceEstimator::Hutchinson { probes } => {
                let eps: Vec<Tensor> = (0..probes)
                    .map(|_| rademacher_tensor(rng, rows, dim))
                    .collect();
                ProbeSet {
                    rows,
                    dim,
                    directions: eps.iter().map(augment).collect(),
                    rademacher: Some(eps),
                }
            }
        })
    }
}

/// Probe directions for one batch, in the network's augmented input space.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    rows: usize,
    dim: usize,
    directions: Vec<Tensor>,
    rademacher: Option<Vec<Tensor>>,
}

impl ProbeSet {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn is_exact(&self) -> bool {
        self.rademacher.is_none()
    }
}

/// Architecture of a fresh velocity field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Active time interval `[t_a, t_b)`.
    pub interval: (f64, f64),
    /// Total flow time; the network sees `t / time_scale`.
    pub time_scale: f64,
}

impl FieldSpec {
    /// Two hidden layers of width 64 with tanh on `[0, 1)`.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            interval: (0.0, 1.0),
            time_scale: 1.0,
        }
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    pub fn with_interval(mut self, t_a: f64, t_b: f64) -> Self {
        self.interval = (t_a, t_b);
        self
    }

    pub fn with_time_scale(mut self, t: f64) -> Self {
        self.time_scale = t;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
}

/// Parameterised velocity `v_θ(x, t)`: an MLP on `concat(x, t / time_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    mlp: Mlp,
    dim: usize,
    time_scale: f64,
    interval: (f64, f64),
}

fn check_interval(interval: (f64, f64), time_scale: f64) -> Result<()> {
    if !(interval.0 < interval.1) || !interval.0.is_finite() || !interval.1.is_finite() {
        return Err(Error::invalid(format!(
            "interval [{}, {}) is empty",
            interval.0, interval.1
        )));
    }
    if !(time_scale > 0.0) {
        return Err(Error::invalid("time scale must be positive"));
    }
    Ok(())
}

impl VelocityField {
    pub fn new(mlp: Mlp, dim: usize, time_scale: f64, interval: (f64, f64)) -> Result<Self> {
        check_interval(interval, time_scale)?;
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if mlp.in_dim() != dim + 1 {
            return Err(Error::Dimension {
                expected: dim + 1,
                got: mlp.in_dim(),
            });
        }
        if mlp.out_dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: mlp.out_dim(),
            });
        }
        Ok(Self {
            mlp,
            dim,
            time_scale,
            interval,
        })
    }

    /// Fresh field whose output layer is zero, so `v ≡ 0` and the block map is
    /// the identity until training moves it.
    pub fn init_near_identity(spec: &FieldSpec, seed: u64) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if spec.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let mut rng = seeded(seed);
        let mlp = Mlp::init(
            spec.dim + 1,
            &spec.hidden,
            spec.dim,
            spec.activation,
            true,
            &mut rng,
        );
        Self::new(mlp, spec.dim, spec.time_scale, spec.interval)
    }

    /// `v(x, t) = A·x + c·(t / time_scale) + b` as a single linear layer.
    pub fn affine(
        a: &Tensor,
        time_coeff: &[f64],
        bias: &[f64],
        time_scale: f64,
        interval: (f64, f64),
    ) -> Result<Self> {
        let d = a.rows();
        if a.rank() != 2 || a.cols() != d || time_coeff.len() != d || bias.len() != d {
            return Err(Error::invalid("affine field needs square A and matching c, b"));
        }
        let mut w = Vec::with_capacity(d * (d + 1));
        for i in 0..d {
            w.extend_from_slice(a.row(i));
            w.push(time_coeff[i]);
        }
        let layer = Layer {
            weight: Tensor::matrix(d, d + 1, w)?,
            bias: Tensor::vector(bias.to_vec()),
            activation: Activation::Identity,
        };
        Self::new(Mlp::new(vec![layer])?, d, time_scale, interval)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.mlp.params()
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        self.mlp.set_params(params)
    }

    /// FNV-1a over the parameter bit patterns; used to certify frozen blocks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in self.params() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundField {
        BoundField {
            mlp: self.mlp.bind(tape, trainable),
            dim: self.dim,
            time_scale: self.time_scale,
        }
    }

    pub fn bind_vars(&self, vars: &[Var]) -> BoundField {
        BoundField {
            mlp: self.mlp.bind_vars(vars),
            dim: self.dim,
            time_scale: self.time_scale,
        }
    }

    fn check_call(&self, x: &Tensor, t: f64) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.cols(),
            });
        }
        let slack = 1e-9 * (1.0 + self.interval.1.abs());
        if !(t >= self.interval.0 - slack && t <= self.interval.1 + slack) {
            return Err(Error::invalid(format!(
                "t = {t} outside the field interval [{}, {}]",
                self.interval.0, self.interval.1
            )));
        }
        Ok(())
    }

    /// Velocity at each row of `x` (`m × d`) at time `t`.
    pub fn eval_velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.check_call(x, t)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let v = bound.velocity(&mut tape, xv, t)?;
        Ok(tape.value(v).clone())
    }

    /// `∇·v` at each row of `x`.
    pub fn divergence(
        &self,
        x: &Tensor,
        t: f64,
        est: DivergenceEstimator,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        self.check_call(x, t)?;
        let probes = est.draw(rng, x.rows(), self.dim)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (_, div) = bound.velocity_and_divergence(&mut tape, xv, t, &probes)?;
        Ok(tape.value(div).data().to_vec())
    }
}

/// A [`VelocityField`] with its parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundField {
    mlp: BoundMlp,
    dim: usize,
    time_scale: f64,
}

impl BoundField {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn input(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var> {
        let rows = tape.value(x).rows();
        let tcol = tape.constant(Tensor::full(&[rows, 1], t / self.time_scale));
        Ok(tape.concat(&[x, tcol])?)
    }

    pub fn velocity(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var> {
        let input = self.input(tape, x, t)?;
        self.mlp.forward(tape, input)
    }

    /// Velocity with a per-row time column `times` (`m × 1`, raw time units).
    pub fn velocity_at(&self, tape: &mut Tape, x: Var, times: &Tensor) -> Result<Var> {
        let scaled = times.map(|t| t / self.time_scale);
        let tcol = tape.constant(scaled);
        let input = tape.concat(&[x, tcol])?;
        self.mlp.forward(tape, input)
    }

    /// Velocity and per-row divergence (`m × 1`).
    pub fn velocity_and_divergence(
        &self,
        tape: &mut Tape,
        x: Var,
        t: f64,
        probes: &ProbeSet,
    ) -> Result<(Var, Var)> {
        let rows = tape.value(x).rows();
        if probes.rows != rows || probes.dim != self.dim {
            return Err(Error::invalid(format!(
                "probe set for {}×{} used on {}×{}",
                probes.rows, probes.dim, rows, self.dim
            )));
        }
        let input = self.input(tape, x, t)?;
        let dirs: Vec<Var> = probes
            .directions
            .iter()
            .map(|d| tape.constant(d.clone()))
            .collect();
        let (v, tangents) = self.mlp.forward_with_tangents(tape, input, &dirs)?;
        let mut div: Option<Var> = None;
        match &probes.rademacher {
            None => {
                for (j, jt) in tangents.iter().enumerate() {
                    let diag = tape.slice_cols(*jt, j, j + 1)?;
                    div = Some(match div {
                        Some(acc) => tape.add(acc, diag)?,
                        None => diag,
                    });
                }
            }
            Some(eps) => {
                for (e, jt) in eps.iter().zip(&tangents) {
                    let ev = tape.constant(e.clone());
                    let prod = tape.mul(ev, *jt)?;
                    let quad = tape.row_sum(prod)?;
                    div = Some(match div {
                        Some(acc) => tape.add(acc, quad)?,
                        None => quad,
                    });
                }
                let k = eps.len() as f64;
                div = Some(tape.scale(div.expect("at least one probe"), 1.0 / k)?);
            }
        }
        Ok((v, div.expect("dimension is positive")))
    }
}

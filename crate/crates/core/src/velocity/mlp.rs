use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numcore::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Softplus),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Dense layer `act(x·Wᵀ + b)` with `W [out×in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Feed-forward network of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rank() != 2 || l.bias.len() != l.out_dim() {
                return Err(Error::invalid(format!(
                    "layer {i}: weight {:?} and bias {:?} disagree",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Hidden layers use `activation` with weights and biases drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`; the output layer is linear and, when
    /// `zero_output` is set, exactly zero.
    pub fn init(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        zero_output: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        let dims: Vec<usize> = hidden.iter().copied().chain(std::iter::once(output)).collect();
        for (i, &out) in dims.iter().enumerate() {
            let last = i + 1 == dims.len();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                if last && zero_output {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            let weight = Tensor::matrix(out, fan_in, draw(out * fan_in)).expect("shape");
            let bias = Tensor::vector(draw(out));
            layers.push(Layer {
                weight,
                bias,
                activation: if last { Activation::Identity } else { activation },
            });
            fan_in = out;
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Parameter tensors as `[w₀, b₀, w₁, b₁, …]`.
    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                2 * self.layers.len(),
                params.len()
            )));
        }
        for (l, pair) in self.layers.iter_mut().zip(params.chunks(2)) {
            if pair[0].shape() != l.weight.shape() || pair[1].shape() != l.bias.shape() {
                return Err(Error::invalid("parameter shapes do not match the layers"));
            }
            l.weight = pair[0].clone();
            l.bias = pair[1].clone();
        }
        Ok(())
    }

    /// Records the parameters on `tape`, as gradient slots when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        self.bind_vars(&vars)
    }

    /// Uses already-recorded parameter handles (in [`Mlp::params`] order).
    pub fn bind_vars(&self, vars: &[Var]) -> BoundMlp {
        assert_eq!(vars.len(), 2 * self.layers.len(), "parameter handle count");
        BoundMlp {
            layers: self
                .layers
                .iter()
                .zip(vars.chunks(2))
                .map(|(l, v)| (v[0], v[1], l.activation))
                .collect(),
        }
    }

    /// Value-only forward pass on rows of `x`.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
}

fn activate(tape: &mut Tape, z: Var, act: Activation) -> Result<Var> {
    Ok(match act {
        Activation::Tanh => tape.tanh(z)?,
        Activation::Softplus => tape.softplus(z)?,
        Activation::Identity => z,
    })
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut a = x;
        for &(w, b, act) in &self.layers {
            let z = tape.affine(a, w, b)?;
            a = activate(tape, z, act)?;
        }
        Ok(a)
    }

    /// Forward pass plus forward-mode tangents: for each input direction `ȧ`
    /// returns `J(x)·ȧ` row by row, recorded so it stays differentiable in the
    /// parameters.
    pub fn forward_with_tangents(
        &self,
        tape: &mut Tape,
        x: Var,
        directions: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let mut a = x;
        let mut tangents = directions.to_vec();
        for &(w, b, act) in &self.layers {
            let z = tape.affine(a, w, b)?;
            for t in tangents.iter_mut() {
                *t = tape.linear(*t, w)?;
            }
            match act {
                Activation::Identity => a = z,
                Activation::Tanh => {
                    a = tape.tanh(z)?;
                    let sq = tape.square(a)?;
                    let slope = tape.scale_shift(sq, -1.0, 1.0)?;
                    for t in tangents.iter_mut() {
                        *t = tape.mul(slope, *t)?;
                    }
                }
                Activation::Softplus => {
                    a = tape.softplus(z)?;
                    let slope = tape.sigmoid(z)?;
                    for t in tangents.iter_mut() {
                        *t = tape.mul(slope, *t)?;
                    }
                }
            }
        }
        Ok((a, tangents))
    }
}

//! Flow-based generative models as iterative algorithms in probability space.
//!
//! Invertible neural-ODE flow blocks trained by end-to-end likelihood, JKO
//! proximal steps, flow matching and local flow matching; the learned
//! transports are applied to optimal transport, density-ratio estimation and
//! worst-case sampling. Gaussian closed forms serve as oracles throughout.
//!
//! Sign convention: a chain maps data to noise (`forward_map`), and
//! `log p(x) = log q(F(x)) + ∫₀ᵀ ∇·v(x(τ), τ) dτ`.

pub mod datasets;
pub mod flow;
pub mod metrics;
pub mod numcore;
pub mod objectives;
pub mod odeint;
pub mod rng;
pub mod transport;
pub mod velocity;

mod error;

pub use error::{Error, Result};
pub use numcore::{Tape, Tensor, Var};

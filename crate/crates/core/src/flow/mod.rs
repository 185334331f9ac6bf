//! Chains of invertible neural-ODE blocks.
//!
//! A chain maps data to noise. With `F` the composed block maps and `q` the
//! base density, `log p(x) = log q(F(x)) + Σ_n ∫ ∇·v_n dτ`; sampling draws
//! `z ~ q` and applies the inverse map.

mod chain;
mod checkpoint;
mod ensemble;

pub use chain::{FlowBlock, FlowChain};
pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, FORMAT_VERSION, MAGIC};
pub use ensemble::ParticleEnsemble;

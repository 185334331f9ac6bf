//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod program;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient_fd, FdReport, REL_ERROR_FLOOR};
pub use program::{record_forward, Instr, Program, Recording};
pub use tape::{Gradients, Op, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("shape mismatch in {op} at primitive {index}: {detail}")]
    Shape {
        index: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite output from {op} at primitive {index}")]
    NonFinite { index: usize, op: &'static str },
    #[error("seed shape {got:?} does not match output shape {expected:?}")]
    SeedShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite loss while perturbing slot {slot} entry {index}")]
    FiniteDifference { slot: usize, index: usize },
    #[error("{0}")]
    Construct(String),
}

impl NumError {
    pub(crate) fn at_instruction(self, pc: usize) -> Self {
        match self {
            NumError::Shape { op, detail, .. } => NumError::Shape {
                index: pc,
                op,
                detail,
            },
            NumError::NonFinite { op, .. } => NumError::NonFinite { index: pc, op },
            other => other,
        }
    }
}

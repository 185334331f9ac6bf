//! Training objectives and drivers.

mod fm;
mod losses;
mod optim;
mod train;

pub use fm::{fm_batch, make_local_fm_targets, FmBatch, FmOptions, Interpolant, DEFAULT_STRATA};
pub use losses::{
    bind_params, fm_loss, fm_on_tape, jko_block_loss, jko_on_tape, nll_loss, nll_on_tape, JkoTerms, JkoValue,
    LossValue,
};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    optimize, progressive_jko, progressive_local_fm, push_forward, train_block, train_fm_block, train_fm_chain,
    train_jko_block, train_local_fm_block, train_nll, BlockData, ChainLayout, GammaSchedule, LossKind, LossTrace,
    ProgressiveRun, TraceRow, TrainConfig,
};

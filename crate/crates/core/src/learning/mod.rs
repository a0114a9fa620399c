//! Estimating driver utilities from observed responses.

pub mod adapt;
pub mod loss;
pub mod meta;

pub use adapt::{adapt_driver, adapt_step};
pub use loss::{ce_hessian, ce_loss, ce_loss_and_grad, inner_adapt};
pub use meta::{
    meta_iteration, meta_task_update, normalized_loss, recover_g_from_composite, run_meta_training,
    run_meta_training_from, sample_batch, BlockAverager, LearnConfig, LossRecord, MetaState, MetaTask, MetaTraining,
    NormalizedLoss, TaskSplit,
};

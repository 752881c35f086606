//! Contrastive pretraining: the objective, the negative queue, and the
//! queue-based (MoCo) and in-batch (SimCLR) training loops.

mod loss;
mod queue;
mod train;

pub use loss::{info_nce_hardneg, nt_xent_hardneg, row_loss, LossBatch, LossOutput, LossParams, PairLossOutput, RowLoss};
pub use queue::NegativeQueue;
pub use train::{
    pretrain, train_step_moco, train_step_simclr, EpochMetrics, MocoState, PretrainOptions, PretrainOutcome, StepMetrics,
    METRICS_HEADER,
};

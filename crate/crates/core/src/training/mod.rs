//! Training loops: masked multi-task, single-task, crop-only, with
//! per-position loss logging.

mod config;
mod loss_log;
mod step;
mod trainer;

pub use config::{lr_at, LrSchedule, TrainConfig, TrainTaskMask};
pub use loss_log::{improvement_percent, relative_improvement, EpochLoss, LossLog};
pub use step::{evaluate_positions, real_equivariant_crop, train_step, StepOutcome, TrainBatch};
pub use trainer::{crop_len_for, train, ProbeSet, TokenCorpus, TrainOutcome};

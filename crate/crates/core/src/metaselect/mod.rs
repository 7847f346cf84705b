//! Task weights, the bilevel inner loops and their hyper-gradients.

pub mod finetune;
pub mod hypergrad;
pub mod problem;
pub mod schedule;
pub mod toys;
pub mod train;
pub mod weights;

pub use hypergrad::{
    exact_hypergrad, fd_hypergrad, fd_hypergrad_plan, first_order_hypergrad, hypergrad_gap, per_coordinate_hypergrad,
    AdjointMode, Diagnostics, HyperGradient, HyperMethod, InnerPlan, InnerStart,
};
pub use problem::{inner_finetune, inner_pretrain, Bilevel, FinetuneOutcome, PretrainOutcome, SeqProblem};
pub use schedule::LoopSchedule;
pub use weights::{update_lambda, TaskWeights};
pub use finetune::{evaluate, final_finetune, FinetuneConfig, FinetuneResult, Scores};
pub use train::{
    autoselect_train, batch_auc, nested_pretrain, AutoselectOutcome, sample_rows, LogRow, MetaConfig, NestedOutcome, RunFailure, Splits, TaskData,
    TrainingLog,
};

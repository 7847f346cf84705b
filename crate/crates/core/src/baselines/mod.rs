//! Comparison arms: supervised only, uniform pretraining, co-training, the
//! ranking ablations and cross-task transfer.

pub mod arms;
pub mod run;
pub mod table;

pub use arms::{ArmKind, ArmSpec, DEFAULT_TOP_K};
pub use run::{
    ablation_subset, prepare, run_ablation, run_autoselect, run_cotrain, run_pretrain_all, run_supervised, run_transfer,
    AblationMode, ArmResult, CotrainConfig, ExperimentConfig, ModelFactory,
};
pub use table::{metrics_csv, parse_metrics_csv, read_metrics_csv, with_summaries, MetricsRow, METRICS_HEADER};

//! Ranking metrics, hash-based cross-validation splits, fold summaries and
//! training-dynamics traces.

pub mod metrics;
pub mod splits;
pub mod summary;

pub use metrics::{auc_pr, auc_roc};
pub use splits::{assign_splits, fraction_subset, patient_hash, Proportions, Role, SplitAssignment};
pub use summary::{fmt_float, summarize, write_text, DynamicsLog, MetricSummary};

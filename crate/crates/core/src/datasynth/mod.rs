//! Cohorts: synthetic generation, CSV exchange, preprocessing and batching.

pub mod csvio;
pub mod dataset;
pub mod generate;
pub mod labels;
pub mod preprocess;
pub mod types;

pub use csvio::{ingest_csv, write_events_csv, write_labels_csv};
pub use dataset::Dataset;
pub use generate::{generate_cohort, SynthConfig, ALT_TASK, PRIMARY_TASK, SECONDARY_TASK};
pub use labels::{label_record, make_labels, Comparison, Criterion};
pub use preprocess::{
    bucket_and_impute, inverse_zscore, moments, percentile_sorted, preprocess, remove_outliers, zscore, Bucketed,
    OutlierBounds, PreprocessReport, SkipReason,
};
pub use types::{Cohort, Event, FeatureStats, Label, Manifest, PatientRecord, WindowSpec};

//! Recurrent sequence-to-sequence forecaster and the classifier head that
//! reuses its encoder.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod params;

pub use model::{
    classification_loss, classification_objective, classify, classify_sets, decode, encode, encode_state,
    per_task_mse, pretrain_loss, pretrain_objective, PretrainLossVars, SeqBatch, PROB_CLAMP,
};
pub use params::{fresh_head, ClassifierParams, DecoderParams, EncoderParams, LstmCell, ModelDims, ModelParams};
pub use gradcheck::{gradient_suite, GradReport, GRAD_TOL};

pub mod baselines;
pub mod cli;
pub mod datasynth;
pub mod error;
pub mod evalkit;
pub mod metaselect;
pub mod numcore;
pub mod seqmodel;

pub use error::{Error, Result};

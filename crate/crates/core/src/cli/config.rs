//! The TOML run configuration. Every field has a default, so an empty file
//! is a valid configuration: a synthetic cohort, all arms, the three data
//! fractions, every fold, and the reference hyperparameters.
//!
//! ```toml
//! seed = 0
//! tasks = ["primary"]
//! fractions = [0.01, 0.1, 1.0]
//! folds = [0, 1]
//!
//! [cohort]
//! source = "synthetic"       # or "csv" with events, labels, window
//! n_patients = 500
//!
//! [experiment]
//! hidden = 70
//! n_folds = 10
//!
//! [[arms]]
//! kind = "transfer"
//! source_task = "secondary"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{ArmKind, ArmSpec, CotrainConfig, ExperimentConfig, DEFAULT_TOP_K};
use crate::datasynth::{SynthConfig, WindowSpec, PRIMARY_TASK, SECONDARY_TASK};
use crate::error::{Error, Result};
use crate::metaselect::{FinetuneConfig, HyperMethod, LoopSchedule, MetaConfig};

/// Where the cohort comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CohortSource {
    Synthetic(SynthConfig),
    Csv(CsvSource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub events: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub n_features: Option<usize>,
    pub window: WindowSpec,
}

impl Default for CohortSource {
    fn default() -> Self {
        CohortSource::Synthetic(SynthConfig::default())
    }
}

impl CohortSource {
    pub fn window(&self) -> WindowSpec {
        match self {
            CohortSource::Synthetic(s) => s.window,
            CohortSource::Csv(c) => c.window,
        }
    }
}

/// An arm without its data fraction, which comes from `fractions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub kind: ArmKind,
    #[serde(default)]
    pub source_task: Option<String>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Data fraction of the source run for `transfer`.
    #[serde(default = "one")]
    pub source_fraction: f64,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn one() -> f64 {
    1.0
}

impl ArmConfig {
    pub fn new(kind: ArmKind) -> Self {
        Self {
            kind,
            source_task: (kind == ArmKind::Transfer).then(|| SECONDARY_TASK.to_string()),
            top_k: DEFAULT_TOP_K,
            source_fraction: 1.0,
        }
    }

    pub fn at(&self, fraction: f64) -> ArmSpec {
        ArmSpec {
            kind: self.kind,
            source_task: self.source_task.clone(),
            top_k: self.top_k,
            fraction,
        }
    }
}

/// The reference hyperparameters: hidden size 70, learning rates 0.001
/// (supervised), 0.005 (self-supervised) and 0.01 (weights), schedule
/// (100/50), 5 finetuning epochs.
pub fn reference_experiment() -> ExperimentConfig {
    ExperimentConfig {
        hidden: 70,
        meta: MetaConfig {
            schedule: LoopSchedule {
                n_pretrain: 100,
                n_finetune: 10,
                outer_steps: 50,
                eta_pretrain: 0.005,
                eta_finetune: 0.001,
                epsilon: 0.01,
            },
            batch_size: 32,
            method: HyperMethod::PerCoordinate,
            warm_start: true,
            reinit_head: true,
            normalize: false,
            fd_step: 1e-4,
            hyper_batch: None,
        },
        finetune: FinetuneConfig {
            epochs: 5,
            min_steps: 0,
            learning_rate: 0.001,
            batch_size: 32,
            eval_every: 50,
            patience: 10,
            restore_best: true,
        },
        cotrain: CotrainConfig::default(),
        n_folds: 10,
    }
}

/// Top-k of the default arm list: the number of outcome-driven channels in
/// the default synthetic cohort, which has fewer than `DEFAULT_TOP_K` tasks.
pub const DEFAULT_SYNTH_TOP_K: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub cohort: CohortSource,
    pub experiment: ExperimentConfig,
    pub arms: Vec<ArmConfig>,
    pub tasks: Vec<String>,
    pub fractions: Vec<f64>,
    /// Folds to run; every fold when empty.
    pub folds: Vec<usize>,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    /// Loop schedules as `"inner/outer"`; when non-empty every arm runs once
    /// per schedule and is labelled `arm@inner/outer`.
    pub sweep: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cohort: CohortSource::default(),
            experiment: reference_experiment(),
            arms: ArmKind::ALL
                .into_iter()
                .map(|k| ArmConfig {
                    top_k: DEFAULT_SYNTH_TOP_K,
                    ..ArmConfig::new(k)
                })
                .collect(),
            tasks: vec![PRIMARY_TASK.to_string()],
            fractions: vec![0.01, 0.1, 1.0],
            folds: Vec::new(),
            jobs: 1,
            out: None,
            sweep: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn folds(&self) -> Vec<usize> {
        if self.folds.is_empty() {
            (0..self.experiment.n_folds).collect()
        } else {
            self.folds.clone()
        }
    }

    /// `(label suffix, experiment)` per schedule; one unlabelled entry without a sweep.
    pub fn schedules(&self) -> Result<Vec<(Option<String>, ExperimentConfig)>> {
        if self.sweep.is_empty() {
            return Ok(vec![(None, self.experiment.clone())]);
        }
        let base = self.experiment.meta.schedule;
        self.sweep
            .iter()
            .map(|text| {
                let (inner, outer) = LoopSchedule::parse_pair(text)?;
                let mut e = self.experiment.clone();
                e.meta.schedule = LoopSchedule::from_pair(inner, outer, base.eta_pretrain, base.eta_finetune, base.epsilon)?;
                Ok((Some(format!("{inner}/{outer}")), e))
            })
            .collect()
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.schedules()?;
        if let CohortSource::Synthetic(s) = &self.cohort {
            s.validate()?;
        }
        self.cohort.window().validate()?;
        if self.arms.is_empty() || self.tasks.is_empty() || self.fractions.is_empty() {
            return Err(Error::Config("arms, tasks and fractions must be non-empty".into()));
        }
        if let Some(f) = self.folds.iter().find(|&&f| f >= self.experiment.n_folds) {
            return Err(Error::Config(format!("fold {f} outside 0..{}", self.experiment.n_folds)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        let n_features = match &self.cohort {
            CohortSource::Synthetic(s) => Some(s.n_features),
            CohortSource::Csv(c) => c.n_features,
        };
        for arm in &self.arms {
            if !(arm.source_fraction > 0.0 && arm.source_fraction <= 1.0) {
                return Err(Error::Config(format!("source_fraction must be in (0, 1], got {}", arm.source_fraction)));
            }
            for &fr in &self.fractions {
                let spec = arm.at(fr);
                match n_features {
                    Some(f) => spec.validate(f)?,
                    None => spec.validate(usize::MAX)?,
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.experiment.hidden, 70);
        assert_eq!(c.experiment.meta.schedule.eta_pretrain, 0.005);
        assert_eq!(c.experiment.finetune.learning_rate, 0.001);
        assert_eq!(c.experiment.meta.schedule.epsilon, 0.01);
        assert_eq!(c.folds(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.folds = vec![1, 3];
        c.arms[3].top_k = 4;
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn csv_source_and_unknown_fields() {
        let c = RunConfig::from_toml(
            "[cohort]\nsource = \"csv\"\nevents = \"e.csv\"\nlabels = \"l.csv\"\nwindow = { observation = 48, horizon = 8, label_window = 48 }\n",
        )
        .unwrap();
        assert!(matches!(c.cohort, CohortSource::Csv(_)));
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[cohort]\nsource = \"synthetic\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn validation_catches_bad_arms() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.arms[3].top_k = DEFAULT_TOP_K;
        assert!(c.validate().is_err(), "top_k 20 exceeds 16 features");
        c.arms[3].top_k = 4;
        c.validate().unwrap();
        c.fractions = vec![1.5];
        assert!(c.validate().is_err());
    }
}

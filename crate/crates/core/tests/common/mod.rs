#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use autoselect::baselines::{ArmKind, ExperimentConfig};
use autoselect::cli::{ArmConfig, CohortSource, RunConfig};
use autoselect::datasynth::{Dataset, SynthConfig, WindowSpec};
use autoselect::metaselect::LoopSchedule;

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        n_patients: 240,
        n_features: 3,
        relevant: vec![0],
        window: WindowSpec::new(6, 2, 4),
        ..SynthConfig::default()
    }
}

pub fn tiny_experiment() -> ExperimentConfig {
    let mut e = ExperimentConfig::calibrated();
    e.hidden = 4;
    e.n_folds = 5;
    e.meta.schedule = LoopSchedule::from_pair(5, 3, 0.05, 0.05, 0.1).unwrap();
    e.meta.batch_size = 8;
    e.meta.hyper_batch = Some(16);
    e.finetune.min_steps = 20;
    e.finetune.batch_size = 8;
    e.finetune.eval_every = 10;
    e
}

/// A config that runs in well under a second per arm.
pub fn tiny_config(arms: &[ArmKind]) -> RunConfig {
    RunConfig {
        seed: 3,
        cohort: CohortSource::Synthetic(tiny_synth()),
        experiment: tiny_experiment(),
        arms: arms
            .iter()
            .map(|&k| ArmConfig {
                top_k: 1,
                ..ArmConfig::new(k)
            })
            .collect(),
        tasks: vec!["primary".into()],
        fractions: vec![0.5],
        folds: vec![0],
        jobs: 1,
        out: None,
        sweep: Vec::new(),
    }
}

pub fn tiny_dataset() -> Dataset {
    autoselect::cli::load_dataset(&CohortSource::Synthetic(tiny_synth()), 3).unwrap()
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml().unwrap()).unwrap();
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoselect"))
        .args(args)
        .env("AUTOSELECT_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

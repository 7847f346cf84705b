//! Drives the run and report commands from a configuration built in code,
//! as the `autoselect run` binary does from a TOML file.

use autoselect::baselines::ArmKind;
use autoselect::cli::{cmd_report, cmd_run, ArmConfig, CohortSource, RunConfig};
use autoselect::datasynth::SynthConfig;
use autoselect::baselines::ExperimentConfig;
use autoselect::metaselect::LoopSchedule;

fn main() -> anyhow::Result<()> {
    let mut experiment = ExperimentConfig::calibrated();
    experiment.meta.schedule = LoopSchedule::from_pair(10, 5, 0.05, 0.05, 0.1)?;
    let cfg = RunConfig {
        cohort: CohortSource::Synthetic(SynthConfig {
            n_patients: 400,
            ..SynthConfig::default()
        }),
        experiment,
        arms: [ArmKind::Supervised, ArmKind::PretrainAll, ArmKind::Autoselect]
            .into_iter()
            .map(ArmConfig::new)
            .collect(),
        fractions: vec![0.1, 1.0],
        folds: vec![0, 1],
        ..RunConfig::default()
    };
    println!("{}", cfg.to_toml()?);
    let dir = tempfile::tempdir()?;
    cmd_run(&cfg, dir.path())?;
    let (text, _) = cmd_report(dir.path())?;
    print!("{text}");
    Ok(())
}

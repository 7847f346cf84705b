//! Runs every comparison arm on one fold of a small synthetic cohort.

use autoselect::baselines::*;
use autoselect::datasynth::{generate_cohort, preprocess, Dataset, SynthConfig, PRIMARY_TASK, SECONDARY_TASK};
use autoselect::metaselect::LoopSchedule;

fn main() -> anyhow::Result<()> {
    let synth = SynthConfig {
        n_patients: 600,
        ..SynthConfig::default()
    };
    let mut cohort = generate_cohort(&synth)?;
    preprocess(&mut cohort)?;
    let ds = Dataset::from_cohort(&cohort, synth.window)?;
    let mut cfg = ExperimentConfig::calibrated();
    cfg.meta.schedule = LoopSchedule::from_pair(20, 10, 0.05, 0.05, 0.1)?;
    let seed = 1;
    let data = prepare(&ds, PRIMARY_TASK, 0, cfg.n_folds, 0.1)?;
    let source = prepare(&ds, SECONDARY_TASK, 0, cfg.n_folds, 1.0)?;

    let auto = run_autoselect(&data, &cfg, seed)?;
    let weights = auto.weights.clone().expect("learned weights");
    let source_run = run_autoselect(&source, &cfg, seed)?;
    let results = vec![
        run_supervised(&data, &cfg, seed)?,
        run_pretrain_all(&data, &cfg, seed)?,
        run_cotrain(&data, &cfg, seed)?,
        run_ablation(&data, &cfg, &weights, AblationMode::Top, 4, seed)?,
        run_ablation(&data, &cfg, &weights, AblationMode::Down, 4, seed)?,
        run_transfer(&data, &cfg, &source_run, seed)?,
        auto,
    ];
    for r in &results {
        println!("{:<14} auc-roc {:.3}  auc-pr {:.3}", r.arm, r.test.auc_roc, r.test.auc_pr);
    }
    Ok(())
}

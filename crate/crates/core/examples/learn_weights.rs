//! Learns auxiliary-task weights on the synthetic cohort, where the first
//! four channels drive the outcome, and prints the weight trajectory.

use autoselect::baselines::{prepare, ExperimentConfig};
use autoselect::datasynth::{generate_cohort, preprocess, Dataset, SynthConfig, PRIMARY_TASK};
use autoselect::metaselect::{nested_pretrain, LoopSchedule, TaskWeights};

fn main() -> anyhow::Result<()> {
    let synth = SynthConfig {
        n_patients: 800,
        ..SynthConfig::default()
    };
    let mut cohort = generate_cohort(&synth)?;
    preprocess(&mut cohort)?;
    let data = Dataset::from_cohort(&cohort, synth.window)?;
    let mut cfg = ExperimentConfig::calibrated();
    cfg.meta.schedule = LoopSchedule::from_pair(40, 20, 0.05, 0.05, 0.2)?;
    let task = prepare(&data, PRIMARY_TASK, 0, cfg.n_folds, 0.05)?;
    let init = cfg.factory(data.n_features)?.init(0);
    let out = nested_pretrain(&task, &cfg.meta, &init, TaskWeights::uniform(data.n_features), true, 0)
?;
    for row in out.log.rows.iter().step_by(5) {
        let w: Vec<String> = row.lambda.iter().map(|x| format!("{x:.3}")).collect();
        println!("step {:>3}  val auc {:.3}  weights {}", row.outer_step, row.val_auc, w.join(" "));
    }
    let rank = out.weights.ranking();
    println!("ranking: {rank:?} (outcome-driven channels: {:?})", synth.relevant);
    Ok(())
}

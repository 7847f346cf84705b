//! Generates a synthetic cohort, preprocesses it and prints what the model sees.

use autoselect::datasynth::{generate_cohort, preprocess, Dataset, SynthConfig};

fn main() -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_patients: 300,
        seed: 7,
        ..SynthConfig::default()
    };
    let mut cohort = generate_cohort(&cfg)?;
    println!("{} patients, {} raw events, tasks {:?}", cohort.records.len(), cohort.n_events(), cohort.tasks());
    for task in cohort.tasks() {
        let (pos, neg, excluded) = cohort.label_counts(&task);
        println!("  {task}: {pos} positive, {neg} negative, {excluded} excluded");
    }
    let report = preprocess(&mut cohort)?;
    println!("dropped {} outlier readings", report.dropped_outliers);
    let stats = cohort.stats.as_ref().expect("preprocessed");
    println!("channel means (raw scale): {:?}", &stats.mean[..4]);

    let data = Dataset::from_cohort(&cohort, cfg.window)?;
    let batch = data.batch(&[0, 1, 2, 3], Some("primary"))?;
    println!(
        "batch of {} x {} hours x {} channels, {:.0}% observed",
        batch.batch_size(),
        batch.steps(),
        batch.features(),
        100.0 * batch.observed_mask.data().iter().sum::<f64>() / batch.observed_mask.data().len() as f64
    );
    Ok(())
}

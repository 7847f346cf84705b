use std::path::{Path, PathBuf};

use crate::cli::config::{CohortSource, RunConfig};
use crate::datasynth::{generate_cohort, write_events_csv, write_labels_csv};
use crate::error::{Error, Result};
use crate::evalkit::write_text;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub dir: PathBuf,
    pub n_patients: usize,
    pub n_events: usize,
}

/// Writes `events.csv`, `labels.csv`, `manifest.toml` and the producing
/// `config.toml` into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let CohortSource::Synthetic(mut synth) = cfg.cohort.clone() else {
        return Err(Error::Config("synth needs a synthetic cohort source".into()));
    };
    synth.seed = cfg.seed;
    let cohort = generate_cohort(&synth)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_events_csv(&cohort, &out.join("events.csv"))?;
    write_labels_csv(&cohort, &out.join("labels.csv"))?;
    let manifest = cohort.manifest.as_ref().expect("generated cohorts carry a manifest");
    let text = toml::to_string(manifest).map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    write_text(&out.join("manifest.toml"), &text)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    Ok(SynthOutput {
        dir: out.to_path_buf(),
        n_patients: cohort.records.len(),
        n_events: cohort.n_events(),
    })
}

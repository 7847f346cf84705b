mod common;

use autoselect::baselines::{read_metrics_csv, ArmKind};
use autoselect::cli::{cmd_run, cmd_synth, CohortSource, CsvSource, RunConfig};
use autoselect::datasynth::{Manifest, SynthConfig, WindowSpec};
use common::{bin, code, tiny_config, tiny_synth, write_config};
use tempfile::tempdir;

fn synth_config(synth: SynthConfig) -> RunConfig {
    RunConfig {
        cohort: CohortSource::Synthetic(synth),
        ..tiny_config(&[ArmKind::Supervised])
    }
}

#[test]
fn default_synth_writes_files_matching_the_manifest() {
    let dir = tempdir().unwrap();
    let o = bin(&["synth", "--out", dir.path().to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Manifest = toml::from_str(&std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 5);
    let events = std::fs::read_to_string(dir.path().join("events.csv")).unwrap();
    assert_eq!(events.lines().count() - 1, manifest.n_events);
    let labels = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count() - 1, manifest.n_patients * manifest.tasks.len());
    let cfg = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg.seed, 5);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    let cfg = synth_config(tiny_synth());
    cmd_synth(&cfg, a.path()).unwrap();
    cmd_synth(&cfg, b.path()).unwrap();
    for f in ["events.csv", "labels.csv", "manifest.toml", "config.toml"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempdir().unwrap();
    cmd_synth(&other, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join("events.csv")).unwrap(), std::fs::read(c.path().join("events.csv")).unwrap());
}

#[test]
fn single_feature_cohort_runs_end_to_end_from_csv() {
    let dir = tempdir().unwrap();
    let synth = SynthConfig {
        n_features: 1,
        relevant: vec![0],
        ..tiny_synth()
    };
    let window = synth.window;
    cmd_synth(&synth_config(synth), dir.path()).unwrap();
    let mut cfg = tiny_config(&[ArmKind::Supervised, ArmKind::PretrainAll, ArmKind::Autoselect, ArmKind::PretrainTop]);
    cfg.cohort = CohortSource::Csv(CsvSource {
        events: dir.path().join("events.csv"),
        labels: dir.path().join("labels.csv"),
        n_features: Some(1),
        window,
    });
    let out = dir.path().join("out");
    let run = cmd_run(&cfg, &out).unwrap();
    assert_eq!(run.rows.len(), 8);
    let rows = read_metrics_csv(&out.join("metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r.auc_roc.is_finite()));
    let cfg_path = dir.path().join("csv.toml");
    write_config(&cfg, &cfg_path);
    assert_eq!(RunConfig::load(&cfg_path).unwrap(), cfg);
}

#[test]
fn unwritable_output_is_a_config_error() {
    let dir = tempdir().unwrap();
    let file = dir.path().join("plain_file");
    std::fs::write(&file, "x").unwrap();
    let err = cmd_synth(&synth_config(tiny_synth()), &file.join("sub")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn csv_window_mismatch_is_rejected_before_training() {
    let mut cfg = tiny_config(&[ArmKind::Supervised]);
    cfg.cohort = CohortSource::Csv(CsvSource {
        events: "missing_events.csv".into(),
        labels: "missing_labels.csv".into(),
        n_features: None,
        window: WindowSpec::new(0, 2, 4),
    });
    assert!(cfg.validate().is_err());
}

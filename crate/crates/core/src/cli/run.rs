use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;

use crate::baselines::{
    prepare, run_ablation, run_autoselect, run_cotrain, run_pretrain_all, run_supervised, run_transfer, with_summaries,
    metrics_csv, AblationMode, ArmKind, ArmResult, ExperimentConfig, MetricsRow,
};
use crate::cli::config::{ArmConfig, CohortSource, RunConfig};
use crate::datasynth::{generate_cohort, ingest_csv, preprocess, Dataset};
use crate::error::{Error, Result};
use crate::evalkit::{fmt_float, write_text};
use crate::metaselect::{RunFailure, TaskWeights, TrainingLog};
use crate::numcore::RngStream;
use crate::seqmodel::{checkpoint, DecoderParams, ModelParams};

pub const DETERMINISTIC_ENV: &str = "AUTOSELECT_DETERMINISTIC";

/// `requested`, or 1 when the deterministic switch is set.
pub fn effective_jobs(requested: usize) -> usize {
    match std::env::var(DETERMINISTIC_ENV) {
        Ok(v) if v == "1" => 1,
        _ => requested.max(1),
    }
}

/// The seed shared by every arm on one fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    RngStream::new(seed, "fold", fold as u64).rng().next_u64()
}

/// Generates or ingests the cohort, then preprocesses and buckets it.
pub fn load_dataset(source: &CohortSource, seed: u64) -> Result<Dataset> {
    let mut cohort = match source {
        CohortSource::Synthetic(s) => {
            let mut s = s.clone();
            s.seed = seed;
            generate_cohort(&s)?
        }
        CohortSource::Csv(c) => ingest_csv(&c.events, &c.labels, c.n_features)?,
    };
    preprocess(&mut cohort)?;
    Dataset::from_cohort(&cohort, source.window())
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Per-fold rows followed by the summary rows.
    pub rows: Vec<MetricsRow>,
}

/// One (task, fraction, fold, schedule) combination; every arm in it shares splits and seed.
#[derive(Clone, Debug)]
struct Cell {
    task: String,
    fraction: f64,
    fold: usize,
    schedule: usize,
}

type SourceKey = (String, u64, usize, usize);

struct Finished {
    label: String,
    dir: PathBuf,
    outcome: std::result::Result<ArmResult, RunFailure>,
}

fn arm_label(kind: ArmKind, suffix: &Option<String>) -> String {
    match suffix {
        Some(s) => format!("{}@{s}", kind.as_str()),
        None => kind.as_str().to_string(),
    }
}

fn run_dir(out: &Path, cell: &Cell, label: &str) -> PathBuf {
    out.join("runs")
        .join(&cell.task)
        .join(format!("fraction_{}", fmt_float(cell.fraction)))
        .join(format!("fold_{}", cell.fold))
        .join(label.replace('/', "-"))
}

fn failure(error: Error) -> RunFailure {
    RunFailure {
        error,
        log: TrainingLog::default(),
    }
}

fn run_cell(
    data_set: &Dataset,
    cfg: &RunConfig,
    cell: &Cell,
    exp: &ExperimentConfig,
    suffix: &Option<String>,
    sources: &BTreeMap<SourceKey, std::result::Result<ArmResult, String>>,
    out: &Path,
) -> Vec<Finished> {
    let seed = fold_seed(cfg.seed, cell.fold);
    let data = prepare(data_set, &cell.task, cell.fold, exp.n_folds, cell.fraction);
    let mut auto: Option<std::result::Result<ArmResult, String>> = None;
    let needs_auto = cfg.arms.iter().any(|a| a.kind.needs_weights() || a.kind == ArmKind::Autoselect);
    let mut done = Vec::new();
    let data = match data {
        Ok(d) => d,
        Err(e) => {
            return cfg
                .arms
                .iter()
                .map(|a| {
                    let label = arm_label(a.kind, suffix);
                    Finished {
                        dir: run_dir(out, cell, &label),
                        label,
                        outcome: Err(failure(Error::Config(e.to_string()))),
                    }
                })
                .collect()
        }
    };
    if needs_auto {
        auto = Some(run_autoselect(&data, exp, seed).map_err(|f| f.error.to_string()));
    }
    for arm in &cfg.arms {
        let label = arm_label(arm.kind, suffix);
        let weights = |auto: &Option<std::result::Result<ArmResult, String>>| -> std::result::Result<TaskWeights, RunFailure> {
            match auto {
                Some(Ok(r)) => Ok(r.weights.clone().expect("autoselect records weights")),
                Some(Err(e)) => Err(failure(Error::Config(format!("autoselect run needed for the ranking failed: {e}")))),
                None => unreachable!(),
            }
        };
        let outcome = match arm.kind {
            ArmKind::Supervised => run_supervised(&data, exp, seed),
            ArmKind::PretrainAll => run_pretrain_all(&data, exp, seed),
            ArmKind::Cotrain => run_cotrain(&data, exp, seed),
            ArmKind::Autoselect => match &auto {
                Some(Ok(r)) => Ok(r.clone()),
                _ => run_autoselect(&data, exp, seed),
            },
            ArmKind::PretrainTop | ArmKind::PretrainDown => {
                let mode = if arm.kind == ArmKind::PretrainTop { AblationMode::Top } else { AblationMode::Down };
                weights(&auto).and_then(|w| run_ablation(&data, exp, &w, mode, arm.top_k, seed))
            }
            ArmKind::Transfer => match sources.get(&source_key(arm, cell)) {
                Some(Ok(src)) => run_transfer(&data, exp, src, seed),
                Some(Err(e)) => Err(failure(Error::Config(format!("transfer source run failed: {e}")))),
                None => unreachable!("sources are computed for every transfer arm"),
            },
        };
        done.push(Finished {
            dir: run_dir(out, cell, &label),
            label,
            outcome,
        });
    }
    done
}

fn source_key(arm: &ArmConfig, cell: &Cell) -> SourceKey {
    let task = arm.source_task.clone().unwrap_or_default();
    (task, arm.source_fraction.to_bits(), cell.fold, cell.schedule)
}

fn write_arm(data: &Dataset, exp: &ExperimentConfig, f: &Finished) -> Result<()> {
    std::fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
    match &f.outcome {
        Ok(r) => {
            if let Some(log) = &r.log {
                write_text(&f.dir.join("training_log.csv"), &log.to_csv())?;
            }
            r.dynamics.write(&f.dir.join("dynamics.csv"))?;
            let dims = exp.factory(data.n_features)?.dims;
            let params = ModelParams {
                encoder: r.encoder.clone(),
                decoder: r.decoder.clone().unwrap_or_else(|| DecoderParams::zeros(dims).to_set()),
                head: r.head.clone(),
            };
            checkpoint::save(&params, &f.dir.join("model.ckpt"))?;
            if !r.warnings.is_empty() {
                let text: String = r.warnings.iter().map(|(k, w)| format!("{k},{w}\n")).collect();
                write_text(&f.dir.join("warnings.csv"), &format!("outer_step,warning\n{text}"))?;
            }
        }
        Err(fail) => {
            write_text(&f.dir.join("training_log.csv.partial"), &fail.log.to_csv())?;
            write_text(&f.dir.join("error.txt.partial"), &format!("{}\n", fail.error))?;
        }
    }
    Ok(())
}

/// Trains every configured arm on every (task, fraction, fold), writing
/// per-run logs and checkpoints under `out/runs`, and `metrics.csv` plus the
/// producing `config.toml` under `out`. On failure the finished rows are kept
/// in `metrics.csv.partial` and the first error is returned.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let schedules = cfg.schedules()?;
    let data = load_dataset(&cfg.cohort, cfg.seed)?;
    for t in cfg.tasks.iter().chain(cfg.arms.iter().filter_map(|a| a.source_task.as_ref())) {
        if !data.tasks().contains(t) {
            return Err(Error::Config(format!("task {t:?} not in the cohort (has {:?})", data.tasks())));
        }
    }
    for a in &cfg.arms {
        crate::baselines::ArmSpec::validate(&a.at(1.0), data.n_features)?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;

    let mut cells = Vec::new();
    for task in &cfg.tasks {
        for &fraction in &cfg.fractions {
            for fold in cfg.folds() {
                for schedule in 0..schedules.len() {
                    cells.push(Cell {
                        task: task.clone(),
                        fraction,
                        fold,
                        schedule,
                    });
                }
            }
        }
    }
    let mut source_keys: Vec<SourceKey> = Vec::new();
    for cell in &cells {
        for arm in cfg.arms.iter().filter(|a| a.kind == ArmKind::Transfer) {
            let k = source_key(arm, cell);
            if !source_keys.contains(&k) {
                source_keys.push(k);
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_jobs(cfg.jobs))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (sources, finished) = pool.install(|| {
        let sources: BTreeMap<SourceKey, std::result::Result<ArmResult, String>> = source_keys
            .par_iter()
            .map(|k| {
                let (task, fr, fold, schedule) = k.clone();
                let exp = &schedules[schedule].1;
                let r = prepare(&data, &task, fold, exp.n_folds, f64::from_bits(fr))
                    .map_err(|e| e.to_string())
                    .and_then(|d| run_autoselect(&d, exp, fold_seed(cfg.seed, fold)).map_err(|f| f.error.to_string()));
                (k.clone(), r)
            })
            .collect();
        let finished: Vec<(Cell, Vec<Finished>)> = cells
            .par_iter()
            .map(|c| {
                let (suffix, exp) = &schedules[c.schedule];
                (c.clone(), run_cell(&data, cfg, c, exp, suffix, &sources, out))
            })
            .collect();
        (sources, finished)
    });
    drop(sources);

    let mut rows = Vec::new();
    let mut first_error = None;
    for (cell, arms) in finished {
        let exp = &schedules[cell.schedule].1;
        for f in arms {
            write_arm(&data, exp, &f)?;
            match f.outcome {
                Ok(r) => rows.push(MetricsRow {
                    arm: f.label,
                    task: cell.task.clone(),
                    fraction: cell.fraction,
                    fold: Some(cell.fold),
                    auc_roc: r.test.auc_roc,
                    auc_pr: r.test.auc_pr,
                    sem: None,
                }),
                Err(fail) if first_error.is_none() => {
                    first_error = Some(match fail.error {
                        Error::Config(m) => Error::Config(format!("{}: {m}", f.dir.display())),
                        e => e,
                    })
                }
                Err(_) => {}
            }
        }
    }
    let rows = with_summaries(&rows)?;
    if let Some(e) = first_error {
        write_text(&out.join("metrics.csv.partial"), &metrics_csv(&rows))?;
        return Err(e);
    }
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    Ok(RunOutput {
        dir: out.to_path_buf(),
        rows,
    })
}

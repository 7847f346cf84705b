//! The outer loop: inner pretraining, a probe finetune, a hyper-gradient and
//! a weight update per outer step.
//!
//! The encoder and decoder continue from one outer step to the next; the
//! probe finetune is a side branch whose only outputs are the validation
//! gradient and the logged validation AUC. Running the same loop with the
//! weights frozen is the uniform-pretraining baseline, so the two share
//! every random stream and produce identical logs when `epsilon = 0`.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::datasynth::Dataset;
use crate::error::{Error, Result};
use crate::evalkit::{auc_roc, fmt_float};
use crate::metaselect::finetune::{final_finetune, FinetuneConfig, FinetuneResult};
use crate::metaselect::hypergrad::{
    exact_hypergrad, fd_hypergrad_plan, first_order_hypergrad, per_coordinate_hypergrad, AdjointMode, HyperGradient,
    HyperMethod, InnerPlan, InnerStart,
};
use crate::metaselect::problem::{finetune_eval, inner_finetune, inner_pretrain, SeqProblem};
use crate::metaselect::schedule::LoopSchedule;
use crate::metaselect::weights::{update_lambda, TaskWeights};
use crate::numcore::{ParamSet, RngStream};
use crate::seqmodel::{classify_sets, fresh_head, ModelDims, ModelParams, SeqBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub schedule: LoopSchedule,
    pub batch_size: usize,
    pub method: HyperMethod,
    /// Continue encoder and decoder across outer steps.
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// Draw a fresh probe head every outer step.
    #[serde(default = "yes")]
    pub reinit_head: bool,
    /// Rescale each logit step to unit infinity norm.
    #[serde(default)]
    pub normalize: bool,
    /// Step for the finite-difference method.
    #[serde(default = "fd_step")]
    pub fd_step: f64,
    /// Rows of a dedicated batch for the per-task gradients of the
    /// per-coordinate method; the last pretraining batch when absent.
    #[serde(default)]
    pub hyper_batch: Option<usize>,
}

fn yes() -> bool {
    true
}

fn fd_step() -> f64 {
    1e-4
}

/// Row indices of a dataset by role.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// Unlabelled sequences for the auxiliary tasks.
    pub pretrain: Vec<usize>,
    /// Labelled primary-task training rows (after fraction subsetting).
    pub train: Vec<usize>,
    /// Validation rows driving the hyper-gradient.
    pub meta_val: Vec<usize>,
    /// Validation rows driving early stopping.
    pub stop_val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A dataset, a primary task and its splits.
pub struct TaskData<'a> {
    pub dataset: &'a Dataset,
    pub task: String,
    pub splits: Splits,
}

impl TaskData<'_> {
    pub fn problem(&self) -> SeqProblem {
        SeqProblem {
            observation: self.dataset.window.observation,
            horizon: self.dataset.window.horizon,
        }
    }

    pub fn dims(&self, hidden: usize) -> Result<ModelDims> {
        ModelDims::new(self.dataset.n_features, hidden)
    }

    pub fn rows_batch(&self, rows: &[usize], labelled: bool) -> Result<SeqBatch> {
        self.dataset.batch(rows, labelled.then_some(self.task.as_str()))
    }
}

/// Up to `k` distinct rows drawn from `pool`.
pub fn sample_rows(stream: RngStream, pool: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(pool.len());
    sample(&mut stream.rng(), pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub outer_step: usize,
    pub pretrain_loss: f64,
    pub val_auc: f64,
    pub lambda: Vec<f64>,
}

/// One row per outer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let f = self.rows.first().map_or(0, |r| r.lambda.len());
        let mut out = String::from("outer_step,pretrain_loss,val_auc");
        for i in 0..f {
            out.push_str(&format!(",lambda_{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.outer_step, fmt_float(r.pretrain_loss), fmt_float(r.val_auc)));
            for w in &r.lambda {
                out.push(',');
                out.push_str(&fmt_float(*w));
            }
            out.push('\n');
        }
        out
    }
}

/// A run that stopped early, with everything logged before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub log: TrainingLog,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} logged outer steps)", self.error, self.log.rows.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

#[derive(Clone, Debug)]
pub struct NestedOutcome {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub weights: TaskWeights,
    pub log: TrainingLog,
    /// Warnings raised by hyper-gradient diagnostics, by outer step.
    pub warnings: Vec<(usize, String)>,
    /// Raw logit gradients, one per outer step (empty when not learning).
    pub hypergrads: Vec<Vec<f64>>,
}

/// AUC on a labelled batch, `NaN` when one class is missing.
pub fn batch_auc(encoder: &ParamSet, head: &ParamSet, batch: &SeqBatch, tau: usize) -> Result<f64> {
    let probs = classify_sets(encoder, head, &batch.values, tau)?;
    Ok(auc_roc(&probs, batch.labels.as_ref().expect("labelled batch")).unwrap_or(f64::NAN))
}

/// The outer loop. With `learn = false` the weights stay fixed and no
/// hyper-gradient is computed.
pub fn nested_pretrain(
    data: &TaskData<'_>,
    cfg: &MetaConfig,
    init: &ModelParams,
    weights: TaskWeights,
    learn: bool,
    seed: u64,
) -> Result<NestedOutcome, RunFailure> {
    let mut log = TrainingLog::default();
    let mut warnings = Vec::new();
    let mut hypergrads = Vec::new();
    let fail = |error: Error, log: &TrainingLog| RunFailure {
        error,
        log: log.clone(),
    };
    cfg.schedule.validate().map_err(|e| fail(e, &log))?;
    if weights.len() != data.dataset.n_features {
        return Err(fail(Error::Config("one task weight per feature channel required".into()), &log));
    }
    if data.splits.pretrain.is_empty() || data.splits.train.is_empty() || data.splits.meta_val.is_empty() {
        return Err(fail(Error::Config("pretrain, train and meta-val splits must be non-empty".into()), &log));
    }
    let s = cfg.schedule;
    let p = data.problem();
    let dims = init.dims().map_err(|e| fail(e, &log))?;
    let val = data.rows_batch(&data.splits.meta_val, true).map_err(|e| fail(e, &log))?;

    let mut weights = weights;
    let (mut enc, mut dec) = (init.encoder.clone(), init.decoder.clone());
    let mut head = fresh_head(dims, seed, "probe_head", 0);
    for k in 0..s.outer_steps {
        let step = || -> Result<(LogRow, Option<HyperGradient>, ParamSet, ParamSet, ParamSet)> {
            let pre: Vec<SeqBatch> = (0..s.n_pretrain)
                .map(|i| {
                    let rows = sample_rows(
                        RngStream::new(seed, "pretrain_batch", (k * s.n_pretrain + i) as u64),
                        &data.splits.pretrain,
                        cfg.batch_size,
                    );
                    data.rows_batch(&rows, false)
                })
                .collect::<Result<_>>()?;
            let fine: Vec<SeqBatch> = (0..s.n_finetune)
                .map(|j| {
                    let rows = sample_rows(
                        RngStream::new(seed, "probe_batch", (k * s.n_finetune + j) as u64),
                        &data.splits.train,
                        cfg.batch_size,
                    );
                    data.rows_batch(&rows, true)
                })
                .collect::<Result<_>>()?;
            let pre_refs: Vec<&SeqBatch> = pre.iter().collect();
            let fine_refs: Vec<&SeqBatch> = fine.iter().collect();
            let (start_enc, start_dec) = if cfg.warm_start {
                (enc.clone(), dec.clone())
            } else {
                (init.encoder.clone(), init.decoder.clone())
            };
            let probe_head = if cfg.reinit_head {
                fresh_head(dims, seed, "probe_head", k as u64)
            } else {
                head.clone()
            };
            let po = inner_pretrain(&p, &start_enc, &start_dec, weights.weights(), &pre_refs, s.eta_pretrain)?;
            let ft = inner_finetune(&p, &po.encoder, &probe_head, &fine_refs, s.eta_finetune)?;
            let val_auc = batch_auc(&ft.encoder, &ft.head, &val, p.observation)?;
            let hg = if learn {
                Some(match cfg.method {
                    HyperMethod::FirstOrder => {
                        let c = finetune_eval(&p, &ft.encoder, &ft.head, &val)?.grad_encoder;
                        first_order_hypergrad(&po.a, &po.b, &c, &weights)?
                    }
                    HyperMethod::PerCoordinate => {
                        let c = finetune_eval(&p, &ft.encoder, &ft.head, &val)?.grad_encoder;
                        let own = match cfg.hyper_batch {
                            Some(n) => {
                                let rows = sample_rows(RngStream::new(seed, "hyper_batch", k as u64), &data.splits.pretrain, n);
                                Some(data.rows_batch(&rows, false)?)
                            }
                            None => None,
                        };
                        let batch = own.as_ref().unwrap_or(pre_refs[pre_refs.len() - 1]);
                        per_coordinate_hypergrad(&p, &po.encoder, &po.decoder, batch, &c, s.eta_pretrain, &weights)?
                    }
                    m => {
                        let plan = InnerPlan {
                            problem: &p,
                            pretrain: pre_refs.clone(),
                            finetune: fine_refs.clone(),
                            val: &val,
                            eta_pretrain: s.eta_pretrain,
                            eta_finetune: s.eta_finetune,
                        };
                        let start = InnerStart {
                            encoder: start_enc.clone(),
                            decoder: start_dec.clone(),
                            head: probe_head.clone(),
                        };
                        match m {
                            HyperMethod::Exact => exact_hypergrad(&plan, &start, &weights, AdjointMode::Full)?,
                            HyperMethod::ExactEncoderOnly => {
                                exact_hypergrad(&plan, &start, &weights, AdjointMode::EncoderOnly)?
                            }
                            _ => fd_hypergrad_plan(&plan, &start, &weights, cfg.fd_step)?,
                        }
                    }
                })
            } else {
                None
            };
            let row = LogRow {
                outer_step: k,
                pretrain_loss: po.losses.iter().sum::<f64>() / po.losses.len() as f64,
                val_auc,
                lambda: Vec::new(),
            };
            Ok((row, hg, po.encoder, po.decoder, ft.head))
        };
        let (mut row, hg, e, d, h) = step().map_err(|err| fail(err, &log))?;
        if let Some(hg) = hg {
            if let Some(w) = &hg.diagnostics.warning {
                warnings.push((k, w.clone()));
            }
            let mut g = hg.g_logits;
            hypergrads.push(g.clone());
            if cfg.normalize {
                let n = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if n > 0.0 {
                    g.iter_mut().for_each(|v| *v /= n);
                }
            }
            weights = update_lambda(&weights, &g, s.epsilon).map_err(|err| fail(err, &log))?;
        }
        row.lambda = weights.weights().to_vec();
        log.rows.push(row);
        enc = e;
        dec = d;
        if !cfg.reinit_head {
            head = h;
        }
    }
    Ok(NestedOutcome {
        encoder: enc,
        decoder: dec,
        weights,
        log,
        warnings,
        hypergrads,
    })
}

/// Nested pretraining followed by the final finetune on the primary task.
#[derive(Clone, Debug)]
pub struct AutoselectOutcome {
    pub nested: NestedOutcome,
    pub finetune: FinetuneResult,
}

impl AutoselectOutcome {
    pub fn weights(&self) -> &TaskWeights {
        &self.nested.weights
    }
}

/// Runs the outer loop on `data` (learning the weights when `learn` is set),
/// then finetunes a fresh head and the pretrained encoder.
pub fn autoselect_train(
    data: &TaskData<'_>,
    cfg: &MetaConfig,
    finetune: &FinetuneConfig,
    init: &ModelParams,
    weights: TaskWeights,
    learn: bool,
    seed: u64,
) -> Result<AutoselectOutcome, RunFailure> {
    let nested = nested_pretrain(data, cfg, init, weights, learn, seed)?;
    let dims = init.dims().map_err(|error| RunFailure {
        error,
        log: nested.log.clone(),
    })?;
    let head = fresh_head(dims, seed, "final_head", 0);
    let ft = final_finetune(data, &nested.encoder, &head, finetune, seed).map_err(|error| RunFailure {
        error,
        log: nested.log.clone(),
    })?;
    Ok(AutoselectOutcome { nested, finetune: ft })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{generate_cohort, preprocess, SynthConfig, WindowSpec, PRIMARY_TASK};

    pub(crate) fn tiny_data(n: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            n_patients: n,
            n_features: 3,
            relevant: vec![0],
            seed,
            window: WindowSpec::new(4, 2, 2),
            ..SynthConfig::default()
        };
        let mut c = generate_cohort(&cfg).unwrap();
        preprocess(&mut c).unwrap();
        Dataset::from_cohort(&c, cfg.window).unwrap()
    }

    fn splits(n: usize) -> Splits {
        let rows: Vec<usize> = (0..n).collect();
        Splits {
            pretrain: rows.clone(),
            train: rows[..n / 2].to_vec(),
            meta_val: rows[n / 2..].to_vec(),
            stop_val: rows[n / 2..].to_vec(),
            test: rows[n / 2..].to_vec(),
        }
    }

    fn cfg(outer: usize, eps: f64) -> MetaConfig {
        MetaConfig {
            schedule: LoopSchedule {
                n_pretrain: 3,
                n_finetune: 2,
                outer_steps: outer,
                eta_pretrain: 0.1,
                eta_finetune: 0.1,
                epsilon: eps,
            },
            batch_size: 8,
            method: HyperMethod::FirstOrder,
            warm_start: true,
            reinit_head: true,
            normalize: false,
            fd_step: 1e-4,
            hyper_batch: None,
        }
    }

    #[test]
    fn zero_epsilon_matches_frozen_weights() {
        let ds = tiny_data(40, 1);
        let data = TaskData {
            dataset: &ds,
            task: PRIMARY_TASK.into(),
            splits: splits(40),
        };
        let init = ModelParams::init(ModelDims::new(3, 4).unwrap(), 5);
        let a = nested_pretrain(&data, &cfg(4, 0.0), &init, TaskWeights::uniform(3), true, 5).unwrap();
        let b = nested_pretrain(&data, &cfg(4, 0.5), &init, TaskWeights::uniform(3), false, 5).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.log.rows.len(), 4);
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn learning_moves_weights_and_log_has_header() {
        let ds = tiny_data(40, 2);
        let data = TaskData {
            dataset: &ds,
            task: PRIMARY_TASK.into(),
            splits: splits(40),
        };
        let init = ModelParams::init(ModelDims::new(3, 4).unwrap(), 6);
        let mut c = cfg(3, 1.0);
        c.method = HyperMethod::PerCoordinate;
        c.normalize = true;
        let out = nested_pretrain(&data, &c, &init, TaskWeights::uniform(3), true, 6).unwrap();
        assert_ne!(out.weights, TaskWeights::uniform(3));
        let csv = out.log.to_csv();
        assert!(csv.starts_with("outer_step,pretrain_loss,val_auc,lambda_0,lambda_1,lambda_2\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn exact_method_refuses_large_traces() {
        let ds = tiny_data(30, 3);
        let data = TaskData {
            dataset: &ds,
            task: PRIMARY_TASK.into(),
            splits: splits(30),
        };
        let init = ModelParams::init(ModelDims::new(3, 16).unwrap(), 1);
        let mut c = cfg(2, 0.1);
        c.method = HyperMethod::Exact;
        let err = nested_pretrain(&data, &c, &init, TaskWeights::uniform(3), true, 1).unwrap_err();
        assert!(matches!(err.error, Error::TraceTooLarge(_)));
        assert!(err.log.rows.is_empty());
    }
}

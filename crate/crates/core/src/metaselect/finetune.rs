//! Final supervised phase with early stopping, and test-set scoring.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{auc_pr, auc_roc, DynamicsLog};
use crate::metaselect::problem::{finetune_eval, DIVERGENCE_LOSS};
use crate::metaselect::train::TaskData;
use crate::numcore::{ParamSet, RngStream};
use crate::seqmodel::{classification_loss, classify_sets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Lower bound on gradient steps, for tiny training sets.
    #[serde(default)]
    pub min_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Steps between validation checks.
    pub eval_every: usize,
    /// Checks without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    /// Return the parameters of the best check rather than the last step.
    #[serde(default = "yes")]
    pub restore_best: bool,
}

fn yes() -> bool {
    true
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, n_train: usize) -> usize {
        let per_epoch = n_train.div_ceil(self.batch_size);
        (self.epochs * per_epoch).max(self.min_steps)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub encoder: ParamSet,
    pub head: ParamSet,
    pub steps_run: usize,
    pub best_step: usize,
    /// Early-stopping score at the best check (AUC, or negative loss when AUC is undefined).
    pub best_score: f64,
    pub dynamics: DynamicsLog,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub loss: f64,
}

/// Scores a model on labelled rows.
pub fn evaluate(data: &TaskData<'_>, encoder: &ParamSet, head: &ParamSet, rows: &[usize]) -> Result<Scores> {
    let rows = data.dataset.labelled(&data.task, rows)?;
    if rows.is_empty() {
        return Err(Error::UndefinedMetric("no labelled rows to score"));
    }
    let batch = data.rows_batch(&rows, true)?;
    let labels = batch.labels.as_ref().unwrap();
    let probs = classify_sets(encoder, head, &batch.values, data.dataset.window.observation)?;
    Ok(Scores {
        auc_roc: auc_roc(&probs, labels)?,
        auc_pr: auc_pr(&probs, labels)?,
        loss: classification_loss(&probs, labels)?,
    })
}

fn stop_score(data: &TaskData<'_>, encoder: &ParamSet, head: &ParamSet) -> Result<f64> {
    let s = match evaluate(data, encoder, head, &data.splits.stop_val) {
        Ok(s) => s,
        Err(Error::UndefinedMetric(_)) => {
            let rows = data.dataset.labelled(&data.task, &data.splits.stop_val)?;
            let batch = data.rows_batch(&rows, true)?;
            let probs = classify_sets(encoder, head, &batch.values, data.dataset.window.observation)?;
            return Ok(-classification_loss(&probs, batch.labels.as_ref().unwrap())?);
        }
        Err(e) => return Err(e),
    };
    Ok(s.auc_roc)
}

/// Trains encoder and head on the primary task, shuffling the training rows
/// each epoch, with validation checks every `eval_every` steps.
pub fn final_finetune(
    data: &TaskData<'_>,
    encoder: &ParamSet,
    head: &ParamSet,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    let p = data.problem();
    let train = data.dataset.labelled(&data.task, &data.splits.train)?;
    if train.is_empty() {
        return Err(Error::Config("no labelled training rows".into()));
    }
    let total = cfg.steps_for(train.len());
    let use_val = !data.splits.stop_val.is_empty();
    let mut enc = encoder.clone();
    let mut hd = head.clone();
    let mut dynamics = DynamicsLog::default();
    let mut best = (f64::NEG_INFINITY, 0usize, enc.clone(), hd.clone());
    let mut stale = 0usize;
    let mut check = |step: usize, enc: &ParamSet, hd: &ParamSet, dynamics: &mut DynamicsLog| -> Result<bool> {
        if !use_val {
            return Ok(false);
        }
        let score = stop_score(data, enc, hd)?;
        dynamics.push(step, "stop_val", "score", score);
        if score > best.0 {
            best = (score, step, enc.clone(), hd.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        Ok(cfg.patience > 0 && stale > cfg.patience)
    };
    check(0, &enc, &hd, &mut dynamics)?;
    let mut step = 0;
    let mut epoch = 0u64;
    'outer: while step < total {
        let mut order = train.clone();
        order.shuffle(&mut RngStream::new(seed, "final_epoch", epoch).rng());
        epoch += 1;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            let batch = data.rows_batch(chunk, true)?;
            let e = finetune_eval(&p, &enc, &hd, &batch)?;
            if !e.loss.is_finite() || e.loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    phase: "finetune",
                    step,
                    loss: e.loss,
                });
            }
            dynamics.push(step, "train", "loss", e.loss);
            enc.axpy(-cfg.learning_rate, &e.grad_encoder);
            hd.axpy(-cfg.learning_rate, &e.grad_head);
            step += 1;
            if step % cfg.eval_every == 0 && check(step, &enc, &hd, &mut dynamics)? {
                break 'outer;
            }
        }
    }
    if use_val && step % cfg.eval_every != 0 {
        check(step, &enc, &hd, &mut dynamics)?;
    }
    let (best_score, best_step, best_enc, best_hd) = best;
    let (encoder, head) = if use_val && cfg.restore_best {
        (best_enc, best_hd)
    } else {
        (enc, hd)
    };
    Ok(FinetuneResult {
        encoder,
        head,
        steps_run: step,
        best_step,
        best_score,
        dynamics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{Dataset, WindowSpec, PRIMARY_TASK};
    use crate::metaselect::toys::{permute_labels, separable_dataset};
    use crate::metaselect::train::Splits;
    use crate::seqmodel::{fresh_head, ModelDims, ModelParams};

    fn data(ds: &Dataset) -> TaskData<'_> {
        let n = ds.len();
        let rows: Vec<usize> = (0..n).collect();
        let (train, rest) = rows.split_at(n / 2);
        let (val, test) = rest.split_at(rest.len() / 2);
        TaskData {
            dataset: ds,
            task: PRIMARY_TASK.into(),
            splits: Splits {
                pretrain: train.to_vec(),
                train: train.to_vec(),
                meta_val: val.to_vec(),
                stop_val: val.to_vec(),
                test: test.to_vec(),
            },
        }
    }

    fn cfg(min_steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            epochs: 0,
            min_steps,
            learning_rate: 0.5,
            batch_size: 16,
            eval_every: 10,
            patience: 5,
            restore_best: true,
        }
    }

    fn run(ds: &Dataset, steps: usize, seed: u64) -> Scores {
        let d = data(ds);
        let dims = ModelDims::new(3, 6).unwrap();
        let init = ModelParams::init(dims, seed);
        let head = fresh_head(dims, seed, "final_head", 0);
        let r = final_finetune(&d, &init.encoder, &head, &cfg(steps), seed).unwrap();
        assert!(r.steps_run <= steps);
        evaluate(&d, &r.encoder, &r.head, &d.splits.test).unwrap()
    }

    #[test]
    fn separable_toy_is_learned() {
        let ds = separable_dataset(200, 3, WindowSpec::new(4, 2, 2), 1).unwrap();
        assert!(run(&ds, 200, 1).auc_roc >= 0.95);
    }

    #[test]
    fn untrained_model_is_near_chance_on_permuted_labels() {
        let mut ds = separable_dataset(400, 3, WindowSpec::new(4, 2, 2), 2).unwrap();
        permute_labels(&mut ds, PRIMARY_TASK, 2).unwrap();
        let s = run(&ds, 100, 2);
        assert!((s.auc_roc - 0.5).abs() < 0.15, "{}", s.auc_roc);
    }

    #[test]
    fn zero_steps_keep_the_initial_model() {
        let ds = separable_dataset(100, 3, WindowSpec::new(4, 2, 2), 3).unwrap();
        let d = data(&ds);
        let dims = ModelDims::new(3, 6).unwrap();
        let init = ModelParams::init(dims, 3);
        let zero = fresh_head(dims, 3, "final_head", 0).zeros_like();
        let r = final_finetune(&d, &init.encoder, &zero, &cfg(0), 3).unwrap();
        assert_eq!(r.steps_run, 0);
        let s = evaluate(&d, &r.encoder, &r.head, &d.splits.test).unwrap();
        assert_eq!(s.auc_roc, 0.5);
        assert!((s.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

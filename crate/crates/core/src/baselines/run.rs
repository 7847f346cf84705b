//! Every arm is built from one [`ModelFactory`] and one [`TaskData`], and
//! ends in the same final finetune and test evaluation.

use serde::{Deserialize, Serialize};

use crate::baselines::arms::ArmKind;
use crate::datasynth::Dataset;
use crate::error::{Error, Result};
use crate::evalkit::{assign_splits, fraction_subset, DynamicsLog, Proportions, Role};
use crate::metaselect::problem::{finetune_eval, pretrain_eval, DIVERGENCE_LOSS};
use crate::metaselect::{
    autoselect_train, evaluate, final_finetune, sample_rows, AutoselectOutcome, FinetuneConfig, FinetuneResult,
    HyperMethod, LoopSchedule, MetaConfig, RunFailure, Scores, Splits, TaskData, TaskWeights, TrainingLog,
};
use crate::numcore::{ParamSet, RngStream};
use crate::seqmodel::{fresh_head, ModelDims, ModelParams};

/// Loss weights of the co-training arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotrainConfig {
    pub target_weight: f64,
    pub aux_weight: f64,
    /// Keep the co-trained head for the final finetune instead of drawing a new one.
    pub reuse_head: bool,
}

impl Default for CotrainConfig {
    fn default() -> Self {
        Self {
            target_weight: 10.0,
            aux_weight: 1.0,
            reuse_head: true,
        }
    }
}

/// Settings shared by every arm of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hidden: usize,
    pub meta: MetaConfig,
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub cotrain: CotrainConfig,
    pub n_folds: usize,
}

impl ExperimentConfig {
    /// Settings tuned for plain SGD on the default synthetic cohort: hidden
    /// size 16, schedule (100/50), rate 0.05 for both inner loops, weight step
    /// 0.1 on normalized hyper-gradients with a persistent probe head, and a
    /// final finetune of at least 500 steps at rate 0.02.
    pub fn calibrated() -> Self {
        Self {
            hidden: 16,
            meta: MetaConfig {
                schedule: LoopSchedule {
                    n_pretrain: 100,
                    n_finetune: 10,
                    outer_steps: 50,
                    eta_pretrain: 0.05,
                    eta_finetune: 0.05,
                    epsilon: 0.1,
                },
                batch_size: 32,
                method: HyperMethod::PerCoordinate,
                warm_start: true,
                reinit_head: false,
                normalize: true,
                fd_step: 1e-4,
                hyper_batch: Some(256),
            },
            finetune: FinetuneConfig {
                epochs: 5,
                min_steps: 500,
                learning_rate: 0.02,
                batch_size: 16,
                eval_every: 50,
                patience: 10,
                restore_best: true,
            },
            cotrain: CotrainConfig::default(),
            n_folds: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_folds == 0 || self.meta.batch_size == 0 {
            return Err(Error::Config("hidden size, folds and batch size must be positive".into()));
        }
        self.meta.schedule.validate()?;
        self.finetune.validate()
    }

    pub fn factory(&self, n_features: usize) -> Result<ModelFactory> {
        Ok(ModelFactory {
            dims: ModelDims::new(n_features, self.hidden)?,
        })
    }
}

/// The single constructor of model parameters for all arms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelFactory {
    pub dims: ModelDims,
}

impl ModelFactory {
    pub fn init(&self, seed: u64) -> ModelParams {
        ModelParams::init(self.dims, seed)
    }

    pub fn final_head(&self, seed: u64) -> ParamSet {
        fresh_head(self.dims, seed, "final_head", 0)
    }
}

/// Hash-based splits of `dataset` for one fold, with the labelled training
/// rows cut down to `fraction`. Pretraining uses every training-role row;
/// validation is halved into meta-validation and early-stopping sets.
pub fn prepare<'a>(dataset: &'a Dataset, task: &str, fold: usize, n_folds: usize, fraction: f64) -> Result<TaskData<'a>> {
    let assignment = assign_splits(&dataset.ids, n_folds, Proportions::default())?;
    let rows = |role| dataset.positions(&assignment.members(role, fold));
    let pretrain = rows(Role::Train)?;
    let labelled_train: Vec<String> = dataset
        .labelled(task, &pretrain)?
        .into_iter()
        .map(|i| dataset.ids[i].clone())
        .collect();
    if labelled_train.is_empty() {
        return Err(Error::Config(format!("no labelled training rows for task {task:?}")));
    }
    let train = dataset.positions(&fraction_subset(&labelled_train, fraction)?)?;
    let val = dataset.labelled(task, &rows(Role::Val)?)?;
    let (meta_val, stop_val): (Vec<_>, Vec<_>) = val.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let test = dataset.labelled(task, &rows(Role::Test)?)?;
    Ok(TaskData {
        dataset,
        task: task.to_string(),
        splits: Splits {
            pretrain,
            train,
            meta_val: meta_val.into_iter().map(|(_, r)| *r).collect(),
            stop_val: stop_val.into_iter().map(|(_, r)| *r).collect(),
            test,
        },
    })
}

/// Outcome of one arm on one fold.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: ArmKind,
    pub test: Scores,
    /// Outer-loop log of the nested arms.
    pub log: Option<TrainingLog>,
    pub weights: Option<TaskWeights>,
    /// Encoder before the final finetune.
    pub pretrained: ParamSet,
    pub decoder: Option<ParamSet>,
    pub encoder: ParamSet,
    pub head: ParamSet,
    pub dynamics: DynamicsLog,
    pub warnings: Vec<(usize, String)>,
    pub hypergrads: Vec<Vec<f64>>,
}

fn failure(error: Error) -> RunFailure {
    RunFailure {
        error,
        log: TrainingLog::default(),
    }
}

fn finish(
    arm: ArmKind,
    data: &TaskData<'_>,
    pretrained: ParamSet,
    ft: FinetuneResult,
    mut dynamics: DynamicsLog,
) -> Result<ArmResult, RunFailure> {
    let test = evaluate(data, &ft.encoder, &ft.head, &data.splits.test).map_err(failure)?;
    dynamics.rows.extend(ft.dynamics.rows);
    Ok(ArmResult {
        arm,
        test,
        log: None,
        weights: None,
        pretrained,
        decoder: None,
        encoder: ft.encoder,
        head: ft.head,
        dynamics,
        warnings: Vec::new(),
        hypergrads: Vec::new(),
    })
}

fn from_nested(arm: ArmKind, data: &TaskData<'_>, out: AutoselectOutcome) -> Result<ArmResult, RunFailure> {
    let log = out.nested.log.clone();
    let mut r = finish(arm, data, out.nested.encoder, out.finetune, DynamicsLog::default()).map_err(|f| RunFailure {
        error: f.error,
        log: log.clone(),
    })?;
    r.log = Some(log);
    r.weights = Some(out.nested.weights);
    r.decoder = Some(out.nested.decoder);
    r.warnings = out.nested.warnings;
    r.hypergrads = out.nested.hypergrads;
    Ok(r)
}

/// Encoder and head trained on the primary task only.
pub fn run_supervised(data: &TaskData<'_>, cfg: &ExperimentConfig, seed: u64) -> Result<ArmResult, RunFailure> {
    let f = cfg.factory(data.dataset.n_features).map_err(failure)?;
    let init = f.init(seed);
    let ft = final_finetune(data, &init.encoder, &f.final_head(seed), &cfg.finetune, seed).map_err(failure)?;
    finish(ArmKind::Supervised, data, init.encoder, ft, DynamicsLog::default())
}

fn run_nested(
    arm: ArmKind,
    data: &TaskData<'_>,
    cfg: &ExperimentConfig,
    weights: TaskWeights,
    learn: bool,
    seed: u64,
) -> Result<ArmResult, RunFailure> {
    let f = cfg.factory(data.dataset.n_features).map_err(failure)?;
    let out = autoselect_train(data, &cfg.meta, &cfg.finetune, &f.init(seed), weights, learn, seed)?;
    from_nested(arm, data, out)
}

/// Uniform-weight pretraining on every auxiliary task, then finetuning.
pub fn run_pretrain_all(data: &TaskData<'_>, cfg: &ExperimentConfig, seed: u64) -> Result<ArmResult, RunFailure> {
    run_nested(ArmKind::PretrainAll, data, cfg, TaskWeights::uniform(data.dataset.n_features), false, seed)
}

/// Learned task weights, then finetuning.
pub fn run_autoselect(data: &TaskData<'_>, cfg: &ExperimentConfig, seed: u64) -> Result<ArmResult, RunFailure> {
    run_nested(ArmKind::Autoselect, data, cfg, TaskWeights::uniform(data.dataset.n_features), true, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    Top,
    Down,
}

/// The `k` highest-ranked tasks, or all the others.
pub fn ablation_subset(weights: &TaskWeights, mode: AblationMode, k: usize) -> Result<Vec<usize>> {
    let n = weights.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k must be in 1..={n}, got {k}")));
    }
    let rank = weights.ranking();
    let mut subset = match mode {
        AblationMode::Top => rank[..k].to_vec(),
        AblationMode::Down => rank[k..].to_vec(),
    };
    if subset.is_empty() {
        return Err(Error::Config(format!("pretrain_down with k = {k} of {n} tasks leaves no tasks")));
    }
    subset.sort_unstable();
    Ok(subset)
}

/// Uniform pretraining restricted by the ranking of `weights`, then finetuning.
pub fn run_ablation(
    data: &TaskData<'_>,
    cfg: &ExperimentConfig,
    weights: &TaskWeights,
    mode: AblationMode,
    k: usize,
    seed: u64,
) -> Result<ArmResult, RunFailure> {
    if weights.len() != data.dataset.n_features {
        return Err(failure(Error::Config("weights do not match the feature count".into())));
    }
    let subset = ablation_subset(weights, mode, k).map_err(failure)?;
    let w = TaskWeights::uniform_over(weights.len(), &subset).map_err(failure)?;
    let arm = match mode {
        AblationMode::Top => ArmKind::PretrainTop,
        AblationMode::Down => ArmKind::PretrainDown,
    };
    run_nested(arm, data, cfg, w, false, seed)
}

/// Finetunes the pretrained encoder of a finished source run on the target task.
pub fn run_transfer(target: &TaskData<'_>, cfg: &ExperimentConfig, source: &ArmResult, seed: u64) -> Result<ArmResult, RunFailure> {
    let f = cfg.factory(target.dataset.n_features).map_err(failure)?;
    let expected = f.init(0).encoder;
    let shapes = |p: &ParamSet| p.tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
    if shapes(&source.pretrained) != shapes(&expected) {
        return Err(failure(Error::Config(
            "source encoder does not match the target feature count or hidden size".into(),
        )));
    }
    let ft = final_finetune(target, &source.pretrained, &f.final_head(seed), &cfg.finetune, seed).map_err(failure)?;
    let mut r = finish(ArmKind::Transfer, target, source.pretrained.clone(), ft, DynamicsLog::default())?;
    r.weights = source.weights.clone();
    Ok(r)
}

/// Gradient steps on `target_weight * l_c + aux_weight * l_p` for the
/// pretraining budget, both terms evaluated at the same parameters on one
/// unlabelled and one labelled batch, then finetuning. A zero weight skips
/// its term entirely.
pub fn run_cotrain(data: &TaskData<'_>, cfg: &ExperimentConfig, seed: u64) -> Result<ArmResult, RunFailure> {
    let f = cfg.factory(data.dataset.n_features).map_err(failure)?;
    let s = cfg.meta.schedule;
    let c = &cfg.cotrain;
    if data.splits.pretrain.is_empty() || data.splits.train.is_empty() {
        return Err(failure(Error::Config("pretrain and train splits must be non-empty".into())));
    }
    let p = data.problem();
    let init = f.init(seed);
    let lambda = TaskWeights::uniform(data.dataset.n_features);
    let (mut enc, mut dec, mut head) = (init.encoder, init.decoder, f.final_head(seed));
    let mut dynamics = DynamicsLog::default();
    for t in 0..s.pretrain_budget() {
        let mut step = || -> Result<()> {
            let aux = if c.aux_weight != 0.0 {
                let rows = sample_rows(RngStream::new(seed, "pretrain_batch", t as u64), &data.splits.pretrain, cfg.meta.batch_size);
                Some(pretrain_eval(&p, &enc, &dec, lambda.weights(), &data.rows_batch(&rows, false)?)?)
            } else {
                None
            };
            let target = if c.target_weight != 0.0 {
                let rows = sample_rows(RngStream::new(seed, "cotrain_batch", t as u64), &data.splits.train, cfg.meta.batch_size);
                Some(finetune_eval(&p, &enc, &head, &data.rows_batch(&rows, true)?)?)
            } else {
                None
            };
            let mut loss = 0.0;
            if let Some(e) = &aux {
                loss += c.aux_weight * e.loss;
                dynamics.push(t, "cotrain", "aux_loss", e.loss);
                enc.axpy(-s.eta_pretrain * c.aux_weight, &e.grad_encoder);
                dec.axpy(-s.eta_pretrain * c.aux_weight, &e.grad_decoder);
            }
            if let Some(e) = &target {
                loss += c.target_weight * e.loss;
                dynamics.push(t, "cotrain", "target_loss", e.loss);
                enc.axpy(-s.eta_pretrain * c.target_weight, &e.grad_encoder);
                head.axpy(-s.eta_pretrain * c.target_weight, &e.grad_head);
            }
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    phase: "cotrain",
                    step: t,
                    loss,
                });
            }
            dynamics.push(t, "cotrain", "loss", loss);
            Ok(())
        };
        step().map_err(failure)?;
    }
    let start_head = if c.reuse_head { head } else { f.final_head(seed) };
    let ft = final_finetune(data, &enc, &start_head, &cfg.finetune, seed).map_err(failure)?;
    let mut r = finish(ArmKind::Cotrain, data, enc, ft, dynamics)?;
    r.decoder = Some(dec);
    Ok(r)
}

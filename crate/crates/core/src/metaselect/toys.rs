//! Small bilevel problems used as hyper-gradient oracles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datasynth::{Dataset, Label, WindowSpec, PRIMARY_TASK};
use crate::error::Result;
use crate::metaselect::hypergrad::{
    exact_hypergrad, fd_hypergrad_plan, hypergrad_gap, AdjointMode, InnerPlan, InnerStart,
};
use crate::metaselect::problem::{Bilevel, SeqProblem};
use crate::metaselect::weights::TaskWeights;
use crate::numcore::{ParamSet, RngStream, Tape, Tensor, Var};
use crate::seqmodel::{ModelDims, ModelParams, PretrainLossVars, SeqBatch};

fn normal(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Column `f` of an `[rows, n]` one-hot placement matrix `e_f^T`.
fn one_hot_row(f: usize, n: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[f] = 1.0;
    Tensor::matrix(1, n, v).expect("row")
}

/// Linear least squares in a shared weight vector `theta`.
///
/// Task `f` has loss `|A_f theta - y_f|^2 / m`, the primary loss is
/// `|B theta - z|^2 / m_b` on train and `|C theta - v|^2 / m_c` on
/// validation. There is no decoder and no head.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub n: usize,
    pub a: Vec<Tensor>,
    pub y: Tensor,
    pub b: Tensor,
    pub z: Tensor,
    pub c: Tensor,
    pub v: Tensor,
    pub theta0: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsqSplit {
    Train,
    Val,
}

impl LeastSquares {
    pub fn fixture(seed: u64) -> Self {
        let mut rng = RngStream::new(seed, "toy_lsq", 0).rng();
        let (n, m, tasks) = (3, 4, 2);
        let a = (0..tasks)
            .map(|_| Tensor::matrix(m, n, normal(&mut rng, m * n, 1.0)).unwrap())
            .collect();
        let y = Tensor::matrix(m, tasks, normal(&mut rng, m * tasks, 1.0)).unwrap();
        let b = Tensor::matrix(5, n, normal(&mut rng, 5 * n, 1.0)).unwrap();
        let z = Tensor::matrix(5, 1, normal(&mut rng, 5, 1.0)).unwrap();
        let c = Tensor::matrix(4, n, normal(&mut rng, 4 * n, 1.0)).unwrap();
        let v = Tensor::matrix(4, 1, normal(&mut rng, 4, 1.0)).unwrap();
        let theta0 = normal(&mut rng, n, 0.5);
        Self {
            n,
            a,
            y,
            b,
            z,
            c,
            v,
            theta0,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.a.len()
    }

    pub fn init(&self) -> (ParamSet, ParamSet, ParamSet) {
        let theta = Tensor::matrix(self.n, 1, self.theta0.clone()).unwrap();
        (ParamSet::new(vec![theta]), ParamSet::default(), ParamSet::default())
    }

    fn residual_grad(m: &Tensor, theta: &[f64], target: &[f64]) -> Vec<f64> {
        // (2/rows) M^T (M theta - target)
        let (rows, cols) = (m.rows(), m.cols());
        let d = m.data();
        let r: Vec<f64> = (0..rows)
            .map(|i| (0..cols).map(|j| d[i * cols + j] * theta[j]).sum::<f64>() - target[i])
            .collect();
        (0..cols)
            .map(|j| 2.0 / rows as f64 * (0..rows).map(|i| d[i * cols + j] * r[i]).sum::<f64>())
            .collect()
    }

    fn task_target(&self, f: usize) -> Vec<f64> {
        let k = self.n_tasks();
        (0..self.y.rows()).map(|i| self.y.data()[i * k + f]).collect()
    }

    /// `sum_f lambda_f grad l_f(theta)`, by hand.
    pub fn pretrain_gradient(&self, theta: &[f64], lambda: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for (f, a) in self.a.iter().enumerate() {
            let gf = Self::residual_grad(a, theta, &self.task_target(f));
            for (x, y) in g.iter_mut().zip(gf) {
                *x += lambda[f] * y;
            }
        }
        g
    }

    /// Hand-derived `dL/dlambda` for one pretraining step then one finetuning step:
    ///
    /// `theta_1 = theta_0 - eta_p sum_f lambda_f grad l_f(theta_0)`,
    /// `theta_2 = theta_1 - eta_c (2/m_b) B^T (B theta_1 - z)`,
    /// `dL/dlambda_f = [(2/m_c) C^T (C theta_2 - v)]^T (I - eta_c (2/m_b) B^T B) (-eta_p grad l_f(theta_0))`.
    pub fn closed_form_hypergrad(&self, lambda: &[f64], eta_p: f64, eta_c: f64) -> Vec<f64> {
        let n = self.n;
        let t0 = &self.theta0;
        let g0 = self.pretrain_gradient(t0, lambda);
        let t1: Vec<f64> = t0.iter().zip(&g0).map(|(t, g)| t - eta_p * g).collect();
        let gb = Self::residual_grad(&self.b, &t1, self.z.data());
        let t2: Vec<f64> = t1.iter().zip(&gb).map(|(t, g)| t - eta_c * g).collect();
        let gc = Self::residual_grad(&self.c, &t2, self.v.data());
        // row vector gc^T (I - eta_c (2/m_b) B^T B)
        let (mb, bd) = (self.b.rows(), self.b.data());
        let btb = |i: usize, j: usize| (0..mb).map(|r| bd[r * n + i] * bd[r * n + j]).sum::<f64>();
        let row: Vec<f64> = (0..n)
            .map(|j| gc[j] - eta_c * 2.0 / mb as f64 * (0..n).map(|i| gc[i] * btb(i, j)).sum::<f64>())
            .collect();
        (0..self.n_tasks())
            .map(|f| {
                let gf = Self::residual_grad(&self.a[f], t0, &self.task_target(f));
                -eta_p * row.iter().zip(&gf).map(|(r, g)| r * g).sum::<f64>()
            })
            .collect()
    }

    fn mse(tape: &mut Tape, m: &Tensor, theta: Var, target: &Tensor) -> Var {
        let mv = tape.constant(m.clone());
        let pred = tape.matmul(mv, theta);
        let loss = tape.masked_mse(pred, target.clone(), Tensor::full(target.shape(), 1.0));
        tape.sum(loss)
    }
}

impl Bilevel for LeastSquares {
    type Pretrain = ();
    type Labelled = LsqSplit;

    fn pretrain_loss(&self, tape: &mut Tape, encoder: &[Var], _decoder: &[Var], lambda: Var, _batch: &()) -> PretrainLossVars {
        let k = self.n_tasks();
        let mut pred = None;
        for (f, a) in self.a.iter().enumerate() {
            let av = tape.constant(a.clone());
            let col = tape.matmul(av, encoder[0]);
            let place = tape.constant(one_hot_row(f, k));
            let placed = tape.matmul(col, place);
            pred = Some(match pred {
                None => placed,
                Some(p) => tape.add(p, placed),
            });
        }
        let per_task = tape.masked_mse(pred.unwrap(), self.y.clone(), Tensor::full(self.y.shape(), 1.0));
        let loss = tape.dot(lambda, per_task);
        PretrainLossVars { per_task, loss }
    }

    fn finetune_loss(&self, tape: &mut Tape, encoder: &[Var], _head: &[Var], batch: &LsqSplit) -> Var {
        match batch {
            LsqSplit::Train => Self::mse(tape, &self.b, encoder[0], &self.z),
            LsqSplit::Val => Self::mse(tape, &self.c, encoder[0], &self.v),
        }
    }
}

/// One tanh layer shared by a linear multi-output forecaster and a logistic head.
#[derive(Clone, Debug)]
pub struct TinyMlp {
    pub inputs: usize,
    pub hidden: usize,
    pub tasks: usize,
    pub seed: u64,
    pub pretrain_batches: Vec<MlpPretrain>,
    pub labelled_batches: Vec<MlpLabelled>,
    pub val: MlpLabelled,
}

#[derive(Clone, Debug)]
pub struct MlpPretrain {
    pub x: Tensor,
    pub y: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct MlpLabelled {
    pub x: Tensor,
    pub labels: Vec<f64>,
}

impl TinyMlp {
    pub fn fixture(seed: u64, tasks: usize) -> Self {
        let mut rng = RngStream::new(seed, "toy_mlp", 0).rng();
        let (inputs, hidden, rows) = (3, 4, 6);
        let dir = normal(&mut rng, inputs, 1.0);
        let mut pretrain_batches = Vec::new();
        for _ in 0..4 {
            let x = normal(&mut rng, rows * inputs, 1.0);
            let y = normal(&mut rng, rows * tasks, 1.0);
            let mask: Vec<f64> = (0..rows * tasks)
                .map(|i| if i < tasks || rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 })
                .collect();
            pretrain_batches.push(MlpPretrain {
                x: Tensor::matrix(rows, inputs, x).unwrap(),
                y: Tensor::matrix(rows, tasks, y).unwrap(),
                mask: Tensor::matrix(rows, tasks, mask).unwrap(),
            });
        }
        let labelled = |rng: &mut rand_chacha::ChaCha8Rng| {
            let x = normal(rng, rows * inputs, 1.0);
            let mut labels: Vec<f64> = (0..rows)
                .map(|i| {
                    let s: f64 = (0..inputs).map(|j| x[i * inputs + j] * dir[j]).sum();
                    f64::from(s > 0.0)
                })
                .collect();
            labels[0] = 1.0 - labels[1];
            MlpLabelled {
                x: Tensor::matrix(rows, inputs, x).unwrap(),
                labels,
            }
        };
        let labelled_batches = (0..4).map(|_| labelled(&mut rng)).collect();
        let val = labelled(&mut rng);
        Self {
            inputs,
            hidden,
            tasks,
            seed,
            pretrain_batches,
            labelled_batches,
            val,
        }
    }

    pub fn init(&self) -> (ParamSet, ParamSet, ParamSet) {
        let mut rng = RngStream::new(self.seed, "toy_mlp_init", 0).rng();
        let (i, h, f) = (self.inputs, self.hidden, self.tasks);
        let mut m = |r, c| Tensor::matrix(r, c, normal(&mut rng, r * c, 0.5)).unwrap();
        let enc = ParamSet::new(vec![m(i, h), Tensor::vector(vec![0.1; h])]);
        let dec = ParamSet::new(vec![m(h, f), Tensor::vector(vec![0.0; f])]);
        let head = ParamSet::new(vec![m(h, 1), Tensor::vector(vec![0.0])]);
        (enc, dec, head)
    }

    fn hidden(tape: &mut Tape, encoder: &[Var], x: &Tensor) -> Var {
        let xv = tape.constant(x.clone());
        let pre = tape.matmul(xv, encoder[0]);
        let pre = tape.add_bias(pre, encoder[1]);
        tape.tanh(pre)
    }
}

impl Bilevel for TinyMlp {
    type Pretrain = MlpPretrain;
    type Labelled = MlpLabelled;

    fn pretrain_loss(&self, tape: &mut Tape, encoder: &[Var], decoder: &[Var], lambda: Var, batch: &MlpPretrain) -> PretrainLossVars {
        let h = Self::hidden(tape, encoder, &batch.x);
        let out = tape.matmul(h, decoder[0]);
        let out = tape.add_bias(out, decoder[1]);
        let per_task = tape.masked_mse(out, batch.y.clone(), batch.mask.clone());
        let loss = tape.dot(lambda, per_task);
        PretrainLossVars { per_task, loss }
    }

    fn finetune_loss(&self, tape: &mut Tape, encoder: &[Var], head: &[Var], batch: &MlpLabelled) -> Var {
        let h = Self::hidden(tape, encoder, &batch.x);
        let logit = tape.matmul(h, head[0]);
        let logit = tape.add_bias(logit, head[1]);
        let p = tape.sigmoid(logit);
        tape.log_loss(p, batch.labels.clone(), crate::seqmodel::PROB_CLAMP)
    }
}

/// Random tiny sequence batch; both classes present when labelled.
pub fn random_seq_batch(rng: &mut impl Rng, b: usize, steps: usize, f: usize, labelled: bool) -> SeqBatch {
    let n = b * steps * f;
    let values = Tensor::new(vec![b, steps, f], normal(rng, n, 1.0)).unwrap();
    let mask: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<f64>() < 0.8)).collect();
    let labels = labelled.then(|| (0..b).map(|i| (i % 2) as f64).collect());
    SeqBatch::new(values, Tensor::new(vec![b, steps, f], mask).unwrap(), labels).unwrap()
}

/// Copies channel `src` onto `dst` in every input-facing and output-facing
/// parameter, so the two channels are exchangeable.
pub fn tie_channels(params: &mut ModelParams, src: usize, dst: usize) {
    for set in [&mut params.encoder, &mut params.decoder] {
        let w = &mut set.0[0];
        let cols = w.cols();
        let row: Vec<f64> = w.data()[src * cols..(src + 1) * cols].to_vec();
        w.data_mut()[dst * cols..(dst + 1) * cols].copy_from_slice(&row);
    }
    let w_out = &mut params.decoder.0[3];
    let (rows, cols) = (w_out.rows(), w_out.cols());
    for r in 0..rows {
        let v = w_out.data()[r * cols + src];
        w_out.data_mut()[r * cols + dst] = v;
    }
    let b_out = &mut params.decoder.0[4];
    let v = b_out.data()[src];
    b_out.data_mut()[dst] = v;
}

/// Copies channel `src` onto `dst` in a batch.
pub fn duplicate_channel(batch: &SeqBatch, src: usize, dst: usize) -> SeqBatch {
    let f = batch.features();
    let copy = |t: &Tensor| {
        let mut t = t.clone();
        let d = t.data_mut();
        for row in 0..d.len() / f {
            d[row * f + dst] = d[row * f + src];
        }
        t
    };
    SeqBatch::new(copy(&batch.values), copy(&batch.observed_mask), batch.labels.clone()).unwrap()
}

/// Dense grids where channel 0 holds `+1` for positives and `-1` for
/// negatives at every step and the other channels are standard normal noise.
/// The task is named `primary`.
pub fn separable_dataset(n: usize, features: usize, window: WindowSpec, seed: u64) -> Result<Dataset> {
    let mut rng = RngStream::new(seed, "separable", 0).rng();
    let steps = window.grid_steps();
    let mut values = Vec::with_capacity(n * steps * features);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_bool(0.5);
        labels.push(if y { Label::Positive } else { Label::Negative });
        for _ in 0..steps {
            for f in 0..features {
                values.push(if f == 0 {
                    if y { 1.0 } else { -1.0 }
                } else {
                    rng.sample::<f64, _>(StandardNormal)
                });
            }
        }
    }
    let mask = vec![1.0; values.len()];
    let ids = (0..n).map(|i| format!("s{i:06}")).collect();
    Dataset::from_grids(window, features, ids, values, mask, BTreeMap::from([(PRIMARY_TASK.to_string(), labels)]))
}

/// Shuffles one task's labels across rows.
pub fn permute_labels(dataset: &mut Dataset, task: &str, seed: u64) -> Result<()> {
    let mut labels = (0..dataset.len()).map(|i| dataset.label(task, i)).collect::<Result<Vec<_>>>()?;
    labels.shuffle(&mut RngStream::new(seed, "permute_labels", 0).rng());
    dataset.set_labels(task, labels)
}


/// A complete inner procedure with its starting point and weights.
pub struct OracleFixture<P: Bilevel> {
    pub name: &'static str,
    pub problem: P,
    pub start: InnerStart,
    pub weights: TaskWeights,
    pub pretrain: Vec<P::Pretrain>,
    pub finetune: Vec<P::Labelled>,
    pub val: P::Labelled,
    pub eta_pretrain: f64,
    pub eta_finetune: f64,
}

impl<P: Bilevel> OracleFixture<P> {
    pub fn plan(&self) -> InnerPlan<'_, P> {
        InnerPlan {
            problem: &self.problem,
            pretrain: self.pretrain.iter().collect(),
            finetune: self.finetune.iter().collect(),
            val: &self.val,
            eta_pretrain: self.eta_pretrain,
            eta_finetune: self.eta_finetune,
        }
    }
}

pub fn lsq_fixture(seed: u64, n_pretrain: usize, n_finetune: usize) -> OracleFixture<LeastSquares> {
    let problem = LeastSquares::fixture(seed);
    let (encoder, decoder, head) = problem.init();
    OracleFixture {
        name: if n_pretrain == 1 && n_finetune == 1 {
            "least_squares"
        } else {
            "least_squares_unrolled"
        },
        problem,
        start: InnerStart { encoder, decoder, head },
        weights: TaskWeights::from_logits(vec![0.3, -0.2]).unwrap(),
        pretrain: vec![(); n_pretrain],
        finetune: vec![LsqSplit::Train; n_finetune],
        val: LsqSplit::Val,
        eta_pretrain: 0.1,
        eta_finetune: 0.05,
    }
}

pub fn mlp_fixture(seed: u64) -> OracleFixture<TinyMlp> {
    let problem = TinyMlp::fixture(seed, 3);
    let (encoder, decoder, head) = problem.init();
    OracleFixture {
        name: "mlp_coupled",
        start: InnerStart { encoder, decoder, head },
        weights: TaskWeights::from_logits(vec![0.4, -0.3, 0.1]).unwrap(),
        pretrain: problem.pretrain_batches[..3].to_vec(),
        finetune: problem.labelled_batches[..2].to_vec(),
        val: problem.val.clone(),
        problem,
        eta_pretrain: 0.3,
        eta_finetune: 0.3,
    }
}

pub struct SeqFixtureSpec {
    pub name: &'static str,
    pub features: usize,
    pub hidden: usize,
    pub observation: usize,
    pub horizon: usize,
    pub batch: usize,
    pub n_pretrain: usize,
    pub n_finetune: usize,
    /// Make channel 1 a copy of channel 0, in data and parameters.
    pub duplicate: bool,
}

pub fn seq_fixture(seed: u64, spec: &SeqFixtureSpec) -> OracleFixture<SeqProblem> {
    let mut rng = RngStream::new(seed, "toy_seq", 0).rng();
    let steps = spec.observation + spec.horizon;
    let dims = ModelDims::new(spec.features, spec.hidden).unwrap();
    let mut params = ModelParams::init(dims, seed);
    let fix = |b: SeqBatch| if spec.duplicate { duplicate_channel(&b, 0, 1) } else { b };
    let pretrain = (0..spec.n_pretrain)
        .map(|_| fix(random_seq_batch(&mut rng, spec.batch, steps, spec.features, false)))
        .collect();
    let finetune = (0..spec.n_finetune)
        .map(|_| fix(random_seq_batch(&mut rng, spec.batch, steps, spec.features, true)))
        .collect();
    let val = fix(random_seq_batch(&mut rng, spec.batch, steps, spec.features, true));
    if spec.duplicate {
        tie_channels(&mut params, 0, 1);
    }
    let logits: Vec<f64> = if spec.duplicate {
        (0..spec.features).map(|f| if f < 2 { 0.2 } else { -0.1 * f as f64 }).collect()
    } else {
        normal(&mut rng, spec.features, 0.3)
    };
    OracleFixture {
        name: spec.name,
        problem: SeqProblem {
            observation: spec.observation,
            horizon: spec.horizon,
        },
        start: InnerStart {
            encoder: params.encoder,
            decoder: params.decoder,
            head: params.head,
        },
        weights: TaskWeights::from_logits(logits).unwrap(),
        pretrain,
        finetune,
        val,
        eta_pretrain: 0.5,
        eta_finetune: 0.5,
    }
}

pub const SEQ_FIXTURES: [SeqFixtureSpec; 3] = [
    SeqFixtureSpec {
        name: "seq_small",
        features: 2,
        hidden: 3,
        observation: 3,
        horizon: 2,
        batch: 3,
        n_pretrain: 2,
        n_finetune: 2,
        duplicate: false,
    },
    SeqFixtureSpec {
        name: "seq_full_trace",
        features: 4,
        hidden: 8,
        observation: 4,
        horizon: 2,
        batch: 4,
        n_pretrain: 5,
        n_finetune: 5,
        duplicate: false,
    },
    SeqFixtureSpec {
        name: "seq_duplicated_tasks",
        features: 3,
        hidden: 4,
        observation: 4,
        horizon: 2,
        batch: 4,
        n_pretrain: 3,
        n_finetune: 2,
        duplicate: true,
    },
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleOptions {
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub fd_step: f64,
    /// Adds a deliberate error to the exact gradient, to exercise failure reporting.
    pub inject_fault: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            rel_tol: 3e-3,
            abs_floor: 1e-6,
            fd_step: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub params: usize,
    pub steps: usize,
    pub exact: Vec<f64>,
    pub fd: Vec<f64>,
    pub gap: f64,
    pub pass: bool,
}

pub fn check_fixture<P: Bilevel>(fx: &OracleFixture<P>, opts: &OracleOptions) -> Result<OracleReport> {
    let plan = fx.plan();
    let mut exact = exact_hypergrad(&plan, &fx.start, &fx.weights, AdjointMode::Full)?.g_logits;
    if opts.inject_fault {
        exact[0] += 10.0 * opts.rel_tol * exact[0].abs().max(opts.abs_floor) + opts.abs_floor;
    }
    let fd = fd_hypergrad_plan(&plan, &fx.start, &fx.weights, opts.fd_step)?.g_logits;
    let gap = hypergrad_gap(&exact, &fd, opts.abs_floor);
    Ok(OracleReport {
        name: fx.name.to_string(),
        params: fx.start.numel(),
        steps: fx.pretrain.len() + fx.finetune.len(),
        exact,
        fd,
        gap,
        pass: gap <= opts.rel_tol,
    })
}

/// Exact versus finite-difference hyper-gradients on every fixture.
pub fn oracle_suite(seed: u64, opts: &OracleOptions) -> Result<Vec<OracleReport>> {
    let mut out = vec![
        check_fixture(&lsq_fixture(seed, 1, 1), opts)?,
        check_fixture(&lsq_fixture(seed, 4, 3), opts)?,
        check_fixture(&mlp_fixture(seed), opts)?,
    ];
    for spec in &SEQ_FIXTURES {
        out.push(check_fixture(&seq_fixture(seed, spec), opts)?);
    }
    Ok(out)
}


#[cfg(test)]
mod suite {
    use super::*;

    #[test]
    fn every_fixture_agrees_with_finite_differences() {
        for seed in [0, 1] {
            for r in oracle_suite(seed, &OracleOptions::default()).unwrap() {
                assert!(r.params <= 2000 && r.steps <= 10);
                assert!(r.pass, "{} seed {seed}: gap {:.2e}\n exact {:?}\n fd    {:?}", r.name, r.gap, r.exact, r.fd);
            }
        }
    }
}

//! Autodiff against central differences for every tape primitive and for
//! both losses end to end, on toy shapes with entries in `[-2, 2]`.

use rand::Rng;

use crate::error::Result;
use crate::numcore::{fd_grad5, grad, max_rel_error, RngStream, Tape, Tensor, Var};
use crate::seqmodel::model::{classification_objective, pretrain_objective, SeqBatch, PROB_CLAMP};
use crate::seqmodel::params::{ModelDims, ModelParams};

pub const GRAD_TOL: f64 = 1e-4;
/// Step of the five-point stencil. The two-point difference at `1e-5` has an
/// error floor near `1e-11`, which is above `GRAD_TOL` relative to the
/// `1e-7`-sized gradients that reach early recurrent steps.
pub const FD_STEP: f64 = 1e-3;

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel: f64,
    pub pass: bool,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random linear read-out so every output coordinate carries a generic weight.
fn readout(t: &mut Tape, x: Var, w: &Tensor) -> Var {
    let c = t.constant(w.clone());
    let p = t.mul(x, c);
    t.sum(p)
}

fn toy_batch(rng: &mut impl Rng, b: usize, steps: usize, f: usize) -> SeqBatch {
    let values = uniform(rng, &[b, steps, f], -2.0, 2.0);
    let mask = Tensor::new(
        vec![b, steps, f],
        (0..b * steps * f).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect(),
    )
    .unwrap();
    let labels = (0..b).map(|i| (i % 2) as f64).collect();
    SeqBatch::new(values, mask, Some(labels)).unwrap()
}

fn case(name: &'static str, rng: &mut impl Rng) -> (Vec<Tensor>, Objective) {
    let m = rng.random_range(1..=4);
    let n = rng.random_range(1..=4);
    let k = rng.random_range(1..=4);
    let mn = uniform(rng, &[m, n], -2.0, 2.0);
    let w = uniform(rng, &[m, n], -1.0, 1.0);
    match name {
        "matmul" => {
            let b = uniform(rng, &[n, k], -2.0, 2.0);
            let w = uniform(rng, &[m, k], -1.0, 1.0);
            (vec![mn, b], Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1]);
                readout(t, y, &w)
            }))
        }
        "add_bias" => {
            let bias = uniform(rng, &[n], -2.0, 2.0);
            (vec![mn, bias], Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1]);
                readout(t, y, &w)
            }))
        }
        "add" | "sub" | "mul" => {
            let other = uniform(rng, &[m, n], -2.0, 2.0);
            (vec![mn, other], Box::new(move |t, v| {
                let y = match name {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                };
                readout(t, y, &w)
            }))
        }
        "scale" | "sigmoid" | "tanh" | "square" => (vec![mn], Box::new(move |t, v| {
            let y = match name {
                "scale" => t.scale(v[0], -1.7),
                "sigmoid" => t.sigmoid(v[0]),
                "tanh" => t.tanh(v[0]),
                _ => t.square(v[0]),
            };
            readout(t, y, &w)
        })),
        "sum" => (vec![mn], Box::new(|t, v| {
            let s = t.sum(v[0]);
            t.square(s)
        })),
        "slice_cols" => {
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            let w = uniform(rng, &[m, len], -1.0, 1.0);
            (vec![mn], Box::new(move |t, v| {
                let y = t.slice_cols(v[0], start, len);
                readout(t, y, &w)
            }))
        }
        "stack" => {
            let other = uniform(rng, &[m, n], -2.0, 2.0);
            let w = uniform(rng, &[m, 2, n], -1.0, 1.0);
            (vec![mn, other], Box::new(move |t, v| {
                let y = t.stack(vec![v[0], v[1]]);
                readout(t, y, &w)
            }))
        }
        "dot" | "pick" => {
            let a = uniform(rng, &[n], -2.0, 2.0);
            let b = uniform(rng, &[n], -2.0, 2.0);
            let idx = rng.random_range(0..n);
            (vec![a, b], Box::new(move |t, v| {
                let d = t.dot(v[0], v[1]);
                let p = t.pick(v[0], idx);
                let y = if name == "dot" { d } else { t.mul(p, p) };
                t.mul(y, d)
            }))
        }
        "masked_mse" => {
            let target = uniform(rng, &[m, 3, n], -2.0, 2.0);
            let mask = Tensor::new(vec![m, 3, n], (0..m * 3 * n).map(|_| f64::from(u8::from(rng.random_bool(0.6)))).collect())
                .unwrap();
            let pred = uniform(rng, &[m, 3, n], -2.0, 2.0);
            let wf = uniform(rng, &[n], -1.0, 1.0);
            (vec![pred], Box::new(move |t, v| {
                let y = t.masked_mse(v[0], target.clone(), mask.clone());
                readout(t, y, &wf)
            }))
        }
        "log_loss" => {
            let logits = uniform(rng, &[m, 1], -2.0, 2.0);
            let labels: Vec<f64> = (0..m).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            (vec![logits], Box::new(move |t, v| {
                let p = t.sigmoid(v[0]);
                t.log_loss(p, labels.clone(), PROB_CLAMP)
            }))
        }
        "pretrain_loss" | "classification_loss" => {
            let f = rng.random_range(1..=4);
            let d = rng.random_range(1..=8);
            let steps = rng.random_range(2..=6);
            let tau = rng.random_range(1..steps);
            let horizon = steps - tau;
            let b = rng.random_range(1..=4);
            let batch = toy_batch(rng, b, steps, f);
            let dims = ModelDims::new(f, d).unwrap();
            let init = ModelParams::init(dims, rng.random());
            let lambda = uniform(rng, &[f], 0.1, 1.0);
            let ne = init.encoder.len();
            if name == "pretrain_loss" {
                let nd = init.decoder.len();
                let mut params = init.encoder.tensors().to_vec();
                params.extend(init.decoder.tensors().iter().cloned());
                (params, Box::new(move |t, v| {
                    let lam = t.constant(lambda.clone());
                    pretrain_objective(t, &v[..ne], &v[ne..ne + nd], lam, &batch, tau, horizon).loss
                }))
            } else {
                let mut params = init.encoder.tensors().to_vec();
                params.extend(init.head.tensors().iter().map(|h| uniform(&mut *rng, h.shape(), -2.0, 2.0)));
                (params, Box::new(move |t, v| classification_objective(t, &v[..ne], &v[ne..], &batch, steps)))
            }
        }
        other => unreachable!("unknown case {other}"),
    }
}

pub const CASES: [&str; 18] = [
    "matmul",
    "add_bias",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "square",
    "sum",
    "slice_cols",
    "stack",
    "dot",
    "pick",
    "masked_mse",
    "log_loss",
    "pretrain_loss",
    "classification_loss",
];

/// Worst relative error per case over `seeds` random instances.
pub fn gradient_suite(seeds: usize) -> Result<Vec<GradReport>> {
    CASES
        .iter()
        .map(|&name| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                let mut rng = RngStream::new(s as u64, "gradcheck", 0).derive(name, 0).rng();
                let (params, f) = case(name, &mut rng);
                let exact = grad(&f, &params)?;
                let approx = fd_grad5(&f, &params, FD_STEP)?;
                worst = worst.max(max_rel_error(&exact, &approx));
            }
            Ok(GradReport {
                name,
                seeds,
                max_rel: worst,
                pass: worst <= GRAD_TOL,
            })
        })
        .collect()
}

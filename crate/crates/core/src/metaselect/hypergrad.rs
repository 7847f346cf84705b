//! Hyper-gradients of the validation loss with respect to the task weights.
//!
//! Three estimators share one unrolled inner procedure ([`InnerPlan`]):
//!
//! - first order: factors `a`, `b`, `c` from the final iterates only;
//! - exact: reverse-mode adjoints through every stored inner iterate, with
//!   Hessian-vector products taken by differencing exact gradients;
//! - finite difference: central differences of the whole unrolled run in
//!   logit space, used as the oracle for the exact path.
//!
//! The exact path propagates adjoints for every block that is trained in a
//! phase (encoder and decoder while pretraining, encoder and head while
//! finetuning). [`AdjointMode::EncoderOnly`] keeps only the encoder block, as
//! in the published recursion; it agrees with the full adjoint only when the
//! decoder and head do not couple back into the encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metaselect::problem::{finetune_eval, inner_finetune, pretrain_eval, per_task_losses, Bilevel};
use crate::metaselect::weights::TaskWeights;
use crate::numcore::{hvp, ParamSet, Tape, Tensor, Var};

/// Largest model the exact path will trace.
pub const MAX_TRACE_PARAMS: usize = 2000;
/// Largest `N_P + N_S` the exact path will trace.
pub const MAX_TRACE_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMethod {
    /// Scalar contraction `s = sum_j c_j / a_j` times `b`.
    FirstOrder,
    /// `g_f = -eta_p <c, d a / d lambda_f>`: the last pretraining step's
    /// dependence on each task, finetuning treated as the identity.
    PerCoordinate,
    Exact,
    ExactEncoderOnly,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjointMode {
    Full,
    EncoderOnly,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub norm_a: f64,
    pub norm_b: f64,
    pub norm_c: f64,
    /// Share of encoder coordinates with `|a_j| < 1e-12`.
    pub tiny_a_fraction: f64,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperGradient {
    pub method: HyperMethod,
    /// Gradient w.r.t. the weights; absent for the finite-difference oracle.
    pub g_lambda: Option<Vec<f64>>,
    /// Gradient w.r.t. the softmax logits.
    pub g_logits: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl HyperGradient {
    fn from_lambda(method: HyperMethod, weights: &TaskWeights, g: Vec<f64>, diagnostics: Diagnostics) -> Result<Self> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: 0,
                op: "hypergradient",
            });
        }
        Ok(Self {
            method,
            g_logits: weights.logit_gradient(&g),
            g_lambda: Some(g),
            diagnostics,
        })
    }
}

fn l2(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g = s * b` with `s = sum_j c_j / (a_j + sign(a_j) 1e-8)`.
pub fn first_order_hypergrad(a: &ParamSet, b: &[f64], c: &ParamSet, weights: &TaskWeights) -> Result<HyperGradient> {
    if !a.same_shapes(c) {
        return Err(Error::Shape("a and c must both be shaped like the encoder".into()));
    }
    if b.len() != weights.len() {
        return Err(Error::Shape("b must have one entry per task".into()));
    }
    let (af, cf) = (a.flatten(), c.flatten());
    let s: f64 = af
        .iter()
        .zip(&cf)
        .map(|(&aj, &cj)| cj / (aj + aj.signum() * 1e-8))
        .sum();
    let tiny = af.iter().filter(|v| v.abs() < 1e-12).count() as f64 / af.len().max(1) as f64;
    let diagnostics = Diagnostics {
        norm_a: l2(af.iter().copied()),
        norm_b: l2(b.iter().copied()),
        norm_c: l2(cf.iter().copied()),
        tiny_a_fraction: tiny,
        warning: (tiny > 0.5).then(|| format!("degenerate encoder gradient: {:.0}% of |a_j| < 1e-12", tiny * 100.0)),
    };
    HyperGradient::from_lambda(HyperMethod::FirstOrder, weights, b.iter().map(|v| s * v).collect(), diagnostics)
}

/// `g_f = -eta_p <c, grad_enc l_f>` at the final pretraining iterate,
/// computed as a central difference of the per-task losses along `c`.
pub fn per_coordinate_hypergrad<P: Bilevel>(
    p: &P,
    encoder: &ParamSet,
    decoder: &ParamSet,
    batch: &P::Pretrain,
    c: &ParamSet,
    eta_pretrain: f64,
    weights: &TaskWeights,
) -> Result<HyperGradient> {
    if !encoder.same_shapes(c) {
        return Err(Error::Shape("c must be shaped like the encoder".into()));
    }
    let n = weights.len();
    let cn = c.norm_inf();
    let diagnostics = Diagnostics {
        norm_c: c.norm2(),
        ..Diagnostics::default()
    };
    if cn == 0.0 {
        return HyperGradient::from_lambda(HyperMethod::PerCoordinate, weights, vec![0.0; n], diagnostics);
    }
    let s = 1e-5 * (1.0 + encoder.norm_inf()) / cn;
    let shifted = |sign: f64| {
        let mut e = encoder.clone();
        e.axpy(sign * s, c);
        e
    };
    let up = per_task_losses(p, &shifted(1.0), decoder, n, batch)?;
    let down = per_task_losses(p, &shifted(-1.0), decoder, n, batch)?;
    let g = up
        .iter()
        .zip(&down)
        .map(|(u, d)| -eta_pretrain * (u - d) / (2.0 * s))
        .collect();
    HyperGradient::from_lambda(HyperMethod::PerCoordinate, weights, g, diagnostics)
}

/// Parameters at the start of an inner loop.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerStart {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub head: ParamSet,
}

impl InnerStart {
    pub fn numel(&self) -> usize {
        self.encoder.numel() + self.decoder.numel() + self.head.numel()
    }
}

/// One fully specified inner procedure: fixed batches, fixed rates.
pub struct InnerPlan<'a, P: Bilevel> {
    pub problem: &'a P,
    pub pretrain: Vec<&'a P::Pretrain>,
    pub finetune: Vec<&'a P::Labelled>,
    pub val: &'a P::Labelled,
    pub eta_pretrain: f64,
    pub eta_finetune: f64,
}

impl<'a, P: Bilevel> InnerPlan<'a, P> {
    /// Encoder and decoder before each pretraining step, plus the final pair.
    fn pretrain_trace(&self, start: &InnerStart, lambda: &[f64]) -> Result<Vec<(ParamSet, ParamSet)>> {
        let mut trace = Vec::with_capacity(self.pretrain.len() + 1);
        let (mut enc, mut dec) = (start.encoder.clone(), start.decoder.clone());
        for batch in &self.pretrain {
            let e = pretrain_eval(self.problem, &enc, &dec, lambda, batch)?;
            trace.push((enc.clone(), dec.clone()));
            enc.axpy(-self.eta_pretrain, &e.grad_encoder);
            dec.axpy(-self.eta_pretrain, &e.grad_decoder);
        }
        trace.push((enc, dec));
        Ok(trace)
    }

    /// Validation loss after the whole unrolled procedure.
    pub fn val_loss(&self, start: &InnerStart, lambda: &[f64]) -> Result<f64> {
        let trace = self.pretrain_trace(start, lambda)?;
        let enc = &trace.last().unwrap().0;
        let ft = inner_finetune(self.problem, enc, &start.head, &self.finetune, self.eta_finetune)?;
        Ok(finetune_eval(self.problem, &ft.encoder, &ft.head, self.val)?.loss)
    }
}

fn concat(sets: &[&ParamSet]) -> Vec<Tensor> {
    sets.iter().flat_map(|s| s.tensors().iter().cloned()).collect()
}

fn zeros_of(set: &ParamSet) -> Vec<Tensor> {
    set.zeros_like().0
}

/// Reverse-mode hyper-gradient through every stored inner iterate.
pub fn exact_hypergrad<P: Bilevel>(
    plan: &InnerPlan<'_, P>,
    start: &InnerStart,
    weights: &TaskWeights,
    mode: AdjointMode,
) -> Result<HyperGradient> {
    let steps = plan.pretrain.len() + plan.finetune.len();
    if start.numel() > MAX_TRACE_PARAMS || steps > MAX_TRACE_STEPS {
        return Err(Error::TraceTooLarge(format!(
            "{} parameters over {steps} inner steps (limits {MAX_TRACE_PARAMS} and {MAX_TRACE_STEPS}); use the first-order path",
            start.numel()
        )));
    }
    if plan.pretrain.is_empty() {
        return Err(Error::Config("inner pretraining needs at least one step".into()));
    }
    let p = plan.problem;
    let lambda = weights.weights();
    let (ne, nd) = (start.encoder.len(), start.decoder.len());

    let trace = plan.pretrain_trace(start, lambda)?;
    let mut ft_trace = Vec::with_capacity(plan.finetune.len() + 1);
    let (mut enc, mut head) = (trace.last().unwrap().0.clone(), start.head.clone());
    for batch in &plan.finetune {
        let e = finetune_eval(p, &enc, &head, batch)?;
        ft_trace.push((enc.clone(), head.clone()));
        enc.axpy(-plan.eta_finetune, &e.grad_encoder);
        head.axpy(-plan.eta_finetune, &e.grad_head);
    }
    let val = finetune_eval(p, &enc, &head, plan.val)?;

    // finetuning adjoint over (encoder, head)
    let mut beta_e = val.grad_encoder.0;
    let mut beta_h = match mode {
        AdjointMode::Full => val.grad_head.0,
        AdjointMode::EncoderOnly => zeros_of(&start.head),
    };
    for (j, batch) in plan.finetune.iter().enumerate().rev() {
        let (e, h) = &ft_trace[j];
        let f = |tape: &mut Tape, v: &[Var]| p.finetune_loss(tape, &v[..ne], &v[ne..], batch);
        let dir: Vec<Tensor> = beta_e.iter().chain(&beta_h).cloned().collect();
        let hv = hvp(&f, &concat(&[e, h]), &dir)?;
        for (b, x) in beta_e.iter_mut().zip(&hv[..ne]) {
            b.axpy(-plan.eta_finetune, x);
        }
        if mode == AdjointMode::Full {
            for (b, x) in beta_h.iter_mut().zip(&hv[ne..]) {
                b.axpy(-plan.eta_finetune, x);
            }
        }
    }

    // transfer: the fresh head does not depend on the pretrained weights
    let mut alpha_e = beta_e;
    let mut alpha_d = zeros_of(&start.decoder);
    let mut g = vec![0.0; weights.len()];
    let lam_t = Tensor::vector(lambda.to_vec());
    for (i, batch) in plan.pretrain.iter().enumerate().rev() {
        let (e, d) = &trace[i];
        let f = |tape: &mut Tape, v: &[Var]| {
            p.pretrain_loss(tape, &v[..ne], &v[ne..ne + nd], v[ne + nd], batch)
                .loss
        };
        let mut point = concat(&[e, d]);
        point.push(lam_t.clone());
        let mut dir: Vec<Tensor> = alpha_e.iter().chain(&alpha_d).cloned().collect();
        dir.push(Tensor::zeros(&[weights.len()]));
        let hv = hvp(&f, &point, &dir)?;
        for (gf, h) in g.iter_mut().zip(hv[ne + nd].data()) {
            *gf -= plan.eta_pretrain * h;
        }
        for (a, x) in alpha_e.iter_mut().zip(&hv[..ne]) {
            a.axpy(-plan.eta_pretrain, x);
        }
        if mode == AdjointMode::Full {
            for (a, x) in alpha_d.iter_mut().zip(&hv[ne..ne + nd]) {
                a.axpy(-plan.eta_pretrain, x);
            }
        }
    }
    let method = match mode {
        AdjointMode::Full => HyperMethod::Exact,
        AdjointMode::EncoderOnly => HyperMethod::ExactEncoderOnly,
    };
    HyperGradient::from_lambda(method, weights, g, Diagnostics::default())
}

/// Central difference of `closure(softmax(logits))` in each logit.
pub fn fd_hypergrad<F>(logits: &[f64], closure: F, h: f64) -> Result<HyperGradient>
where
    F: Fn(&TaskWeights) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = logits.to_vec();
    let mut g = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        work[i] = logits[i] + h;
        let up = closure(&TaskWeights::from_logits(work.clone())?)?;
        work[i] = logits[i] - h;
        let down = closure(&TaskWeights::from_logits(work.clone())?)?;
        work[i] = logits[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(HyperGradient {
        method: HyperMethod::FiniteDifference,
        g_lambda: None,
        g_logits: g,
        diagnostics: Diagnostics::default(),
    })
}

/// [`fd_hypergrad`] over an [`InnerPlan`].
pub fn fd_hypergrad_plan<P: Bilevel>(plan: &InnerPlan<'_, P>, start: &InnerStart, weights: &TaskWeights, h: f64) -> Result<HyperGradient> {
    fd_hypergrad(weights.logits(), |w| plan.val_loss(start, w.weights()), h)
}

/// Largest relative gap between two logit gradients with an absolute floor.
pub fn hypergrad_gap(a: &[f64], b: &[f64], abs_floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(abs_floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[f64]) -> ParamSet {
        ParamSet::new(vec![Tensor::vector(v.to_vec())])
    }

    #[test]
    fn contracted_examples() {
        let w = TaskWeights::uniform(2);
        let a = set(&[0.5, -2.0, 3.0]);
        let g = first_order_hypergrad(&a, &[0.1, 0.4], &a, &w).unwrap();
        let gl = g.g_lambda.unwrap();
        assert!((gl[0] - 0.3).abs() < 1e-7 && (gl[1] - 1.2).abs() < 1e-7);
        let zero = first_order_hypergrad(&a, &[0.0, 0.0], &set(&[1.0, 1.0, 1.0]), &w).unwrap();
        assert_eq!(zero.g_lambda.unwrap(), vec![0.0, 0.0]);
        assert!(zero.diagnostics.warning.is_none());
    }

    #[test]
    fn degenerate_gradient_flagged() {
        let w = TaskWeights::uniform(1);
        let g = first_order_hypergrad(&set(&[0.0, 0.0, 1.0]), &[1.0], &set(&[0.0, 0.0, 1.0]), &w).unwrap();
        assert!(g.diagnostics.warning.is_some());
        assert!((g.diagnostics.tiny_a_fraction - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fd_of_constant_closure_is_zero() {
        let g = fd_hypergrad(&[0.1, -0.3, 0.2], |_| Ok(4.0), 1e-4).unwrap();
        assert_eq!(g.g_logits, vec![0.0; 3]);
        assert!(fd_hypergrad(&[0.0], |_| Ok(0.0), 0.0).is_err());
    }

    #[test]
    fn fd_matches_softmax_chain_rule() {
        // closure L(w) = w_0^2 + 3 w_1; dL/dlogits = J^T (2 w_0, 3, 0)
        let logits = [0.2, -0.1, 0.4];
        let w = TaskWeights::from_logits(logits.to_vec()).unwrap();
        let analytic = w.logit_gradient(&[2.0 * w.weights()[0], 3.0, 0.0]);
        let g = fd_hypergrad(&logits, |w| Ok(w.weights()[0].powi(2) + 3.0 * w.weights()[1]), 1e-5).unwrap();
        assert!(hypergrad_gap(&g.g_logits, &analytic, 1e-9) < 1e-7);
    }
}

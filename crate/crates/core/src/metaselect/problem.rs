//! The two inner loops, written once against a [`Bilevel`] problem so that
//! the sequence model and the tiny oracle fixtures share the same code.

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tape, Tensor, Var};
use crate::seqmodel::{classification_objective, pretrain_objective, PretrainLossVars, SeqBatch};

/// Loss above which an inner loop is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// A pretrain/finetune pair sharing an encoder.
pub trait Bilevel {
    type Pretrain;
    type Labelled;

    /// Weighted auxiliary loss `sum_f lambda_f * l_f` with its per-task node.
    fn pretrain_loss(
        &self,
        tape: &mut Tape,
        encoder: &[Var],
        decoder: &[Var],
        lambda: Var,
        batch: &Self::Pretrain,
    ) -> PretrainLossVars;

    /// Primary-task loss.
    fn finetune_loss(&self, tape: &mut Tape, encoder: &[Var], head: &[Var], batch: &Self::Labelled) -> Var;
}

/// The recurrent forecaster and classifier on hourly grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeqProblem {
    pub observation: usize,
    pub horizon: usize,
}

impl Bilevel for SeqProblem {
    type Pretrain = SeqBatch;
    type Labelled = SeqBatch;

    fn pretrain_loss(&self, tape: &mut Tape, encoder: &[Var], decoder: &[Var], lambda: Var, batch: &SeqBatch) -> PretrainLossVars {
        pretrain_objective(tape, encoder, decoder, lambda, batch, self.observation, self.horizon)
    }

    fn finetune_loss(&self, tape: &mut Tape, encoder: &[Var], head: &[Var], batch: &SeqBatch) -> Var {
        classification_objective(tape, encoder, head, batch, self.observation)
    }
}

fn params(tape: &mut Tape, set: &ParamSet) -> Vec<Var> {
    set.tensors().iter().map(|t| tape.param(t.clone())).collect()
}

fn split(mut grads: Vec<Tensor>, first: usize) -> (ParamSet, ParamSet) {
    let rest = grads.split_off(first);
    (ParamSet::new(grads), ParamSet::new(rest))
}

fn guard(phase: &'static str, step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { phase, step, loss });
    }
    Ok(())
}

/// Value, per-task losses and gradients of the auxiliary loss.
pub struct PretrainEval {
    pub loss: f64,
    pub per_task: Vec<f64>,
    pub grad_encoder: ParamSet,
    pub grad_decoder: ParamSet,
}

pub fn pretrain_eval<P: Bilevel>(
    p: &P,
    encoder: &ParamSet,
    decoder: &ParamSet,
    lambda: &[f64],
    batch: &P::Pretrain,
) -> Result<PretrainEval> {
    let mut tape = Tape::new();
    let mut vars = params(&mut tape, encoder);
    let dec = params(&mut tape, decoder);
    let lam = tape.constant(Tensor::vector(lambda.to_vec()));
    let out = p.pretrain_loss(&mut tape, &vars, &dec, lam, batch);
    tape.check_finite()?;
    vars.extend(dec);
    let (ge, gd) = split(tape.backward(out.loss, &vars)?, encoder.len());
    Ok(PretrainEval {
        loss: tape.scalar(out.loss),
        per_task: tape.value(out.per_task).data().to_vec(),
        grad_encoder: ge,
        grad_decoder: gd,
    })
}

/// Per-task auxiliary losses without gradients.
pub fn per_task_losses<P: Bilevel>(p: &P, encoder: &ParamSet, decoder: &ParamSet, n_tasks: usize, batch: &P::Pretrain) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc: Vec<Var> = encoder.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let dec: Vec<Var> = decoder.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let lam = tape.constant(Tensor::full(&[n_tasks], 1.0 / n_tasks as f64));
    let out = p.pretrain_loss(&mut tape, &enc, &dec, lam, batch);
    tape.check_finite()?;
    Ok(tape.value(out.per_task).data().to_vec())
}

pub struct FinetuneEval {
    pub loss: f64,
    pub grad_encoder: ParamSet,
    pub grad_head: ParamSet,
}

pub fn finetune_eval<P: Bilevel>(p: &P, encoder: &ParamSet, head: &ParamSet, batch: &P::Labelled) -> Result<FinetuneEval> {
    let mut tape = Tape::new();
    let mut vars = params(&mut tape, encoder);
    let hd = params(&mut tape, head);
    let out = p.finetune_loss(&mut tape, &vars, &hd, batch);
    tape.check_finite()?;
    vars.extend(hd);
    let (ge, gh) = split(tape.backward(out, &vars)?, encoder.len());
    Ok(FinetuneEval {
        loss: tape.scalar(out),
        grad_encoder: ge,
        grad_head: gh,
    })
}

/// Result of one pretraining inner loop.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    /// Gradient of the weighted loss w.r.t. the encoder at the final iterate.
    pub a: ParamSet,
    /// Per-task losses (the gradient w.r.t. lambda) at the final iterate.
    pub b: Vec<f64>,
    /// Weighted loss before each step.
    pub losses: Vec<f64>,
}

/// `batches.len()` plain gradient steps on the weighted auxiliary loss.
/// The factors are evaluated on the last batch after the last step.
pub fn inner_pretrain<P: Bilevel>(
    p: &P,
    encoder: &ParamSet,
    decoder: &ParamSet,
    lambda: &[f64],
    batches: &[&P::Pretrain],
    eta: f64,
) -> Result<PretrainOutcome> {
    if batches.is_empty() {
        return Err(Error::Config("inner pretraining needs at least one step".into()));
    }
    let mut enc = encoder.clone();
    let mut dec = decoder.clone();
    let mut losses = Vec::with_capacity(batches.len());
    for (step, batch) in batches.iter().enumerate() {
        let e = pretrain_eval(p, &enc, &dec, lambda, batch)?;
        guard("pretrain", step, e.loss)?;
        losses.push(e.loss);
        enc.axpy(-eta, &e.grad_encoder);
        dec.axpy(-eta, &e.grad_decoder);
    }
    let last = pretrain_eval(p, &enc, &dec, lambda, batches[batches.len() - 1])?;
    guard("pretrain", batches.len(), last.loss)?;
    Ok(PretrainOutcome {
        encoder: enc,
        decoder: dec,
        a: last.grad_encoder,
        b: last.per_task,
        losses,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub encoder: ParamSet,
    pub head: ParamSet,
    pub losses: Vec<f64>,
}

/// `batches.len()` joint gradient steps on the primary loss.
pub fn inner_finetune<P: Bilevel>(
    p: &P,
    encoder: &ParamSet,
    head: &ParamSet,
    batches: &[&P::Labelled],
    eta: f64,
) -> Result<FinetuneOutcome> {
    let mut enc = encoder.clone();
    let mut hd = head.clone();
    let mut losses = Vec::with_capacity(batches.len());
    for (step, batch) in batches.iter().enumerate() {
        let e = finetune_eval(p, &enc, &hd, batch)?;
        guard("finetune", step, e.loss)?;
        losses.push(e.loss);
        enc.axpy(-eta, &e.grad_encoder);
        hd.axpy(-eta, &e.grad_head);
    }
    Ok(FinetuneOutcome {
        encoder: enc,
        head: hd,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metaselect::toys::{LeastSquares, TinyMlp};

    #[test]
    fn zero_pretrain_steps_rejected() {
        let toy = LeastSquares::fixture(1);
        let (enc, dec, _) = toy.init();
        assert!(matches!(
            inner_pretrain(&toy, &enc, &dec, &[0.5, 0.5], &[], 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_pretrain_step_is_plain_sgd() {
        let toy = LeastSquares::fixture(2);
        let (enc, dec, _) = toy.init();
        let lambda = [0.3, 0.7];
        let out = inner_pretrain(&toy, &enc, &dec, &lambda, &[&()], 0.05).unwrap();
        let direct = toy.pretrain_gradient(&enc.flatten(), &lambda);
        for (i, v) in out.encoder.flatten().iter().enumerate() {
            assert!((v - (enc.flatten()[i] - 0.05 * direct[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn b_is_per_task_loss() {
        let toy = TinyMlp::fixture(3, 3);
        let (enc, dec, _) = toy.init();
        let lambda = [0.2, 0.5, 0.3];
        let out = inner_pretrain(&toy, &enc, &dec, &lambda, &[&toy.pretrain_batches[0]], 0.1).unwrap();
        let direct = per_task_losses(&toy, &out.encoder, &out.decoder, 3, &toy.pretrain_batches[0]).unwrap();
        for (x, y) in out.b.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_finetune_is_identity() {
        let toy = TinyMlp::fixture(4, 2);
        let (enc, _, head) = toy.init();
        let b = &toy.labelled_batches[0];
        let out = inner_finetune(&toy, &enc, &head, &[b, b, b], 0.0).unwrap();
        assert_eq!(out.encoder, enc);
        assert_eq!(out.head, head);
    }

    #[test]
    fn finetune_loss_trends_down_on_separable_data() {
        let toy = TinyMlp::fixture(5, 2);
        let (enc, _, head) = toy.init();
        let batches: Vec<_> = (0..30).map(|_| &toy.labelled_batches[0]).collect();
        let out = inner_finetune(&toy, &enc, &head, &batches, 0.5).unwrap();
        let down = out.losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down * 2 > out.losses.len() - 1);
        assert!(out.losses.last().unwrap() < &out.losses[0]);
    }
}

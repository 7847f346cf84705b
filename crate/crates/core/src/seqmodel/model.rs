//! Forward passes of the forecaster and the classifier, written once against
//! the tape so that plain evaluation and differentiation share one code path.

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tape, Tensor, Var};
use crate::seqmodel::params::{ClassifierParams, DecoderParams, EncoderParams};

/// Lower clamp applied to probabilities inside the log-loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Z-scored, imputed sequences for a batch of patients.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    /// `[B, T, F]`
    pub values: Tensor,
    /// `[B, T, F]`, 1 where the bucket holds a real reading
    pub observed_mask: Tensor,
    /// `[B]` binary outcome, present for primary-task batches
    pub labels: Option<Vec<f64>>,
}

impl SeqBatch {
    pub fn new(values: Tensor, observed_mask: Tensor, labels: Option<Vec<f64>>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Shape(format!("batch values must be [B,T,F], got {:?}", values.shape())));
        }
        if values.shape() != observed_mask.shape() {
            return Err(Error::Shape("mask and values differ in shape".into()));
        }
        if let Some(l) = &labels {
            if l.len() != values.shape()[0] {
                return Err(Error::Shape("one label per sequence required".into()));
            }
        }
        Ok(Self {
            values,
            observed_mask,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    /// `[B, F]` slice at time step `t`.
    pub fn step(&self, t: usize) -> Tensor {
        step_of(&self.values, t)
    }

    /// Values and mask for steps `start..start+len`, each `[B, len, F]`.
    pub fn window(&self, start: usize, len: usize) -> (Tensor, Tensor) {
        (window_of(&self.values, start, len), window_of(&self.observed_mask, start, len))
    }
}

fn step_of(x: &Tensor, t: usize) -> Tensor {
    let (b, steps, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(b * f);
    for i in 0..b {
        let base = (i * steps + t) * f;
        out.extend_from_slice(&x.data()[base..base + f]);
    }
    Tensor::from_parts(vec![b, f], out)
}

fn window_of(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (b, steps, f) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(b * len * f);
    for i in 0..b {
        let base = (i * steps + start) * f;
        out.extend_from_slice(&x.data()[base..base + len * f]);
    }
    Tensor::from_parts(vec![b, len, f], out)
}

/// Tape handles for one recurrent cell.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// Hidden and cell state, each `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

pub fn lstm_step(tape: &mut Tape, cell: &CellVars, x: Var, state: StateVars) -> StateVars {
    let d = tape.value(state.hidden).cols();
    let xw = tape.matmul(x, cell.w_input);
    let hw = tape.matmul(state.hidden, cell.w_hidden);
    let pre = tape.add(xw, hw);
    let pre = tape.add_bias(pre, cell.bias);
    let i_pre = tape.slice_cols(pre, 0, d);
    let f_pre = tape.slice_cols(pre, d, d);
    let g_pre = tape.slice_cols(pre, 2 * d, d);
    let o_pre = tape.slice_cols(pre, 3 * d, d);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, state.cell);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    StateVars { hidden: h, cell: c }
}

fn cell_vars(vars: &[Var]) -> CellVars {
    CellVars {
        w_input: vars[0],
        w_hidden: vars[1],
        bias: vars[2],
    }
}

/// Runs the encoder over steps `0..tau` starting from a zero state.
pub fn encode_vars(tape: &mut Tape, encoder: &[Var], values: &Tensor, tau: usize) -> StateVars {
    let cell = cell_vars(encoder);
    let b = values.shape()[0];
    let d = tape.value(cell.w_hidden).rows();
    let mut state = StateVars {
        hidden: tape.constant(Tensor::zeros(&[b, d])),
        cell: tape.constant(Tensor::zeros(&[b, d])),
    };
    for t in 0..tau {
        let x = tape.constant(step_of(values, t));
        state = lstm_step(tape, &cell, x, state);
    }
    state
}

/// Autoregressive rollout of `horizon` steps. The first input is `first_input`
/// (the last observed vector); each later step consumes the previous forecast.
/// Returns `[B, horizon, F]`.
pub fn decode_vars(tape: &mut Tape, decoder: &[Var], state: StateVars, first_input: Var, horizon: usize) -> Var {
    assert!(horizon >= 1, "horizon must be positive");
    let cell = cell_vars(decoder);
    let (w_out, b_out) = (decoder[3], decoder[4]);
    let mut state = state;
    let mut input = first_input;
    let mut outputs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        state = lstm_step(tape, &cell, input, state);
        let y = tape.matmul(state.hidden, w_out);
        let y = tape.add_bias(y, b_out);
        outputs.push(y);
        input = y;
    }
    tape.stack(outputs)
}

/// Probabilities `[B, 1]` from the encoded window.
pub fn classify_vars(tape: &mut Tape, encoder: &[Var], head: &[Var], values: &Tensor, tau: usize) -> Var {
    let state = encode_vars(tape, encoder, values, tau);
    let logit = tape.matmul(state.hidden, head[0]);
    let logit = tape.add_bias(logit, head[1]);
    tape.sigmoid(logit)
}

/// Forecast of `x[tau..tau+horizon]` from `x[0..tau]`, as a tape node.
pub fn forecast_vars(
    tape: &mut Tape,
    encoder: &[Var],
    decoder: &[Var],
    batch: &SeqBatch,
    tau: usize,
    horizon: usize,
) -> Var {
    let state = encode_vars(tape, encoder, &batch.values, tau);
    let first = tape.constant(batch.step(tau - 1));
    decode_vars(tape, decoder, state, first, horizon)
}

/// Per-task masked MSE node `[F]` and the weighted loss node.
pub struct PretrainLossVars {
    pub per_task: Var,
    pub loss: Var,
}

pub fn pretrain_loss_vars(
    tape: &mut Tape,
    lambda: Var,
    forecast: Var,
    target: Tensor,
    mask: Tensor,
) -> PretrainLossVars {
    let per_task = tape.masked_mse(forecast, target, mask);
    let loss = tape.dot(lambda, per_task);
    PretrainLossVars { per_task, loss }
}

/// Weighted forecasting loss on one batch, end to end.
pub fn pretrain_objective(
    tape: &mut Tape,
    encoder: &[Var],
    decoder: &[Var],
    lambda: Var,
    batch: &SeqBatch,
    tau: usize,
    horizon: usize,
) -> PretrainLossVars {
    let forecast = forecast_vars(tape, encoder, decoder, batch, tau, horizon);
    let (target, mask) = batch.window(tau, horizon);
    pretrain_loss_vars(tape, lambda, forecast, target, mask)
}

/// Mean log-loss of the classifier on one labelled batch.
pub fn classification_objective(tape: &mut Tape, encoder: &[Var], head: &[Var], batch: &SeqBatch, tau: usize) -> Var {
    let labels = batch
        .labels
        .clone()
        .expect("classification batch without labels");
    let probs = classify_vars(tape, encoder, head, &batch.values, tau);
    tape.log_loss(probs, labels, PROB_CLAMP)
}

fn load(tape: &mut Tape, set: &ParamSet) -> Vec<Var> {
    set.tensors().iter().map(|t| tape.constant(t.clone())).collect()
}

fn check(tape: &Tape) -> Result<()> {
    tape.check_finite()
}

fn validate_window(values: &Tensor, tau: usize) -> Result<()> {
    if values.shape().len() != 3 {
        return Err(Error::Shape(format!("sequence values must be [B,T,F], got {:?}", values.shape())));
    }
    if tau == 0 || tau > values.shape()[1] {
        return Err(Error::Config(format!(
            "observation window {tau} outside 1..={}",
            values.shape()[1]
        )));
    }
    Ok(())
}

/// Final hidden state `s_tau`, `[B, d]`.
pub fn encode(encoder: &EncoderParams, values: &Tensor, tau: usize) -> Result<Tensor> {
    Ok(encode_state(encoder, values, tau)?.0)
}

/// Final `(hidden, cell)` state after `tau` steps.
pub fn encode_state(encoder: &EncoderParams, values: &Tensor, tau: usize) -> Result<(Tensor, Tensor)> {
    validate_window(values, tau)?;
    let mut tape = Tape::new();
    let enc = load(&mut tape, &encoder.to_set());
    let s = encode_vars(&mut tape, &enc, values, tau);
    check(&tape)?;
    Ok((tape.value(s.hidden).clone(), tape.value(s.cell).clone()))
}

/// Rolls the decoder forward `horizon` steps from `(hidden, cell)` with the given first input.
pub fn decode(
    decoder: &DecoderParams,
    hidden: &Tensor,
    cell: &Tensor,
    first_input: &Tensor,
    horizon: usize,
) -> Result<Tensor> {
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let dec = load(&mut tape, &decoder.to_set());
    let state = StateVars {
        hidden: tape.constant(hidden.clone()),
        cell: tape.constant(cell.clone()),
    };
    let first = tape.constant(first_input.clone());
    let out = decode_vars(&mut tape, &dec, state, first, horizon);
    check(&tape)?;
    Ok(tape.value(out).clone())
}

pub fn classify(encoder: &EncoderParams, head: &ClassifierParams, values: &Tensor, tau: usize) -> Result<Vec<f64>> {
    classify_sets(&encoder.to_set(), &head.to_set(), values, tau)
}

pub fn classify_sets(encoder: &ParamSet, head: &ParamSet, values: &Tensor, tau: usize) -> Result<Vec<f64>> {
    validate_window(values, tau)?;
    let mut tape = Tape::new();
    let enc = load(&mut tape, encoder);
    let hd = load(&mut tape, head);
    let p = classify_vars(&mut tape, &enc, &hd, values, tau);
    check(&tape)?;
    Ok(tape.value(p).data().to_vec())
}

/// `sum_f lambda_f * masked_mse_f` with per-task masked means.
pub fn pretrain_loss(lambda: &[f64], forecast: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    Ok(per_task_mse(forecast, target, mask)?
        .iter()
        .zip(lambda)
        .map(|(l, w)| l * w)
        .sum())
}

pub fn per_task_mse(forecast: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    if forecast.shape() != target.shape() || forecast.shape() != mask.shape() {
        return Err(Error::Shape("forecast, target and mask must share a shape".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(forecast.clone());
    let out = tape.masked_mse(p, target.clone(), mask.clone());
    Ok(tape.value(out).data().to_vec())
}

/// Mean clamped negative log-likelihood.
pub fn classification_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape("probabilities and labels must be non-empty and aligned".into()));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(probs.to_vec()));
    let l = tape.log_loss(p, labels.to_vec(), PROB_CLAMP);
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd_grad, value_and_grad, RngStream};
    use crate::seqmodel::params::{ModelDims, ModelParams};
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = RngStream::new(seed, "test", 0).rng();
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_batch(b: usize, t: usize, f: usize, seed: u64) -> SeqBatch {
        let values = random_tensor(&[b, t, f], seed);
        let mut r = RngStream::new(seed, "mask", 0).rng();
        let mask = Tensor::new(
            vec![b, t, f],
            (0..b * t * f).map(|_| if r.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let labels = (0..b).map(|i| (i % 2) as f64).collect();
        SeqBatch::new(values, mask, Some(labels)).unwrap()
    }

    #[test]
    fn zero_network_encodes_to_zero() {
        let dims = ModelDims::new(3, 4).unwrap();
        let s = encode(&EncoderParams::zeros(dims), &Tensor::zeros(&[2, 5, 3]), 5).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.shape(), [2, 4]);
    }

    #[test]
    fn leading_zero_steps_are_inert_from_zero_state() {
        // Zero input and zero bias keep a zero state at zero, so padding the
        // front of a sequence with empty steps does not change s_tau.
        let dims = ModelDims::new(2, 3).unwrap();
        let enc = EncoderParams::init(dims, RngStream::new(3, "t", 0));
        let one = Tensor::new(vec![1, 1, 2], vec![0.4, -0.9]).unwrap();
        let mut padded = vec![0.0; 4];
        padded.extend([0.4, -0.9]);
        let three = Tensor::new(vec![1, 3, 2], padded).unwrap();
        assert_eq!(encode(&enc, &one, 1).unwrap(), encode(&enc, &three, 3).unwrap());
    }

    #[test]
    fn identical_rows_encode_identically() {
        let dims = ModelDims::new(2, 3).unwrap();
        let enc = EncoderParams::init(dims, RngStream::new(1, "t", 0));
        let row = random_tensor(&[1, 4, 2], 5).into_data();
        let mut both = row.clone();
        both.extend(row);
        let s = encode(&enc, &Tensor::new(vec![2, 4, 2], both).unwrap(), 4).unwrap();
        assert_eq!(&s.data()[0..3], &s.data()[3..6]);
    }

    #[test]
    fn zero_decoder_forecasts_zero() {
        let dims = ModelDims::new(3, 4).unwrap();
        let out = decode(
            &DecoderParams::zeros(dims),
            &Tensor::zeros(&[2, 4]),
            &Tensor::zeros(&[2, 4]),
            &Tensor::full(&[2, 3], 1.5),
            5,
        )
        .unwrap();
        assert_eq!(out.shape(), [2, 5, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_prefix_property() {
        let dims = ModelDims::new(3, 4).unwrap();
        let dec = DecoderParams::init(dims, RngStream::new(2, "t", 0));
        let h = random_tensor(&[2, 4], 1);
        let c = random_tensor(&[2, 4], 2);
        let x = random_tensor(&[2, 3], 3);
        let one = decode(&dec, &h, &c, &x, 1).unwrap();
        let three = decode(&dec, &h, &c, &x, 3).unwrap();
        for b in 0..2 {
            assert_eq!(&one.data()[b * 3..b * 3 + 3], &three.data()[b * 9..b * 9 + 3]);
        }
    }

    #[test]
    fn decode_shape_contract() {
        let dims = ModelDims::new(16, 5).unwrap();
        let dec = DecoderParams::init(dims, RngStream::new(8, "t", 0));
        let out = decode(
            &dec,
            &random_tensor(&[4, 5], 1),
            &random_tensor(&[4, 5], 2),
            &random_tensor(&[4, 16], 3),
            8,
        )
        .unwrap();
        assert_eq!(out.shape(), [4, 8, 16]);
        assert!(decode(&dec, &random_tensor(&[4, 5], 1), &random_tensor(&[4, 5], 2), &random_tensor(&[4, 16], 3), 0).is_err());
    }

    #[test]
    fn pretrain_loss_cases() {
        let x = random_tensor(&[2, 3, 2], 4);
        let mask = Tensor::full(&[2, 3, 2], 1.0);
        assert_eq!(pretrain_loss(&[0.5, 0.5], &x, &x, &mask).unwrap(), 0.0);

        // task 0 error 1 on 4 observed cells, task 1 arbitrary
        let pred = Tensor::new(vec![1, 4, 2], vec![1.0, 9.0, 1.0, -3.0, 1.0, 7.0, 1.0, 2.0]).unwrap();
        let target = Tensor::new(vec![1, 4, 2], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = Tensor::full(&[1, 4, 2], 1.0);
        assert_eq!(pretrain_loss(&[1.0, 0.0], &pred, &target, &m).unwrap(), 1.0);
    }

    #[test]
    fn pretrain_loss_matches_per_task_loop() {
        let b = random_batch(3, 5, 4, 11);
        let pred = random_tensor(&[3, 5, 4], 12);
        let lambda = [0.25; 4];
        let mut expected = 0.0;
        for f in 0..4 {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..3 * 5 {
                let k = i * 4 + f;
                let m = b.observed_mask.data()[k];
                num += m * (pred.data()[k] - b.values.data()[k]).powi(2);
                den += m;
            }
            expected += 0.25 * num / f64::max(1.0, den);
        }
        let got = pretrain_loss(&lambda, &pred, &b.values, &b.observed_mask).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn classify_zero_head_is_half() {
        let dims = ModelDims::new(2, 3).unwrap();
        let enc = EncoderParams::init(dims, RngStream::new(1, "t", 0));
        let p = classify(&enc, &ClassifierParams::zeros(dims), &random_tensor(&[3, 4, 2], 2), 4).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classify_bias_monotone_and_permutation_equivariant() {
        let dims = ModelDims::new(2, 3).unwrap();
        let enc = EncoderParams::init(dims, RngStream::new(1, "t", 0));
        let mut head = ClassifierParams::init(dims, RngStream::new(2, "t", 0));
        let x = random_tensor(&[3, 4, 2], 2);
        let base = classify(&enc, &head, &x, 4).unwrap();
        head.b.data_mut()[0] += 0.3;
        let up = classify(&enc, &head, &x, 4).unwrap();
        assert!(base.iter().zip(&up).all(|(a, b)| b > a));

        let mut swapped = x.data().to_vec();
        let (r0, r2): (Vec<f64>, Vec<f64>) = (swapped[0..8].to_vec(), swapped[16..24].to_vec());
        swapped[0..8].copy_from_slice(&r2);
        swapped[16..24].copy_from_slice(&r0);
        let xp = Tensor::new(vec![3, 4, 2], swapped).unwrap();
        let pp = classify(&enc, &head, &xp, 4).unwrap();
        assert_eq!(pp, vec![up[2], up[1], up[0]]);
    }

    #[test]
    fn log_loss_values() {
        let l = classification_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = classification_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l > 0.0 && l < 2e-7);
        let l = classification_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.16425).abs() < 1e-5);
        assert!(classification_loss(&[0.5], &[2.0]).is_err());
    }

    #[test]
    fn lambda_gradient_is_per_task_mse() {
        let dims = ModelDims::new(3, 4).unwrap();
        let params = ModelParams::init(dims, 5);
        let batch = random_batch(2, 6, 3, 7);
        let lambda = Tensor::vector(vec![0.2, 0.5, 0.3]);
        let f = |t: &mut Tape, v: &[Var]| {
            let enc: Vec<Var> = params.encoder.tensors().iter().map(|x| t.constant(x.clone())).collect();
            let dec: Vec<Var> = params.decoder.tensors().iter().map(|x| t.constant(x.clone())).collect();
            pretrain_objective(t, &enc, &dec, v[0], &batch, 4, 2).loss
        };
        let (_, g) = value_and_grad(&f, &[lambda]).unwrap();

        let enc = EncoderParams::from_set(&params.encoder).unwrap();
        let dec = DecoderParams::from_set(&params.decoder).unwrap();
        let (h, c) = encode_state(&enc, &batch.values, 4).unwrap();
        let pred = decode(&dec, &h, &c, &batch.step(3), 2).unwrap();
        let (target, mask) = batch.window(4, 2);
        let per = per_task_mse(&pred, &target, &mask).unwrap();
        for (a, b) in g[0].data().iter().zip(&per) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_targets_do_not_matter() {
        let dims = ModelDims::new(2, 3).unwrap();
        let params = ModelParams::init(dims, 5);
        let batch = random_batch(2, 5, 2, 9);
        let loss_of = |b: &SeqBatch| {
            let mut t = Tape::new();
            let enc: Vec<Var> = params.encoder.tensors().iter().map(|x| t.constant(x.clone())).collect();
            let dec: Vec<Var> = params.decoder.tensors().iter().map(|x| t.constant(x.clone())).collect();
            let lam = t.constant(Tensor::vector(vec![0.5, 0.5]));
            let out = pretrain_objective(&mut t, &enc, &dec, lam, b, 3, 2);
            t.scalar(out.loss)
        };
        let before = loss_of(&batch);
        let mut perturbed = batch.clone();
        for k in 0..perturbed.values.len() {
            let t = (k / 2) % 5;
            if t >= 3 && perturbed.observed_mask.data()[k] == 0.0 {
                perturbed.values.data_mut()[k] += 100.0;
            }
        }
        assert_eq!(before, loss_of(&perturbed));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let dims = ModelDims::new(2, 3).unwrap();
        let params = ModelParams::init(dims, 21);
        let batch = random_batch(2, 5, 2, 22);
        let lambda = Tensor::vector(vec![0.6, 0.4]);
        let f = |t: &mut Tape, v: &[Var]| {
            let p = pretrain_objective(t, &v[0..3], &v[3..8], v[10], &batch, 3, 2).loss;
            let c = classification_objective(t, &v[0..3], &v[8..10], &batch, 3);
            t.add(p, c)
        };
        let mut all: Vec<Tensor> = params.encoder.tensors().to_vec();
        all.extend(params.decoder.tensors().iter().cloned());
        all.extend(params.head.tensors().iter().cloned());
        all.push(lambda);
        let (_, g) = value_and_grad(&f, &all).unwrap();
        let fd = fd_grad(&f, &all, 1e-5).unwrap();
        let err = crate::numcore::max_rel_error(&g, &fd);
        assert!(err < 1e-4, "max rel error {err}");
    }
}

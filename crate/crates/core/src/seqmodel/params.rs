use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamSet, RngStream, Tensor};

/// Input width (number of feature channels) and hidden state width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub features: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn new(features: usize, hidden: usize) -> Result<Self> {
        if features == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "model needs at least one feature and one hidden unit (got F={features}, d={hidden})"
            )));
        }
        Ok(Self { features, hidden })
    }
}

/// Weights of one gated recurrent cell.
///
/// The pre-activation is `x W_input + h W_hidden + bias`, of width `4d`,
/// laid out as four contiguous column blocks `[input | forget | candidate | output]`.
/// With `i, f, o = sigmoid(.)` and `g = tanh(.)` on the respective blocks the
/// update is `c' = f*c + i*g`, `h' = o*tanh(c')`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub bias: Tensor,
}

impl LstmCell {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Tensor::zeros(&[input, 4 * hidden]),
            w_hidden: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    fn init(input: usize, hidden: usize, stream: RngStream) -> Self {
        let mut rng = stream.rng();
        Self {
            w_input: uniform(&[input, 4 * hidden], hidden, &mut rng),
            w_hidden: uniform(&[hidden, 4 * hidden], hidden, &mut rng),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    fn tensors(&self) -> Vec<Tensor> {
        vec![self.w_input.clone(), self.w_hidden.clone(), self.bias.clone()]
    }
}

/// Uniform(-1/sqrt(d), 1/sqrt(d)).
fn uniform(shape: &[usize], hidden: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (hidden as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub cell: LstmCell,
}

/// Recurrent cell shared across channels plus a readout with one output per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub cell: LstmCell,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Affine map from the hidden state to one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl EncoderParams {
    pub const TENSORS: usize = 3;

    pub fn init(dims: ModelDims, stream: RngStream) -> Self {
        Self {
            cell: LstmCell::init(dims.features, dims.hidden, stream),
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            cell: LstmCell::zeros(dims.features, dims.hidden),
        }
    }

    pub fn to_set(&self) -> ParamSet {
        ParamSet::new(self.cell.tensors())
    }

    pub fn from_set(set: &ParamSet) -> Result<Self> {
        let t = expect_len(set, Self::TENSORS, "encoder")?;
        Ok(Self {
            cell: LstmCell {
                w_input: t[0].clone(),
                w_hidden: t[1].clone(),
                bias: t[2].clone(),
            },
        })
    }
}

impl DecoderParams {
    pub const TENSORS: usize = 5;

    pub fn init(dims: ModelDims, stream: RngStream) -> Self {
        let mut rng = stream.derive("decoder_readout", stream.id.index).rng();
        Self {
            cell: LstmCell::init(dims.features, dims.hidden, stream),
            w_out: uniform(&[dims.hidden, dims.features], dims.hidden, &mut rng),
            b_out: Tensor::zeros(&[dims.features]),
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            cell: LstmCell::zeros(dims.features, dims.hidden),
            w_out: Tensor::zeros(&[dims.hidden, dims.features]),
            b_out: Tensor::zeros(&[dims.features]),
        }
    }

    pub fn to_set(&self) -> ParamSet {
        let mut t = self.cell.tensors();
        t.push(self.w_out.clone());
        t.push(self.b_out.clone());
        ParamSet::new(t)
    }

    pub fn from_set(set: &ParamSet) -> Result<Self> {
        let t = expect_len(set, Self::TENSORS, "decoder")?;
        Ok(Self {
            cell: LstmCell {
                w_input: t[0].clone(),
                w_hidden: t[1].clone(),
                bias: t[2].clone(),
            },
            w_out: t[3].clone(),
            b_out: t[4].clone(),
        })
    }
}

impl ClassifierParams {
    pub const TENSORS: usize = 2;

    pub fn init(dims: ModelDims, stream: RngStream) -> Self {
        let mut rng = stream.rng();
        Self {
            w: uniform(&[dims.hidden, 1], dims.hidden, &mut rng),
            b: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            w: Tensor::zeros(&[dims.hidden, 1]),
            b: Tensor::zeros(&[1]),
        }
    }

    pub fn to_set(&self) -> ParamSet {
        ParamSet::new(vec![self.w.clone(), self.b.clone()])
    }

    pub fn from_set(set: &ParamSet) -> Result<Self> {
        let t = expect_len(set, Self::TENSORS, "classifier")?;
        Ok(Self {
            w: t[0].clone(),
            b: t[1].clone(),
        })
    }
}

fn expect_len<'a>(set: &'a ParamSet, n: usize, what: &str) -> Result<&'a [Tensor]> {
    if set.len() != n {
        return Err(Error::Shape(format!("{what} block needs {n} tensors, got {}", set.len())));
    }
    Ok(set.tensors())
}

/// Encoder, decoder and classifier blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub head: ParamSet,
}

impl ModelParams {
    /// Fresh parameters, one random stream per block.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        Self {
            encoder: EncoderParams::init(dims, RngStream::new(seed, "init_encoder", 0)).to_set(),
            decoder: DecoderParams::init(dims, RngStream::new(seed, "init_decoder", 0)).to_set(),
            head: ClassifierParams::init(dims, RngStream::new(seed, "init_head", 0)).to_set(),
        }
    }

    pub fn dims(&self) -> Result<ModelDims> {
        let w = self
            .encoder
            .tensors()
            .first()
            .ok_or_else(|| Error::Shape("empty encoder".into()))?;
        ModelDims::new(w.shape()[0], w.shape()[1] / 4)
    }

    pub fn numel(&self) -> usize {
        self.encoder.numel() + self.decoder.numel() + self.head.numel()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.head.is_finite()
    }
}

/// Classifier head drawn from its own stream, used whenever a run re-initialises the head.
pub fn fresh_head(dims: ModelDims, seed: u64, purpose: &'static str, index: u64) -> ParamSet {
    ClassifierParams::init(dims, RngStream::new(seed, purpose, index)).to_set()
}

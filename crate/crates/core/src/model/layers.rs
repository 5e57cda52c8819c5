use super::params::{Forward, Init, ParamId};
use crate::error::Result;
use crate::numerics::{Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    /// `uniform(±1/√fan_in)` for weight and bias.
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: init.uniform(format!("{name}.weight"), &[fan_in, fan_out], bound),
            b: init.uniform(format!("{name}.bias"), &[fan_out], bound),
        }
    }

    pub fn apply<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(f.p(self.w))?.add(f.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: init.constant(format!("{name}.gain"), &[dim], 1.0),
            bias: init.constant(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn apply<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(f.p(self.gain), f.p(self.bias), LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Activation {
    Relu,
    Swish,
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
    act: Activation,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, dim: usize, hidden: usize, act: Activation) -> Self {
        FeedForward {
            up: Linear::new(init, &format!("{name}.up"), dim, hidden),
            down: Linear::new(init, &format!("{name}.down"), hidden, dim),
            act,
        }
    }

    pub fn apply<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.apply(f, x)?;
        let h = match self.act {
            Activation::Relu => h.relu(),
            Activation::Swish => h.swish(),
        };
        self.down.apply(f, f.dropout(h)?)
    }
}

/// Multi-head scaled dot-product attention without causal masking.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Attention {
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), dim, dim),
            value: Linear::new(init, &format!("{name}.value"), dim, dim),
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
            heads,
            dim,
        }
    }

    /// Rows of `x` attend over rows of `memory`.
    pub fn apply<'t>(&self, f: &Forward<'t>, x: Var<'t>, memory: Var<'t>) -> Result<Var<'t>> {
        let q = self.query.apply(f, x)?;
        let k = self.key.apply(f, memory)?;
        let v = self.value.apply(f, memory)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let weights = qh.matmul_t(kh)?.scale(scale).softmax()?;
            heads.push(weights.matmul(vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads)? };
        self.out.apply(f, joined)
    }
}

/// Pointwise → GLU → depthwise conv → norm → swish → pointwise.
///
/// Layer normalization stands in for batch normalization since utterances
/// are processed one at a time.
#[derive(Clone, Debug)]
pub(crate) struct ConvModule {
    pointwise_in: Linear,
    depthwise: ParamId,
    depthwise_bias: ParamId,
    norm: LayerNorm,
    pointwise_out: Linear,
}

impl ConvModule {
    pub fn new(init: &mut Init, name: &str, dim: usize, kernel: usize) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        ConvModule {
            pointwise_in: Linear::new(init, &format!("{name}.pointwise_in"), dim, 2 * dim),
            depthwise: init.uniform(format!("{name}.depthwise.weight"), &[kernel, dim], bound),
            depthwise_bias: init.uniform(format!("{name}.depthwise.bias"), &[dim], bound),
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            pointwise_out: Linear::new(init, &format!("{name}.pointwise_out"), dim, dim),
        }
    }

    pub fn apply<'t>(&self, f: &Forward<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.pointwise_in.apply(f, x)?.glu()?;
        let h = h.depthwise_conv1d(f.p(self.depthwise))?.add(f.p(self.depthwise_bias))?;
        let h = self.norm.apply(f, h)?.swish();
        self.pointwise_out.apply(f, h)
    }
}

pub(crate) fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            data[pos * dim + i] = angle.sin();
            if i + 1 < dim {
                data[pos * dim + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, dim], data).expect("positions shape")
}

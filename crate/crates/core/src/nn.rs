//! Small building blocks shared by the encoder and the denoiser.

use crate::error::{bail, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensorcore::{Bound, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(p: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        Self {
            w: p.fan_in_uniform(format!("{name}.w"), &[fan_in, fan_out], rng),
            b: p.zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    /// Zero-initialized weights, for residual branches that should start as identity.
    pub fn zeroed<S: Scalar>(p: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: p.zeros(format!("{name}.w"), &[fan_in, fan_out]),
            b: p.zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(p: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        Self {
            gain: p.ones(format!("{name}.gain"), &[width]),
            bias: p.zeros(format!("{name}.bias"), &[width]),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Scaled dot-product attention over `heads` equal slices of the feature axis.
///
/// `q: [B, Nq, h]`, `k, v: [B, Nk, h]` → `[B, Nq, h]`. Each query row of each
/// head is a softmax-weighted (row-stochastic) combination of that head's value
/// rows, with logits scaled by `1/sqrt(h / heads)`.
pub fn attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    Ok(attention_with_weights(g, q, k, v, heads)?.0)
}

/// As [`attention`], also returning the weights `[B * heads, Nq, Nk]`.
pub fn attention_with_weights<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 3 || sk.len() != 3 || g.shape(v) != sk.as_slice() || sq[0] != sk[0] || sq[2] != sk[2] {
        bail!(Dimension, "attention q {:?} k {:?} v {:?}", sq, sk, g.shape(v));
    }
    let (b, nq, nk, h) = (sq[0], sq[1], sk[1], sq[2]);
    if heads == 0 || h % heads != 0 {
        bail!(Config, "{heads} heads do not divide width {h}");
    }
    let dh = h / heads;
    let split = |g: &mut Graph<S>, x: Var, n: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, n, dh])
    };
    let qh = split(g, q, nq)?;
    let kh = split(g, k, nk)?;
    let vh = split(g, v, nk)?;
    let kt = g.permute(kh, &[0, 2, 1])?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, S::of(1.0 / (dh as f64).sqrt()))?;
    let weights = g.softmax(scores, 2)?;
    let out = g.bmm(weights, vh)?;
    let out = g.reshape(out, &[b, heads, nq, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    Ok((g.reshape(out, &[b, nq, h])?, weights))
}

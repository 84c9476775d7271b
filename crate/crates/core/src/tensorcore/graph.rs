//! Define-by-run tape. Nodes are appended in execution order, which is a
//! topological order by construction; `backward` walks it in reverse.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{Bound, ParamStore};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Dropout is active only in `Train`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

const LN_EPS: f64 = 1e-5;

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    Scale(Var, S),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu(Var),
    Relu(Var),
    Dropout(Var, Vec<S>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Gather(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<S>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    mode: Mode,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new(Mode::Eval)
    }
}

fn check_finite<S: Scalar>(name: &str, t: &Tensor<S>) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
        bail!(Numeric, "{name} produced a non-finite value at flat index {pos}");
    }
    Ok(())
}

/// (outer, n, inner) decomposition of `shape` around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th)
        + half * x * (S::one() - th * th) * c * (S::one() + S::of(3.0) * k * x * x);
    (y, dy)
}

impl<S: Scalar> Graph<S> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        check_finite("input", &value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.input(value, false)
    }

    /// Copies every parameter of `store` into leaf nodes.
    pub fn bind(&mut self, store: &ParamStore<S>, trainable: bool) -> Result<Bound> {
        let vars = store
            .tensors()
            .map(|t| self.input(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound::from_vars(vars))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul {:?} x {:?}", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            bail!(Dimension, "bmm {:?} x {:?}", sa, sb);
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(&[bs, m, n], out)?;
        self.push("bmm", t, Op::BatchMatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{name} {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` where `b.shape` equals a trailing suffix of `x.shape`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            bail!(Dimension, "cannot broadcast {:?} onto {:?}", sb, sx);
        }
        let bd = self.value(b).data();
        let w = bd.len();
        let data = self
            .value(x)
            .data()
            .chunks(w)
            .flat_map(|c| c.iter().zip(bd).map(|(&u, &v)| u + v))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push("add_bcast", t, Op::AddBcast(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, s: S) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push("scale", t, Op::Scale(x, s), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            bail!(Dimension, "bad permutation {:?} for rank {}", perm, shape.len());
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(&out_shape, data)?;
        self.push("permute", t, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {axis} out of range for {:?}", shape);
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mx = (0..n).fold(S::neg_infinity(), |m, j| m.max(xd[at(j)]));
                let mut total = S::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push("softmax", t, Op::Softmax(x, axis), &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(&shape, out)?;
        self.push("log_softmax", t, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit population variance,
    /// then applies `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if n < 2 {
            bail!(Dimension, "layer_norm needs a normalization axis of length >= 2");
        }
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            bail!(Dimension, "layer_norm gain/bias must be [{n}]");
        }
        let nn = S::of(n as f64);
        let eps = S::of(LN_EPS);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / n;
        let mut xhat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(S::zero()));
        self.push("relu", t, Op::Relu(x), &[x])
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate {rate} outside [0,1)");
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { S::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push("dropout", t, Op::Dropout(x, mask), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::of(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        self.push("square", t, Op::Square(x), &[x])
    }

    /// `out.flat[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= xd.len()) {
            bail!(Dimension, "gather index {bad} out of range {}", xd.len());
        }
        let data = indices.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(shape, data)?;
        self.push("gather", t, Op::Gather(x, indices.to_vec()), &[x])
    }

    /// Scales each row of a 2-D tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            bail!(Dimension, "l2_normalize_rows expects rank 2, got {:?}", shape);
        }
        let d = shape[1];
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(shape[0]);
        for (r, row) in out.chunks_mut(d).enumerate() {
            let nrm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if nrm == S::zero() {
                bail!(Numeric, "row {r} has zero norm");
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let t = Tensor::new(&shape, out)?;
        self.push("l2_normalize_rows", t, Op::L2NormalizeRows(x, norms), &[x])
    }

    /// `x · w + b` applied to the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            bail!(Dimension, "linear {:?} with weight {:?}", sx, sw);
        }
        let rows = self.value(x).len() / sw[0];
        let flat = if sx.len() == 2 { x } else { self.reshape(x, &[rows, sw[0]])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bcast(y, b)?;
        }
        if sx.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = sx.clone();
            *out_shape.last_mut().unwrap() = sw[1];
            self.reshape(y, &out_shape)
        }
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![S::one()]);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Gradient for `v`, zeros if it was unreachable.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<S> {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn gradients(&self, bound: &Bound) -> Vec<Tensor<S>> {
        bound.vars().iter().map(|&v| self.grad_or_zero(v)).collect()
    }

    fn backprop_node(&self, idx: usize, gy: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |g| gemm_nt(gy, val(*b).data(), g, m, n, k));
                acc(*b, &mut |g| gemm_tn(val(*a).data(), gy, g, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                acc(*a, &mut |g| {
                    for i in 0..bs {
                        gemm_nt(
                            &gy[i * m * n..(i + 1) * m * n],
                            &val(*b).data()[i * k * n..(i + 1) * k * n],
                            &mut g[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..bs {
                        gemm_tn(
                            &val(*a).data()[i * m * k..(i + 1) * m * k],
                            &gy[i * m * n..(i + 1) * m * n],
                            &mut g[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bd[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * ad[i];
                    }
                });
            }
            Op::AddBcast(x, b) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                acc(*b, &mut |g| {
                    let w = g.len();
                    for c in gy.chunks(w) {
                        g.iter_mut().zip(c).for_each(|(g, &d)| *g += d);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *s));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(gy, node.value.shape(), &inv);
                acc(*x, &mut |g| g.iter_mut().zip(&back).for_each(|(g, &d)| *g += d));
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = lanes(node.value.shape(), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot = (0..n).map(|j| gy[at(j)] * y[at(j)]).sum::<S>();
                            for j in 0..n {
                                g[at(j)] += y[at(j)] * (gy[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let total = dr.iter().copied().sum::<S>();
                        for j in 0..n {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = *node.value.shape().last().unwrap();
                let nn = S::of(n as f64);
                let gd = val(*gain).data();
                acc(*x, &mut |g| {
                    for r in 0..inv_std.len() {
                        let dy = &gy[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..n {
                            let dxh = dy[j] * gd[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        for j in 0..n {
                            let dxh = dy[j] * gd[j];
                            g[r * n + j] += inv_std[r] / nn * (nn * dxh - s1 - xh[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (dy, xh) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += dy[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |g| {
                    for dy in gy.chunks(n) {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * gelu_parts(xd[i]).1;
                    }
                });
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xd[i] > S::zero() {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * mask[i];
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gy[0]));
            }
            Op::Mean(x) => {
                let d = gy[0] / S::of(val(*x).len() as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Square(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += S::of(2.0) * xd[i] * gy[i];
                    }
                });
            }
            Op::Gather(x, indices) => {
                acc(*x, &mut |g| {
                    for (o, &i) in indices.iter().enumerate() {
                        g[i] += gy[o];
                    }
                });
            }
            Op::L2NormalizeRows(x, norms) => {
                let y = node.value.data();
                let d = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let dr = &gy[r * d..(r + 1) * d];
                        let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<S>();
                        for j in 0..d {
                            g[r * d + j] += (dr[j] - yr[j] * dot) / nrm;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::eval();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let m = g.constant(t(&[2, 2], &[3., -1., 0.5, 7.])).unwrap();
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[3., -1., 0.5, 7.]);

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let ones = g.constant(t(&[2, 1], &[1., 1.])).unwrap();
        let c = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
        assert!(matches!(g.matmul(a, c).map(|_| ()), Ok(())));
        assert!(matches!(g.matmul(ones, ones), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let mut g = Graph::<f64>::eval();
        let z = g.constant(t(&[3], &[0., 0., 0.])).unwrap();
        let s = g.softmax(z, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(t(&[2], &[1000., 0.])).unwrap();
        let s = g.softmax(big, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s).data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_non_last_axis_columns_sum_to_one() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64).sin() * 3.0)).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        for j in 0..3 {
            let total: f64 = (0..4).map(|i| v.at2(i, j)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_and_two_values() {
        let mut g = Graph::<f64>::eval();
        let gain = g.constant(t(&[2], &[1., 1.])).unwrap();
        let bias = g.constant(t(&[2], &[0., 0.])).unwrap();
        let x = g.constant(t(&[2, 2], &[5., 5., 1., 3.])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-3 && (d[3] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_values_trip_an_error() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
        assert!(g.constant(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::eval();
        let x = g.input(t(&[2], &[1., 2.]), true).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let mut rng = RngStream::new(1);
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::full(&[100], 1.0)).unwrap();
        assert_eq!(g.dropout(x, 0.5, &mut rng).unwrap(), x);

        let mut g = Graph::<f64>::train();
        let x = g.constant(Tensor::full(&[1000], 1.0)).unwrap();
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64)).unwrap();
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(g.value(y).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }
}

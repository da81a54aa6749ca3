//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted and the backward pass is one reverse sweep.
//! Ops are coarse (matmul, layer norm, fused multi-head attention, row-wise
//! cosine) so that each backward rule stays small and can be checked
//! against finite differences in isolation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, AttentionLayout};
use crate::numerics::{ParamId, ParamStore, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        weights: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    AddTiled(Var, Var),
    InsertCls {
        x: Var,
        cls: Var,
        group: usize,
    },
    CosineRows {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    Exp(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    MulConst(Var, Vec<f64>),
    LogSigmoid(Var),
    WeightedSum(Var, Vec<f64>),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    fault: Option<Error>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for every tensor in `store` (zeros for unused parameters).
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// First numeric fault recorded during the forward pass, if any.
    pub fn fault(&self) -> Option<&Error> {
        self.fault.as_ref()
    }

    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(Error::NonFinite { op }) => Err(Error::NonFinite { op: op.clone() }),
            Some(Error::Domain(m)) => Err(Error::Domain(m.clone())),
            Some(e) => Err(Error::Precondition(e.to_string())),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(Error::NonFinite { op: name.into() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node; gradients are tracked if the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Binds a stored parameter as a leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone().with_grad(), Op::Leaf, true, "param");
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(Error::Shape(format!(
                "matmul {m}x{k} by {}x{n}",
                tb.rows()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(false, false, m, k, n, 1.0, ta.data(), tb.data(), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg, "matmul"))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(Error::Shape(format!("bias of {} for {c} columns", tb.len())));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg, "add_bias"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg, "add"))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg, "gelu")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(Error::Shape("layer norm affine size".into()));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * c];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xr = tx.row(r);
            let mu = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (i, o) in out[r * c..(r + 1) * c].iter_mut().enumerate() {
                *o = (xr[i] - mu) * rs * tg.data()[i] + tb.data()[i];
            }
            mean[r] = mu;
            rstd[r] = rs;
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
            "layer_norm",
        ))
    }

    /// Fused multi-head scaled dot-product attention (see
    /// [`kernels::attention_forward`]). Returns the concatenated head outputs
    /// and keeps the weights for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(Error::Shape("attention q/k/v widths".into()));
        }
        let (out, weights) = kernels::attention_forward(tq.data(), tk.data(), tv.data(), d, &layout)?;
        let t = Tensor::matrix(tq.rows(), d, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                weights,
            },
            rg,
            "attention",
        ))
    }

    /// Post-softmax weights `[rows, heads, block_len]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f64], &AttentionLayout)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                weights, layout, ..
            } => Some((weights, layout)),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&r) = idx.iter().find(|&&r| r >= tx.rows()) {
            return Err(Error::Shape(format!("row {r} of {}", tx.rows())));
        }
        let t = tx.select_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows(x, idx), rg, "gather_rows"))
    }

    /// Adds `pos` (`[L, d]`) to every consecutive group of `L` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(pos));
        if tx.cols() != tp.cols() || tp.rows() == 0 || tx.rows() % tp.rows() != 0 {
            return Err(Error::Shape(format!(
                "tile {:?} over {:?}",
                tp.shape(),
                tx.shape()
            )));
        }
        let block = tp.len();
        let mut out = tx.data().to_vec();
        for chunk in out.chunks_mut(block) {
            for (o, p) in chunk.iter_mut().zip(tp.data()) {
                *o += p;
            }
        }
        let t = Tensor::matrix(tx.rows(), tx.cols(), out)?;
        let rg = self.rg(x) || self.rg(pos);
        Ok(self.push(t, Op::AddTiled(x, pos), rg, "add_tiled"))
    }

    /// Prepends the single row `cls` before every group of `group` rows.
    pub fn insert_cls(&mut self, x: Var, cls: Var, group: usize) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(cls));
        let d = tx.cols();
        if tc.len() != d || group == 0 || tx.rows() % group != 0 {
            return Err(Error::Shape("insert_cls layout".into()));
        }
        let groups = tx.rows() / group;
        let mut out = Vec::with_capacity((tx.rows() + groups) * d);
        for g in 0..groups {
            out.extend_from_slice(tc.data());
            out.extend_from_slice(&tx.data()[g * group * d..(g + 1) * group * d]);
        }
        let t = Tensor::matrix(groups * (group + 1), d, out)?;
        let rg = self.rg(x) || self.rg(cls);
        Ok(self.push(t, Op::InsertCls { x, cls, group }, rg, "insert_cls"))
    }

    /// Cosine similarity of matching rows: `[P, d] x [P, d] -> [P]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "cosine_rows {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let rows = ta.rows();
        let mut out = Vec::with_capacity(rows);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        let mut zero = false;
        for r in 0..rows {
            let (x, y) = (ta.row(r), tb.row(r));
            let (nx, ny) = (kernels::norm(x), kernels::norm(y));
            if nx == 0.0 || ny == 0.0 {
                zero = true;
                out.push(0.0);
            } else {
                out.push(kernels::dot(x, y) / (nx * ny));
            }
            na.push(nx);
            nb.push(ny);
        }
        if zero && self.fault.is_none() {
            self.fault = Some(Error::Domain(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::vector(out),
            Op::CosineRows { a, b, na, nb },
            rg,
            "cosine_rows",
        ))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Exp(x), rg, "exp")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg, "scale")
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s)?;
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(x, s), rg, "scale_by"))
    }

    /// `x + s` for a single-element `s`.
    pub fn shift_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s)?;
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| v + sv).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ShiftBy(x, s), rg, "shift_by"))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if c.len() != tx.len() {
            return Err(Error::Shape("mul_const length".into()));
        }
        let out = tx.data().iter().zip(&c).map(|(v, k)| v * k).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, c), rg, "mul_const"))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| kernels::log_sigmoid(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LogSigmoid(x), rg, "log_sigmoid")
    }

    /// `sum_i w_i x_i` as a single-element tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if w.len() != tx.len() {
            return Err(Error::Shape("weighted_sum length".into()));
        }
        let s = kernels::dot(tx.data(), &w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w), rg, "weighted_sum"))
    }

    /// `sum_i c_i s_i` over single-element inputs.
    pub fn lincomb(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let mut s = 0.0;
        let mut rg = false;
        for &(v, c) in &terms {
            s += c * self.scalar_of(v)?;
            rg |= self.rg(v);
        }
        Ok(self.push(Tensor::scalar(s), Op::LinComb(terms), rg, "lincomb"))
    }

    fn scalar_of(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::Shape(format!("expected a scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// Reverse sweep from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check()?;
        if self.value(output).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |g| {
                    kernels::gemm(false, true, m, n, k, 1.0, gy, tb.data(), 1.0, g)
                });
                acc(*b, &mut |g| {
                    kernels::gemm(true, false, k, m, n, 1.0, ta.data(), gy, 1.0, g)
                });
            }
            Op::AddBias(x, b) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |g| {
                    for ((gi, &xi), &dy) in g.iter_mut().zip(tx.data()).zip(gy) {
                        *gi += dy * kernels::gelu_grad(xi);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let c = tx.cols();
                let xhat = |r: usize, i: usize| (tx.row(r)[i] - mean[r]) * rstd[r];
                acc(*gamma, &mut |g| {
                    for r in 0..tx.rows() {
                        for i in 0..c {
                            g[i] += gy[r * c + i] * xhat(r, i);
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for row in gy.chunks(c) {
                        add_into(g, row);
                    }
                });
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..tx.rows() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..c {
                            dxhat[i] = gy[r * c + i] * tg.data()[i];
                            m1 += dxhat[i];
                            m2 += dxhat[i] * xhat(r, i);
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for i in 0..c {
                            g[r * c + i] += rstd[r] * (dxhat[i] - m1 - xhat(r, i) * m2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                weights,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.cols();
                let mut dq = self.rg(*q).then(|| vec![0.0; tq.len()]);
                let mut dk = self.rg(*k).then(|| vec![0.0; tk.len()]);
                let mut dv = self.rg(*v).then(|| vec![0.0; tv.len()]);
                kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    d,
                    layout,
                    weights,
                    gy,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                if let Some(d) = dq {
                    acc(*q, &mut |g| add_into(g, &d));
                }
                if let Some(d) = dk {
                    acc(*k, &mut |g| add_into(g, &d));
                }
                if let Some(d) = dv {
                    acc(*v, &mut |g| add_into(g, &d));
                }
            }
            Op::GatherRows(x, idx) => {
                let c = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (o, &r) in idx.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &gy[o * c..(o + 1) * c]);
                    }
                });
            }
            Op::AddTiled(x, pos) => {
                let block = self.value(*pos).len();
                acc(*x, &mut |g| add_into(g, gy));
                acc(*pos, &mut |g| {
                    for chunk in gy.chunks(block) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::InsertCls { x, cls, group } => {
                let d = self.value(*cls).len();
                let stride = (group + 1) * d;
                acc(*x, &mut |g| {
                    for (gi, chunk) in gy.chunks(stride).enumerate() {
                        add_into(&mut g[gi * group * d..(gi + 1) * group * d], &chunk[d..]);
                    }
                });
                acc(*cls, &mut |g| {
                    for chunk in gy.chunks(stride) {
                        add_into(g, &chunk[..d]);
                    }
                });
            }
            Op::CosineRows { a, b, na, nb } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cos = node.value.data();
                let d = ta.cols();
                let rule = |g: &mut [f64], own: &Tensor, other: &Tensor, no: &[f64], nt: &[f64]| {
                    for r in 0..own.rows() {
                        let (x, y) = (own.row(r), other.row(r));
                        let inv = 1.0 / (no[r] * nt[r]);
                        let self_term = cos[r] / (no[r] * no[r]);
                        for i in 0..d {
                            g[r * d + i] += gy[r] * (y[i] * inv - self_term * x[i]);
                        }
                    }
                };
                acc(*a, &mut |g| rule(g, ta, tb, na, nb));
                acc(*b, &mut |g| rule(g, tb, ta, nb, na));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for ((gi, yi), dy) in g.iter_mut().zip(y).zip(gy) {
                        *gi += dy * yi;
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |g| {
                    for (gi, dy) in g.iter_mut().zip(gy) {
                        *gi += dy * c;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let tx = self.value(*x);
                let sv = self.value(*s).item();
                acc(*x, &mut |g| {
                    for (gi, dy) in g.iter_mut().zip(gy) {
                        *gi += dy * sv;
                    }
                });
                acc(*s, &mut |g| g[0] += kernels::dot(gy, tx.data()));
            }
            Op::ShiftBy(x, s) => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*s, &mut |g| g[0] += gy.iter().sum::<f64>());
            }
            Op::MulConst(x, c) => {
                acc(*x, &mut |g| {
                    for ((gi, dy), k) in g.iter_mut().zip(gy).zip(c) {
                        *gi += dy * k;
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |g| {
                    for ((gi, &xi), dy) in g.iter_mut().zip(tx.data()).zip(gy) {
                        *gi += dy * kernels::sigmoid(-xi);
                    }
                });
            }
            Op::WeightedSum(x, w) => {
                acc(*x, &mut |g| {
                    for (gi, wi) in g.iter_mut().zip(w) {
                        *gi += gy[0] * wi;
                    }
                });
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc(v, &mut |g| g[0] += gy[0] * c);
                }
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap().with_grad()
    }

    /// Central differences over every input entry, compared with the tape.
    fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward(out).unwrap();
        let h = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ti]).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()]);
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[e] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.scalar(op) - gm.scalar(om)) / (2.0 * h);
                let a = analytic[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {ti} entry {e}: analytic {a} vs fd {fd}");
            }
        }
    }

    /// Reduces a matrix to a scalar with fixed random weights so every
    /// output entry carries a distinct upstream gradient.
    fn reduce(g: &mut Graph, x: Var, seed: u64) -> Var {
        let n = g.value(x).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.weighted_sum(x, w).unwrap()
    }

    #[test]
    fn matmul_bias_gelu_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            rand_tensor(&mut rng, 3, 4),
            rand_tensor(&mut rng, 4, 5),
            rand_tensor(&mut rng, 1, 5),
        ];
        check_grad(inputs, |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.add_bias(y, v[2]).unwrap();
            let y = g.gelu(y);
            reduce(g, y, 9)
        });
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(&mut rng, 3, 6),
            rand_tensor(&mut rng, 1, 6),
            rand_tensor(&mut rng, 1, 6),
        ];
        check_grad(inputs, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            reduce(g, y, 3)
        });
    }

    #[test]
    fn attention_grad_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, blocks, len, d, heads) = (4, 2, 3, 4, 2);
        let mask: Vec<bool> = (0..p * heads * len).map(|i| i % 4 != 1).collect();
        let inputs = vec![
            rand_tensor(&mut rng, p, d),
            rand_tensor(&mut rng, blocks * len, d),
            rand_tensor(&mut rng, blocks * len, d),
        ];
        check_grad(inputs, |g, v| {
            let layout = AttentionLayout {
                blocks: vec![0, 1, 1, 0],
                block_len: len,
                heads,
                mask: Some(mask.clone()),
            };
            let y = g.attention(v[0], v[1], v[2], layout).unwrap();
            reduce(g, y, 4)
        });
    }

    #[test]
    fn gather_tile_cls_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            rand_tensor(&mut rng, 4, 3),
            rand_tensor(&mut rng, 1, 3),
            rand_tensor(&mut rng, 3, 3),
        ];
        check_grad(inputs, |g, v| {
            let y = g.insert_cls(v[0], v[1], 2).unwrap();
            let y = g.add_tiled(y, v[2]).unwrap();
            let y = g.gather_rows(y, vec![5, 0, 0, 2]).unwrap();
            reduce(g, y, 5)
        });
    }

    #[test]
    fn cosine_siglip_chain_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            rand_tensor(&mut rng, 3, 4),
            rand_tensor(&mut rng, 3, 4),
            rand_tensor(&mut rng, 1, 1),
            rand_tensor(&mut rng, 1, 1),
        ];
        check_grad(inputs, |g, v| {
            let s = g.cosine_rows(v[0], v[1]).unwrap();
            let tau = g.exp(v[2]);
            let s = g.scale_by(s, tau).unwrap();
            let nb = g.scale(v[3], -1.0);
            let s = g.shift_by(s, nb).unwrap();
            let s = g.mul_const(s, vec![1.0, -1.0, -1.0]).unwrap();
            let s = g.log_sigmoid(s);
            let a = g.weighted_sum(s, vec![0.5, 1.0, 2.0]).unwrap();
            let b = g.weighted_sum(v[3], vec![1.0]).unwrap();
            g.lincomb(vec![(a, -1.0), (b, 0.3)]).unwrap()
        });
    }

    #[test]
    fn zero_norm_cosine_faults() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap().with_grad());
        let b = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let c = g.cosine_rows(a, b).unwrap();
        let s = g.weighted_sum(c, vec![1.0]).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Domain(_))));
    }

    #[test]
    fn non_finite_values_fault() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1e3).with_grad());
        let e = g.exp(a);
        assert!(matches!(g.check(), Err(Error::NonFinite { .. })));
        assert!(g.backward(e).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.leaf(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap().with_grad());
        let y = g.matmul(a, w).unwrap();
        let s = g.weighted_sum(y, vec![1.0, 1.0]).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(w).unwrap(), &[4.0, 6.0]);
    }
}

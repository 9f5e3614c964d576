//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node appended after its inputs,
//! so node order is a topological order and [`Graph::backward`] simply walks
//! the nodes in reverse. Parameters are bound by reference from a
//! [`ParamStore`] for the lifetime of the graph; one graph serves one
//! forward/backward pass.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{mm_nt, mm_tn, transpose, Tensor, TensorError};
use crate::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Input,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, S),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ScatterCols { x: Var, ids: Vec<usize> },
    Log { x: Var, floor: S },
    Nll { x: Var, targets: Vec<Option<usize>>, count: usize },
    Dropout { x: Var, mask: Vec<S> },
    Sum(Var),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl<'a, S: Scalar> Default for Graph<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a, S: Scalar> Graph<'a, S> {
    /// A graph that records gradients for bound parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph for inference: parameters are bound without gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed constant leaf.
    pub fn constant_ref(&mut self, t: &'a Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked when the graph records gradients.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Input,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter (once per graph) and returns its node.
    pub fn param(&mut self, store: &'a ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Input,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose2()?;
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// `x[.., d] + bias[d]`, broadcasting the bias over leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = xv.last_dim();
        if bv.numel() != d {
            return Err(shape_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg, "add_row")
    }

    /// `x[r×c] * g[r×1]`, scaling each row by its gate.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        let (xv, gv) = (self.value(x), self.value(g));
        let (r, c) = xv.dims2("mul_col")?;
        if gv.numel() != r {
            return Err(shape_err("mul_col", xv, gv));
        }
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let k = gv.data()[i];
            row.iter_mut().for_each(|o| *o *= k);
        }
        let rg = self.rg(x) || self.rg(g);
        self.push(out, Op::MulCol(x, g), rg, "mul_col")
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: S, shift: S) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg, "affine")
    }

    pub fn scale(&mut self, x: Var, k: S) -> Result<Var, TensorError> {
        self.affine(x, k, S::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, a, half) = (S::lit(GELU_C), S::lit(GELU_A), S::lit(0.5));
        let out = self
            .value(x)
            .map(|v| half * v * (S::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` where `mask[i] == false` entries get exactly zero
    /// probability. A fully masked slice yields all zeros.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(TensorError::Invalid(format!(
                    "softmax: mask of {} entries for shape {shape:?}",
                    m.len()
                )));
            }
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer = xv.numel() / (len * inner);
        let mut out = vec![S::zero(); xv.numel()];
        let data = xv.data();
        let keep = |idx: usize| mask.is_none_or(|m| m[idx]);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut max = S::neg_infinity();
                for k in 0..len {
                    if keep(idx(k)) {
                        max = max.max(data[idx(k)]);
                    }
                }
                if max == S::neg_infinity() {
                    continue;
                }
                let mut total = S::zero();
                for k in 0..len {
                    if keep(idx(k)) {
                        let e = (data[idx(k)] - max).exp();
                        out[idx(k)] = e;
                        total += e;
                    }
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg, "log_softmax")
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let eps = S::lit(eps);
        let n = S::from_usize(d).expect("dimension fits");
        let mut out = xv.clone();
        let mut rstds = Vec::with_capacity(xv.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rstd = S::one() / (var + eps).sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv.data()[k] + bv.data()[k];
            }
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, rstd: rstds }, rg, "layer_norm")
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (v, d) = tv.dims2("embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding: empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(table);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg, "embedding")
    }

    /// Concatenation of rank-2 tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?);
        let (r, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (pr, pc) = pv.dims2("concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", first, pv));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Concatenation of rank-2 tensors along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?);
        let (_, c) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (pr, pc) = pv.dims2("concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", first, pv));
            }
            rows += pr;
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let data = (0..r).flat_map(|i| xv.row(i)[start..start + len].iter().copied()).collect();
        let out = Tensor::matrix(r, len, data)?;
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: r,
            });
        }
        let out = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    /// Scatter-adds the columns of `x[r×k]` into `width` columns:
    /// `out[i, ids[j]] += x[i, j]`.
    pub fn scatter_cols(&mut self, x: Var, ids: &[usize], width: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, k) = xv.dims2("scatter_cols")?;
        if ids.len() != k {
            return Err(TensorError::Invalid(format!("scatter_cols: {} ids for {k} columns", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= width) {
            return Err(TensorError::Index {
                op: "scatter_cols",
                index: bad,
                extent: width,
            });
        }
        let mut data = vec![S::zero(); r * width];
        for i in 0..r {
            let row = xv.row(i);
            for (j, &id) in ids.iter().enumerate() {
                data[i * width + id] += row[j];
            }
        }
        let out = Tensor::matrix(r, width, data)?;
        let rg = self.rg(x);
        self.push(out, Op::ScatterCols { x, ids: ids.to_vec() }, rg, "scatter_cols")
    }

    /// `ln(max(x, floor))`. The gradient is `1 / max(x, floor)`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var, TensorError> {
        let floor = S::lit(floor);
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(out, Op::Log { x, floor }, rg, "log")
    }

    /// Mean of `-log_probs[t, targets[t]]` over positions whose target is
    /// not `ignore_index`. With every position ignored the loss is 0.
    pub fn nll(&mut self, log_probs: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var, TensorError> {
        let lp = self.value(log_probs);
        let (l, v) = lp.dims2("nll")?;
        if targets.len() != l {
            return Err(TensorError::Invalid(format!("nll: {} targets for {l} rows", targets.len())));
        }
        let mut picked = Vec::with_capacity(l);
        let mut total = S::zero();
        for (t, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore_index {
                picked.push(None);
                continue;
            }
            if tgt >= v {
                return Err(TensorError::Index {
                    op: "nll",
                    index: tgt,
                    extent: v,
                });
            }
            total -= lp.at2(t, tgt);
            picked.push(Some(tgt));
        }
        let count = picked.iter().flatten().count();
        let loss = if count == 0 {
            S::zero()
        } else {
            total / S::from_usize(count).expect("count fits")
        };
        let rg = self.rg(log_probs);
        self.push(
            Tensor::scalar(loss),
            Op::Nll {
                x: log_probs,
                targets: picked,
                count,
            },
            rg,
            "nll",
        )
    }

    /// Inverted dropout. Identity when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(TensorError::Invalid(format!("dropout rate {rate} must be below 1")));
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<S> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg, "dropout")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = S::from_usize(self.value(x).numel()).expect("size fits");
        let s = self.sum(x)?;
        self.scale(s, S::one() / n)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TensorError> {
        self.backward_scaled(loss, S::one())
    }

    /// Back-propagates `seed * d(loss)`.
    pub fn backward_scaled(&self, loss: Var, seed: S) -> Result<Gradients<S>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Invalid(format!("backward from non-scalar {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), seed));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<S>) -> Tensor<S> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient matches input shape")
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<(), TensorError> {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2("matmul")?;
                let (_, n) = bv.dims2("matmul")?;
                if self.rg(*a) {
                    let da = mm_nt(dy.data(), bv.data(), m, n, k);
                    self.acc(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let db = mm_tn(av.data(), dy.data(), m, k, n);
                    self.acc(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dy.dims2("transpose")?;
                self.acc(grads, *a, self.like(*a, transpose(dy.data(), r, c)));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = dy.data().iter().zip(bv.data()).map(|(&g, &q)| g * q).collect();
                    self.acc(grads, *a, self.like(*a, d));
                }
                if self.rg(*b) {
                    let d = dy.data().iter().zip(av.data()).map(|(&g, &p)| g * p).collect();
                    self.acc(grads, *b, self.like(*b, d));
                }
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, dy.clone());
                if self.rg(*bias) {
                    let d = dy.last_dim();
                    let mut db = vec![S::zero(); d];
                    for row in dy.data().chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    self.acc(grads, *bias, self.like(*bias, db));
                }
            }
            Op::MulCol(x, g) => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let c = xv.last_dim();
                if self.rg(*x) {
                    let mut dx = dy.clone();
                    for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                        let k = gv.data()[r];
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    self.acc(grads, *x, dx);
                }
                if self.rg(*g) {
                    let dg = dy
                        .data()
                        .chunks(c)
                        .zip(xv.data().chunks(c))
                        .map(|(d, x)| d.iter().zip(x).map(|(&p, &q)| p * q).sum())
                        .collect();
                    self.acc(grads, *g, self.like(*g, dg));
                }
            }
            Op::Affine(x, k) => self.acc(grads, *x, dy.map(|g| g * *k)),
            Op::Sigmoid(x) => {
                let d = dy.data().iter().zip(y.data()).map(|(&g, &s)| g * s * (S::one() - s)).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Gelu(x) => {
                let (c, a, half) = (S::lit(GELU_C), S::lit(GELU_A), S::lit(0.5));
                let three = S::lit(3.0);
                let xv = self.value(*x);
                let d = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (S::one() - t * t) * c * (S::one() + three * a * v * v);
                        g * (half * (S::one() + t) + half * v * dt)
                    })
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Softmax { x, axis } => {
                let shape = y.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer = y.numel() / (len * inner);
                let (yd, gd) = (y.data(), dy.data());
                let mut dx = vec![S::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: S = (0..len).map(|k| yd[idx(k)] * gd[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::LogSoftmax(x) => {
                let d = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yrow, grow) in y.data().chunks(d).zip(dy.data().chunks(d)) {
                    let total: S = grow.iter().copied().sum();
                    dx.extend(yrow.iter().zip(grow).map(|(&l, &g)| g - l.exp() * total));
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let d = xv.last_dim();
                let n = S::from_usize(d).expect("dimension fits");
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dg = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                for ((xrow, grow), &r) in xv.data().chunks(d).zip(dy.data().chunks(d)).zip(rstd) {
                    let mean = xrow.iter().copied().sum::<S>() / n;
                    let xhat: Vec<S> = xrow.iter().map(|&v| (v - mean) * r).collect();
                    let dxhat: Vec<S> = grow.iter().zip(gv.data()).map(|(&g, &w)| g * w).collect();
                    let m1 = dxhat.iter().copied().sum::<S>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for k in 0..d {
                        dx.push(r * (dxhat[k] - m1 - xhat[k] * m2));
                        dg[k] += grow[k] * xhat[k];
                        db[k] += grow[k];
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
                self.acc(grads, *gain, self.like(*gain, dg));
                self.acc(grads, *bias, self.like(*bias, db));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut dt = vec![S::zero(); tv.numel()];
                for (row, &id) in dy.data().chunks(d).zip(ids) {
                    dt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                self.acc(grads, *table, self.like(*table, dt));
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dy.dims2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    if self.rg(p) {
                        let d = (0..r)
                            .flat_map(|i| dy.data()[i * total + offset..i * total + offset + c].iter().copied())
                            .collect();
                        self.acc(grads, p, self.like(p, d));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        self.acc(grads, p, self.like(p, dy.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2("slice_cols")?;
                let len = dy.last_dim();
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(dy.row(i));
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut dx = vec![S::zero(); xv.numel()];
                dx[start * c..start * c + dy.numel()].copy_from_slice(dy.data());
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::ScatterCols { x, ids } => {
                let (r, width) = dy.dims2("scatter_cols")?;
                let d = (0..r)
                    .flat_map(|i| ids.iter().map(move |&id| (i, id)))
                    .map(|(i, id)| dy.data()[i * width + id])
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x);
                let d = dy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| g / v.max(*floor))
                    .collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Nll { x, targets, count } => {
                let xv = self.value(*x);
                let v = xv.last_dim();
                let mut dx = vec![S::zero(); xv.numel()];
                if *count > 0 {
                    let k = -dy.data()[0] / S::from_usize(*count).expect("count fits");
                    for (t, tgt) in targets.iter().enumerate() {
                        if let Some(tgt) = tgt {
                            dx[t * v + tgt] = k;
                        }
                    }
                }
                self.acc(grads, *x, self.like(*x, dx));
            }
            Op::Dropout { x, mask } => {
                let d = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.acc(grads, *x, self.like(*x, d));
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                let n = self.value(*x).numel();
                self.acc(grads, *x, self.like(*x, vec![g; n]));
            }
        }
        Ok(())
    }
}

/// Gradients from one backward pass.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[0.0, 0.0]]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[&[1000.0, 0.0]]));
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_other_axis_and_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        assert!((v.at2(0, 0) + v.at2(1, 0) - 1.0).abs() < 1e-12);
        let z = g.softmax_masked(x, 1, Some(&[true, false, false, false])).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(t(&[&[5.0, 5.0, 5.0, 5.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::<f64>::new();
        let lp = g.constant(t(&[&[0.0, f64::MIN_POSITIVE.ln()], &[-1e3, 0.0]]));
        let l = g.nll(lp, &[0, 1], None).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);

        let u = (0.25f64).ln();
        let lp = g.input(t(&[&[u, u, u, u]]));
        let l = g.nll(lp, &[2], None).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let l = g.nll(lp, &[7], Some(7)).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(lp).unwrap().data().iter().all(|&v| v == 0.0));

        assert!(matches!(g.nll(lp, &[4], None), Err(TensorError::Index { .. })));
    }

    #[test]
    fn embedding_scatter_adds_repeated_ids() {
        let mut g = Graph::<f64>::new();
        let table = g.input(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.embedding(table, &[3]).is_err());
    }

    #[test]
    fn dropout_is_identity_at_zero_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::ones(&[4, 4]));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[&[1e300]]));
        assert!(matches!(g.affine(x, 1e300, 0.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn unused_params_have_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(&[1])).unwrap();
        let b = store.add("b", Tensor::ones(&[1])).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        assert_eq!(g.param(&store, a), av);
        let s = g.sum(av).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(a).unwrap().data(), &[1.0]);
        assert!(grads.param(b).is_none());
    }
}

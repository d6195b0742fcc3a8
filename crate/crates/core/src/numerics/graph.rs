//! Dynamic reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value; [`Graph::backward`] walks the tape in reverse.
//! Gradients of intermediate nodes are scratch state local to one backward
//! call, while gradients of leaves accumulate across calls.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamStore, TrainableSet};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Denominator offset of layer normalization; constant rows map to zero.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
        padding: Option<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    RepeatRows(Var),
    MeanAll(Var),
    MeanRows(Var),
    MeanCols(Var),
    SumAll(Var),
    MaskedFill {
        a: Var,
        mask: Rc<Vec<bool>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: f64,
        probs: Vec<f64>,
    },
    RoundSte(Var),
    Unfold {
        a: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Optionally bound to a [`ParamStore`], in which case
/// [`Graph::param`] imports named parameters as leaves on first use.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: Option<&'p ParamStore>,
    trainable: Option<&'p TrainableSet>,
    bound: HashMap<String, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: None,
            trainable: None,
            bound: HashMap::new(),
        }
    }

    /// Graph whose [`param`](Self::param) lookups resolve against `store`.
    /// Parameters in `trainable` become gradient-tracking leaves; all others
    /// are constants.
    pub fn with_params(store: &'p ParamStore, trainable: Option<&'p TrainableSet>) -> Self {
        Self {
            params: Some(store),
            trainable,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Gradient-tracking leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::invalid("graph is not bound to a parameter store"))?;
        let value = store.get(name)?.clone();
        let trainable = self.trainable.is_some_and(|t| t.contains(name));
        let v = self.push_raw(value, Op::Leaf, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, sorted by name.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.clone(), g.to_vec())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- forward ops ----

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false, "matmul")
    }

    /// `a · bᵀ`; used for `x·Wᵀ` projections and attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true, "matmul_nt")
    }

    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        name: &'static str,
    ) -> Result<Var> {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if self.shape(a).len() > 2 || self.shape(b).len() > 2 || k != k2 {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            a_t,
            self.value(b).data(),
            b_t,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(name, value, Op::MatMul { a, b, a_t, b_t, m, k, n }, &[a, b])
    }

    fn is_row_of(&self, row: Var, a: Var) -> bool {
        let r = self.value(row);
        let t = self.value(a);
        r.numel() == t.cols() && r.rows() == 1
    }

    /// Elementwise sum. `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
            let value = Tensor::new(self.shape(a).to_vec(), data)?;
            self.push("add", value, Op::Add(a, b), &[a, b])
        } else if self.is_row_of(b, a) {
            let cols = self.value(a).cols();
            let row = self.value(b).data();
            let data = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + row[i % cols])
                .collect();
            let value = Tensor::new(self.shape(a).to_vec(), data)?;
            self.push("add", value, Op::AddRow(a, b), &[a, b])
        } else {
            Err(shape_err("add", self.shape(a), self.shape(b)))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product. `b` may be a single row broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
            let value = Tensor::new(self.shape(a).to_vec(), data)?;
            self.push("mul", value, Op::Mul(a, b), &[a, b])
        } else if self.is_row_of(b, a) {
            let cols = self.value(a).cols();
            let row = self.value(b).data();
            let data = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * row[i % cols])
                .collect();
            let value = Tensor::new(self.shape(a).to_vec(), data)?;
            self.push("mul", value, Op::MulRow(a, b), &[a, b])
        } else {
            Err(shape_err("mul", self.shape(a), self.shape(b)))
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    /// SiLU, `x·σ(x)`: the network-wide nonlinearity.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| x * sigmoid(x)).collect(),
        )?;
        self.push("silu", value, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.tanh()).collect())?;
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// affine `gamma`/`beta` (each one row of width `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        if !self.is_row_of(gamma, x) || !self.is_row_of(beta, x) {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Row lookup. Ids equal to `padding` yield a zero row and pass no
    /// gradient to the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize], padding: Option<usize>) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::invalid("embedding: empty id list"));
        }
        let mut out = vec![0.0; ids.len() * dim];
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::invalid(format!(
                    "embedding: id {id} out of range for vocabulary of {vocab}"
                )));
            }
            if Some(id) != padding {
                out[i * dim..(i + 1) * dim].copy_from_slice(t.row(id));
            }
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                padding,
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.value(p).cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a);
        if len == 0 || start + len > rows {
            return Err(shape_err("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        self.push("slice_rows", value, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a);
        if len == 0 || start + len > cols {
            return Err(shape_err("slice_cols", self.shape(a), &[start, len]));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        self.push("slice_cols", value, Op::SliceCols { a, start }, &[a])
    }

    /// Tiles a single row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 || n == 0 {
            return Err(shape_err("repeat_rows", t.shape(), &[n]));
        }
        let cols = t.cols();
        let data = t.data().repeat(n);
        let value = Tensor::new(vec![n, cols], data)?;
        self.push("repeat_rows", value, Op::RepeatRows(a), &[a])
    }

    /// Mean over the given axis of a 2-D tensor (`0` → one row, `1` → one
    /// column), or over every entry when `axis` is `None`.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        match axis {
            None => {
                let m = t.data().iter().sum::<f64>() / t.numel() as f64;
                self.push("mean", Tensor::scalar(m), Op::MeanAll(a), &[a])
            }
            Some(0) => {
                let mut out = vec![0.0; cols];
                for r in 0..rows {
                    for (o, v) in out.iter_mut().zip(t.row(r)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= rows as f64);
                let value = Tensor::new(vec![1, cols], out)?;
                self.push("mean", value, Op::MeanRows(a), &[a])
            }
            Some(1) => {
                let out = (0..rows)
                    .map(|r| t.row(r).iter().sum::<f64>() / cols as f64)
                    .collect();
                let value = Tensor::new(vec![rows, 1], out)?;
                self.push("mean", value, Op::MeanCols(a), &[a])
            }
            Some(ax) => Err(Error::invalid(format!("mean: axis {ax} out of range"))),
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Replaces entries where `mask` is true with `value`; those entries
    /// pass no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: Rc<Vec<bool>>, value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(shape_err("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("masked_fill", out, Op::MaskedFill { a, mask }, &[a])
    }

    /// `scale · Σ_rows −log softmax(logits)[target]` over rows with a target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        scale: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if let Some(tgt) = *target {
                if tgt >= cols {
                    return Err(Error::invalid(format!(
                        "cross_entropy: target {tgt} out of range for {cols} classes"
                    )));
                }
                loss += lse - row[tgt];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(scale * loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            &[logits],
        )
    }

    /// Rounds half away from zero; the backward pass treats the rounding
    /// as identity (straight-through estimator).
    pub fn round_ste(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.round()).collect())?;
        self.push("round_ste", value, Op::RoundSte(a), &[a])
    }

    /// im2col for a 1-D convolution over time. Input `T×C`; output
    /// `T_out × (kernel·C)` with `T_out = ⌊(T + 2·pad − kernel)/stride⌋ + 1`.
    pub fn unfold(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (t_in, c) = self.dims2(a);
        if kernel == 0 || stride == 0 || t_in + 2 * pad < kernel {
            return Err(shape_err("unfold", self.shape(a), &[kernel, stride, pad]));
        }
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let src = self.value(a).data();
        let width = kernel * c;
        let mut out = vec![0.0; t_out * width];
        for t in 0..t_out {
            for j in 0..kernel {
                let pos = (t * stride + j) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < t_in {
                    let p = pos as usize;
                    out[t * width + j * c..t * width + (j + 1) * c]
                        .copy_from_slice(&src[p * c..(p + 1) * c]);
                }
            }
        }
        let value = Tensor::new(vec![t_out, width], out)?;
        self.push(
            "unfold",
            value,
            Op::Unfold {
                a,
                kernel,
                stride,
                pad,
            },
            &[a],
        )
    }

    /// Per-channel convolution over time with "same" zero padding.
    /// `x`: `T×C`, `w`: `kernel×C` with odd `kernel`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t_len, c) = self.dims2(x);
        let (k, wc) = self.dims2(w);
        if wc != c || k % 2 == 0 {
            return Err(shape_err("depthwise_conv", self.shape(x), self.shape(w)));
        }
        let pad = (k / 2) as isize;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for j in 0..k {
                let pos = t as isize + j as isize - pad;
                if pos < 0 || pos as usize >= t_len {
                    continue;
                }
                let p = pos as usize;
                for ch in 0..c {
                    out[t * c + ch] += ws[j * c + ch] * xs[p * c + ch];
                }
            }
        }
        let value = Tensor::new(vec![t_len, c], out)?;
        self.push("depthwise_conv", value, Op::DepthwiseConv { x, w }, &[x, w])
    }

    // ---- backward ----

    /// Accumulates `∂loss/∂leaf` into every gradient-tracking leaf reachable
    /// from `loss`. Calling twice without [`zero_grad`](Self::zero_grad)
    /// doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            &Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if self.wants(a) {
                    let ga = slot(grads, nodes, a);
                    if a_t {
                        gemm(k, n, m, bv, b_t, g, true, ga);
                    } else {
                        gemm(m, n, k, g, false, bv, !b_t, ga);
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, nodes, b);
                    if b_t {
                        gemm(n, m, k, g, true, av, a_t, gb);
                    } else {
                        gemm(k, m, n, av, !a_t, g, false, gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(slot(grads, nodes, v), g);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if self.wants(a) {
                    add_into(slot(grads, nodes, a), g);
                }
                if self.wants(row) {
                    let gr = slot(grads, nodes, row);
                    let cols = gr.len();
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(slot(grads, nodes, a), g);
                }
                if self.wants(b) {
                    slot(grads, nodes, b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if self.wants(a) {
                    let ga = slot(grads, nodes, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if self.wants(b) {
                    let gb = slot(grads, nodes, b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let av = nodes[a.0].value.data();
                let rv = nodes[row.0].value.data();
                let cols = rv.len();
                if self.wants(a) {
                    let ga = slot(grads, nodes, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * rv[j % cols];
                    }
                }
                if self.wants(row) {
                    let gr = slot(grads, nodes, row);
                    for j in 0..g.len() {
                        gr[j % cols] += g[j] * av[j];
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.wants(a) {
                    slot(grads, nodes, a).iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            &Op::Silu(a) => {
                if self.wants(a) {
                    let xv = nodes[a.0].value.data();
                    let ga = slot(grads, nodes, a);
                    for j in 0..g.len() {
                        let s = sigmoid(xv[j]);
                        ga[j] += g[j] * s * (1.0 + xv[j] * (1.0 - s));
                    }
                }
            }
            &Op::Tanh(a) => {
                if self.wants(a) {
                    let yv = out.data();
                    let ga = slot(grads, nodes, a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * (1.0 - yv[j] * yv[j]);
                    }
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    let (r, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let ga = slot(grads, nodes, a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let cols = out.cols();
                let rows = out.rows();
                if self.wants(gamma) {
                    let gg = slot(grads, nodes, gamma);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(beta) {
                    let gb = slot(grads, nodes, beta);
                    for chunk in g.chunks(cols) {
                        add_into(gb, chunk);
                    }
                }
                if self.wants(x) {
                    let gam = nodes[gamma.0].value.data();
                    let gx = slot(grads, nodes, x);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gam[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += inv_std[r]
                                * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                if self.wants(a) {
                    let cols = out.cols();
                    let yv = out.data();
                    let ga = slot(grads, nodes, a);
                    for r in 0..out.rows() {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| g[base + c] * yv[base + c]).sum();
                        for c in 0..cols {
                            ga[base + c] += yv[base + c] * (g[base + c] - dot);
                        }
                    }
                }
            }
            Op::Embedding {
                table,
                ids,
                padding,
            } => {
                if self.wants(*table) {
                    let dim = out.cols();
                    let gt = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) != *padding {
                            add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if self.wants(p) {
                        add_into(slot(grads, nodes, p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if self.wants(p) {
                        let gp = slot(grads, nodes, p);
                        for r in 0..out.rows() {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + off..r * total + off + c],
                            );
                        }
                    }
                    off += c;
                }
            }
            &Op::SliceRows { a, start } => {
                if self.wants(a) {
                    let cols = out.cols();
                    let ga = slot(grads, nodes, a);
                    add_into(&mut ga[start * cols..start * cols + g.len()], g);
                }
            }
            &Op::SliceCols { a, start } => {
                if self.wants(a) {
                    let c_in = nodes[a.0].value.cols();
                    let len = out.cols();
                    let ga = slot(grads, nodes, a);
                    for r in 0..out.rows() {
                        add_into(
                            &mut ga[r * c_in + start..r * c_in + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            &Op::RepeatRows(a) => {
                if self.wants(a) {
                    let ga = slot(grads, nodes, a);
                    let cols = ga.len();
                    for chunk in g.chunks(cols) {
                        add_into(ga, chunk);
                    }
                }
            }
            &Op::MeanAll(a) => {
                if self.wants(a) {
                    let ga = slot(grads, nodes, a);
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            &Op::SumAll(a) => {
                if self.wants(a) {
                    slot(grads, nodes, a).iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::MeanRows(a) => {
                if self.wants(a) {
                    let rows = nodes[a.0].value.rows() as f64;
                    let ga = slot(grads, nodes, a);
                    let cols = g.len();
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j % cols] / rows;
                    }
                }
            }
            &Op::MeanCols(a) => {
                if self.wants(a) {
                    let cols = nodes[a.0].value.cols();
                    let ga = slot(grads, nodes, a);
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j / cols] / cols as f64;
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if self.wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    for j in 0..g.len() {
                        if !mask[j] {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                if self.wants(*logits) {
                    let cols = nodes[logits.0].value.cols();
                    let s = scale * g[0];
                    let gl = slot(grads, nodes, *logits);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..cols {
                            gl[r * cols + c] += s * probs[r * cols + c];
                        }
                        gl[r * cols + t] -= s;
                    }
                }
            }
            &Op::RoundSte(a) => {
                if self.wants(a) {
                    add_into(slot(grads, nodes, a), g);
                }
            }
            &Op::Unfold {
                a,
                kernel,
                stride,
                pad,
            } => {
                if self.wants(a) {
                    let (t_in, c) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                    let width = kernel * c;
                    let ga = slot(grads, nodes, a);
                    for t in 0..out.rows() {
                        for j in 0..kernel {
                            let pos = (t * stride + j) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < t_in {
                                let p = pos as usize;
                                add_into(
                                    &mut ga[p * c..(p + 1) * c],
                                    &g[t * width + j * c..t * width + (j + 1) * c],
                                );
                            }
                        }
                    }
                }
            }
            &Op::DepthwiseConv { x, w } => {
                let (t_len, c) = (out.rows(), out.cols());
                let k = nodes[w.0].value.rows();
                let pad = (k / 2) as isize;
                let xs = nodes[x.0].value.data();
                let ws = nodes[w.0].value.data();
                if self.wants(x) {
                    let gx = slot(grads, nodes, x);
                    for t in 0..t_len {
                        for j in 0..k {
                            let pos = t as isize + j as isize - pad;
                            if pos < 0 || pos as usize >= t_len {
                                continue;
                            }
                            let p = pos as usize;
                            for ch in 0..c {
                                gx[p * c + ch] += g[t * c + ch] * ws[j * c + ch];
                            }
                        }
                    }
                }
                if self.wants(w) {
                    let gw = slot(grads, nodes, w);
                    for t in 0..t_len {
                        for j in 0..k {
                            let pos = t as isize + j as isize - pad;
                            if pos < 0 || pos as usize >= t_len {
                                continue;
                            }
                            let p = pos as usize;
                            for ch in 0..c {
                                gw[j * c + ch] += g[t * c + ch] * xs[p * c + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a_val = t(&[3, 3], &[1., -2., 3., 0.5, 7., -1., 2., 2., 9.]);
        let i = g.input(Tensor::eye(3));
        let a = g.input(a_val.clone());
        let out = g.matmul(i, a).unwrap();
        assert!(g.value(out).bit_eq(&a_val));
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[0., 0., 0.]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_row_layer_norm_is_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 4], &[3., 3., 3., 3., 1., 2., 3., 4.]));
        let gamma = g.input(Tensor::full(&[4], 1.0));
        let beta = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));
        assert!(g.value(y).row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.leaf(Tensor::scalar(-4.0));
        let z = g.scale(y, 0.0).unwrap();
        let x2 = g.mul(x, x).unwrap();
        let w = g.add(x2, z).unwrap();
        g.backward(w).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_accumulates_exactly() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[0.3, -1.2, 2.5, 0.7]));
        let b = g.input(t(&[2, 2], &[1.1, 0.4, -0.9, 2.0]));
        let p = g.matmul(a, b).unwrap();
        let s = g.silu(p).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        let once = g.grad(a).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(a).unwrap();
        for (o, t) in once.iter().zip(twice) {
            assert_eq!((2.0 * o).to_bits(), t.to_bits());
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(f64::MAX));
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn unfold_length_formula() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[100, 2]));
        let u = g.unfold(a, 3, 2, 0).unwrap();
        assert_eq!(g.shape(u), &[49, 6]);
        let u2 = g.unfold(a, 3, 2, 1).unwrap();
        assert_eq!(g.shape(u2), &[50, 6]);
    }
}

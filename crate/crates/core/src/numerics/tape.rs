//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. Nodes are only
//! ever appended after their inputs, so the tape index order is a topological
//! order and `backward` simply walks it in reverse.

use super::tensor::{
    attention_with_probs, gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, layer_norm_with_stats,
    matmul, softmax_rows, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    GroupBroadcast {
        x: Var,
        group: usize,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    /// Scalar output whose local gradients were computed during the forward pass.
    ScalarWithGrads(Vec<(Var, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are collected for it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, needs_grad, "leaf")
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` for leaves that do
    /// not require grad or were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First non-finite value observed by the debug-build guard, if any.
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Var {
        #[cfg(debug_assertions)]
        if self.non_finite.is_none() {
            self.non_finite = super::tensor::check_finite(name, value.data());
        }
        #[cfg(not(debug_assertions))]
        let _ = name;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad, name)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b], "matmul"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b], "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b], "mul"))
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "add_row_bias")?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} vs {c} columns", b.shape()),
            ));
        }
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(p, q)| p + q))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias], "add_row_bias"))
    }

    /// `x · w + b` for a row-major batch `x[r×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * s).collect(),
        );
        self.push(out, Op::Scale(x, s), &[x], "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| gelu(v)).collect(),
        );
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.max(0.0)).collect(),
        );
        self.push(out, Op::Relu(x), &[x], "relu")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::from_parts(vec![], vec![s]), Op::Sum(x), &[x], "sum")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x], "softmax_rows"))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean: stats.mean,
            rstd: stats.rstd,
        };
        Ok(self.push(out, op, &[x, gamma, beta], "layer_norm"))
    }

    /// `[n × heads·dh]` → `[heads × n × dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "split_heads")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                out[(h * n + i) * dh..(h * n + i + 1) * dh]
                    .copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let t = Tensor::from_parts(vec![heads, n, dh], out);
        Ok(self.push(t, Op::SplitHeads { x, heads }, &[x], "split_heads"))
    }

    /// `[heads × n × dh]` → `[n × heads·dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let (heads, n, dh) = match self.value(x).shape() {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(Error::shape(
                    "merge_heads",
                    format!("expected rank 3, got {s:?}"),
                ))
            }
        };
        let d = heads * dh;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            for i in 0..n {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&src[(h * n + i) * dh..(h * n + i + 1) * dh]);
            }
        }
        let t = Tensor::from_parts(vec![n, d], out);
        Ok(self.push(t, Op::MergeHeads(x), &[x], "merge_heads"))
    }

    /// Scaled dot-product attention on `[heads × len × dh]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, probs) = attention_with_probs(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(
            out,
            Op::Attention { q, k, v, probs },
            &[q, k, v],
            "attention",
        ))
    }

    /// Column-wise max over consecutive row groups: `[(g·k)×c]` → `[g×c]`.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "group_max")?;
        if group == 0 || r % group != 0 {
            return Err(Error::shape(
                "group_max",
                format!("{r} rows not divisible into groups of {group}"),
            ));
        }
        let g = r / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut best = gi * group;
                for row in gi * group + 1..(gi + 1) * group {
                    if src[row * c + j] > src[best * c + j] {
                        best = row;
                    }
                }
                out[gi * c + j] = src[best * c + j];
                argmax[gi * c + j] = best * c + j;
            }
        }
        let t = Tensor::from_parts(vec![g, c], out);
        Ok(self.push(t, Op::GroupMax { x, argmax }, &[x], "group_max"))
    }

    /// Repeats each row `group` times: `[g×c]` → `[(g·group)×c]`.
    pub fn group_broadcast(&mut self, x: Var, group: usize) -> Result<Var> {
        let (g, c) = self.dims2(x, "group_broadcast")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(g * group * c);
        for gi in 0..g {
            for _ in 0..group {
                out.extend_from_slice(&src[gi * c..(gi + 1) * c]);
            }
        }
        let t = Tensor::from_parts(vec![g * group, c], out);
        Ok(self.push(t, Op::GroupBroadcast { x, group }, &[x], "group_broadcast"))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat_cols")?;
        let (rb, cb) = self.dims2(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts {ra} vs {rb}"),
            ));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&x[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&y[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::from_parts(vec![ra, ca + cb], out);
        Ok(self.push(t, Op::ConcatCols(a, b), &[a, b], "concat_cols"))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows", "no inputs"))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {c} vs {pc}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_parts(vec![rows, c], out);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts, "concat_rows"))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of {r}", start + len),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::from_parts(vec![len, c], data);
        Ok(self.push(t, Op::SliceRows { x, start }, &[x], "slice_rows"))
    }

    /// Mean over rows: `[r×c]` → `[1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        if r == 0 {
            return Err(Error::contract("mean_rows", "no rows"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; c];
        for row in src.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let t = Tensor::from_parts(vec![1, c], out);
        Ok(self.push(t, Op::MeanRows(x), &[x], "mean_rows"))
    }

    /// Divides each row by its Euclidean norm. Zero rows are a numeric error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "normalize_rows")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in src.chunks(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "row {i} has norm {n}; cannot normalize"
                )));
            }
            out.extend(row.iter().map(|v| v / n));
            norms.push(n);
        }
        let t = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, &[x], "normalize_rows"))
    }

    /// Records a scalar computed outside the tape together with its local
    /// gradients with respect to `inputs`.
    pub fn scalar_with_grads(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if self.value(*v).numel() != g.len() {
                return Err(Error::shape(
                    "scalar_with_grads",
                    format!(
                        "gradient length {} for input of {:?}",
                        g.len(),
                        self.value(*v).shape()
                    ),
                ));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        let t = Tensor::from_parts(vec![], vec![value]);
        Ok(self.push(t, Op::ScalarWithGrads(inputs), &vars, "scalar_with_grads"))
    }

    /// Back-propagates from a scalar `loss`, populating the gradient of every
    /// reachable leaf that requires grad. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let value = &mut self.nodes[i].value;
                    let total = match value.grad() {
                        Some(prev) => prev.iter().zip(&g).map(|(a, b)| a + b).collect(),
                        None => g,
                    };
                    value.set_grad(total);
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nt(g, bv.data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(av.data(), g, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, g, 1.0);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    let c = db.len();
                    for row in g.chunks(c) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, g, *s);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(*v);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let c = *out.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in
                        dx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let rows = mean.len();
                let mut xhat = vec![0.0; xv.len()];
                for r in 0..rows {
                    for j in 0..d {
                        xhat[r * d + j] = (xv[r * d + j] - mean[r]) * rstd[r];
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for row in g.chunks(d) {
                        axpy(db, row, 1.0);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[r * d + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] +=
                                rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (_, n, dh) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                    let d = heads * dh;
                    for h in 0..*heads {
                        for i in 0..n {
                            axpy(
                                &mut dx[i * d + h * dh..i * d + (h + 1) * dh],
                                &g[(h * n + i) * dh..(h * n + i + 1) * dh],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::MergeHeads(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = self.value(*x).shape();
                    let (heads, n, dh) = (s[0], s[1], s[2]);
                    let d = heads * dh;
                    for h in 0..heads {
                        for i in 0..n {
                            axpy(
                                &mut dx[(h * n + i) * dh..(h * n + i + 1) * dh],
                                &g[i * d + h * dh..i * d + (h + 1) * dh],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                self.attention_backward(*q, *k, *v, probs, g, grads);
            }
            Op::GroupMax { x, argmax } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                }
            }
            Op::GroupBroadcast { x, group } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = *out.shape().last().unwrap();
                    for (r, grow) in g.chunks(c).enumerate() {
                        let gi = r / group;
                        axpy(&mut dx[gi * c..(gi + 1) * c], grow, 1.0);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    for (drow, grow) in da.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        axpy(drow, &grow[..ca], 1.0);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (drow, grow) in db.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        axpy(drow, &grow[ca..], 1.0);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(dp, &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = *out.shape().last().unwrap();
                    axpy(&mut dx[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::MeanRows(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = g.len();
                    let r = dx.len() / c;
                    for drow in dx.chunks_mut(c) {
                        axpy(drow, g, 1.0 / r as f64);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = *out.shape().last().unwrap();
                    for (r, n) in norms.iter().enumerate() {
                        let y = &out.data()[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let dot: f64 = grow.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += (grow[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::ScalarWithGrads(inputs) => {
                for (v, local) in inputs {
                    if let Some(dv) = self.slot(grads, *v) {
                        axpy(dv, local, g[0]);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qs = self.value(q).shape();
        let (heads, m, dh) = (qs[0], qs[1], qs[2]);
        let n = self.value(k).shape()[1];
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );

        let mut dscores = vec![0.0; heads * m * n];
        for h in 0..heads {
            let ph = &probs[h * m * n..(h + 1) * m * n];
            let gh = &g[h * m * dh..(h + 1) * m * dh];
            let vh = &vv[h * n * dh..(h + 1) * n * dh];
            let ds = &mut dscores[h * m * n..(h + 1) * m * n];
            // dP = dO · Vᵀ
            gemm_nt(gh, vh, ds, m, dh, n);
            for (drow, prow) in ds.chunks_mut(n).zip(ph.chunks(n)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot) * scale;
                }
            }
        }
        if let Some(dv) = self.slot(grads, v) {
            for h in 0..heads {
                gemm_tn(
                    &probs[h * m * n..(h + 1) * m * n],
                    &g[h * m * dh..(h + 1) * m * dh],
                    &mut dv[h * n * dh..(h + 1) * n * dh],
                    m,
                    n,
                    dh,
                );
            }
        }
        if let Some(dq) = self.slot(grads, q) {
            for h in 0..heads {
                gemm_nn(
                    &dscores[h * m * n..(h + 1) * m * n],
                    &kv[h * n * dh..(h + 1) * n * dh],
                    &mut dq[h * m * dh..(h + 1) * m * dh],
                    m,
                    n,
                    dh,
                );
            }
        }
        if let Some(dk) = self.slot(grads, k) {
            for h in 0..heads {
                gemm_tn(
                    &dscores[h * m * n..(h + 1) * m * n],
                    &qv[h * m * dh..(h + 1) * m * dh],
                    &mut dk[h * n * dh..(h + 1) * n * dh],
                    m,
                    n,
                    dh,
                );
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not participate in differentiation.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; n])
                .as_mut_slice(),
        )
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

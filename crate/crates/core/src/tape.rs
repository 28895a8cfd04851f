//! Record-and-replay reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its output value and enough
//! information to compute the vector-Jacobian product. Nodes are appended
//! in evaluation order, so walking the node list backwards is a reverse
//! topological order. A tape supports exactly one backward pass; record a
//! fresh tape for the next step.

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shapes, broadcast_strides, for_each_broadcast, gemm_nn, gemm_nt, gemm_tn,
    reduce_to_shape, split_axis, strides, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    Logistic,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// `log(logistic(x))`, evaluated without forming the logistic.
    LogSigmoid,
    /// `max(x, floor)`; gradient passes only where `x > floor`.
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reduce { x: Var, axis: usize, op: Reduce, argmax: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Squash(Var),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// Leaf that receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
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

    /// Gradient of the loss with respect to a leaf, after
    /// [`backward`](Self::backward). `None` for constants, for leaves the
    /// loss does not depend on, and for interior nodes.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return None;
        }
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                name,
                format!("non-finite output {} at flat index {i} (shape {:?})", value.data()[i], value.shape()),
            ));
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::shape(op, format!("axis {axis} out of range for shape {:?}", self.shape(x))));
        }
        Ok(())
    }

    // ----- elementwise -------------------------------------------------

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let xv = self.value(x);
        let name = "elementwise";
        match f {
            Unary::Log => {
                if let Some(v) = xv.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::numeric("log", format!("argument {v} outside domain (0, inf)")));
                }
            }
            Unary::Sqrt => {
                if let Some(v) = xv.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::numeric("sqrt", format!("argument {v} outside domain [0, inf)")));
                }
            }
            _ => {}
        }
        let out: Vec<f64> = xv.data().iter().map(|&v| apply_unary(f, v)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(name, value, Op::Unary(x, f), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }
    pub fn logistic(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Logistic)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::LogSigmoid)
    }
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, Unary::ClampMin(floor))
    }

    /// Elementwise binary op with right-aligned broadcasting. Shapes must be
    /// equal or broadcast-compatible; anything else is a dimension error.
    pub fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(sa, sb).ok_or_else(|| {
            Error::shape(binary_name(op), format!("shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| apply_binary(op, x, y)).collect()
        } else {
            let st_a = broadcast_strides(sa, &out_shape);
            let st_b = broadcast_strides(sb, &out_shape);
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &st_a, &st_b, |o, ia, ib| {
                out[o] = apply_binary(op, av[ia], bv[ib]);
            });
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(binary_name(op), Tensor::from_parts(out_shape, data), Op::Binary(a, b, op), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    // ----- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n] -> [.., m, n]` with
    /// broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        plan.for_each(|o, ia, ib| {
            gemm_nn(&av[ia * m * k..], &bv[ib * k * n..], &mut out[o * m * n..(o + 1) * m * n], m, k, n);
        });
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_parts(plan.out_shape.clone(), out), Op::MatMul(a, b), rg)
    }

    /// [`Tape::matmul`] whose inner sums add the `k` products in ascending
    /// order. The result is then bit-for-bit unchanged when the `k` axis of
    /// `a` and the rows of `b` are permuted together, which makes attention
    /// exactly equivariant to reordering the keys.
    pub fn matmul_sorted(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut terms = vec![0.0; k];
        plan.for_each(|o, ia, ib| {
            let (am, bm) = (&av[ia * m * k..(ia + 1) * m * k], &bv[ib * k * n..(ib + 1) * k * n]);
            for i in 0..m {
                for j in 0..n {
                    for (p, t) in terms.iter_mut().enumerate() {
                        *t = am[i * k + p] * bm[p * n + j];
                    }
                    out[(o * m + i) * n + j] = sorted_sum(&mut terms);
                }
            }
        });
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_parts(plan.out_shape.clone(), out), Op::MatMul(a, b), rg)
    }

    // ----- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push_unchecked(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {rank} axes")));
        }
        let in_st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
        let zeros = vec![0; rank];
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for_each_broadcast(&out_shape, &st, &zeros, |o, ix, _| out[o] = xv[ix]);
        let rg = self.rg(x);
        Ok(self.push_unchecked(Tensor::from_parts(out_shape, out), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", format!("needs rank >= 2, got {:?}", self.shape(x))));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} exceeds extent {} of axis {axis}", start + len, shape[axis]),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push_unchecked(Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("shape {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let xv = self.value(x).data();
                out.extend_from_slice(&xv[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push_unchecked(Tensor::from_parts(out_shape, out), Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::shape("unsqueeze", format!("axis {axis} out of range for {shape:?}")));
        }
        shape.insert(axis, 1);
        self.reshape(x, &shape)
    }

    // ----- reductions ----------------------------------------------------

    /// Reduces `axis` away.
    pub fn reduce(&mut self, x: Var, op: Reduce, axis: usize) -> Result<Var> {
        self.check_axis("reduce", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match op {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for e in 0..ext {
                        let src = &xv[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if op == Reduce::Mean {
                    let inv = 1.0 / ext as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            Reduce::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = 0;
                        let mut bv = xv[o * ext * inner + i];
                        for e in 1..ext {
                            let v = xv[(o * ext + e) * inner + i];
                            if v > bv {
                                bv = v;
                                best = e;
                            }
                        }
                        out[o * inner + i] = bv;
                        argmax[o * inner + i] = best;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        self.push("reduce", Tensor::from_parts(out_shape, out), Op::Reduce { x, axis, op, argmax }, rg)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduce::Sum, axis)
    }
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduce::Mean, axis)
    }
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduce::Max, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    // ----- normalisers -----------------------------------------------------

    /// Numerically stable softmax along `axis` (max-subtracted). The
    /// normaliser is summed in ascending order, so permuting a line
    /// permutes its output exactly.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        self.check_finite_input("softmax", x)?;
        let shape = self.shape(x).to_vec();
        let mut scratch = Vec::new();
        let out = along_axis(self.value(x).data(), &shape, axis, |line, out| {
            let m = line.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (o, &v) in out.iter_mut().zip(line) {
                *o = (v - m).exp();
            }
            scratch.clear();
            scratch.extend_from_slice(out);
            let s = sorted_sum(&mut scratch);
            out.iter_mut().for_each(|o| *o /= s);
        });
        let rg = self.rg(x);
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        self.check_finite_input("log_softmax", x)?;
        let shape = self.shape(x).to_vec();
        let out = along_axis(self.value(x).data(), &shape, axis, |line, out| {
            let lse = logsumexp(line);
            for (o, &v) in out.iter_mut().zip(line) {
                *o = v - lse;
            }
        });
        let rg = self.rg(x);
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax { x, axis }, rg)
    }

    /// `log Σ exp(x)` along `axis`, which is reduced away.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", x, axis)?;
        self.check_finite_input("logsumexp", x)?;
        let shape = self.shape(x).to_vec();
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut line = vec![0.0; ext];
        for o in 0..outer {
            for i in 0..inner {
                for (e, l) in line.iter_mut().enumerate() {
                    *l = xv[(o * ext + e) * inner + i];
                }
                out[o * inner + i] = logsumexp(&line);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        self.push("logsumexp", Tensor::from_parts(out_shape, out), Op::LogSumExp { x, axis }, rg)
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        let xv = self.value(x).data();
        let rows = xv.len() / width;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let line = &xv[r * width..(r + 1) * width];
            let mean = line.iter().sum::<f64>() / width as f64;
            let var = line.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(line) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(x);
        self.push("layer_norm", Tensor::from_parts(shape, out), Op::LayerNorm { x, inv_std }, rg)
    }

    /// Capsule squashing over the last axis: `s · ‖s‖ / (1 + ‖s‖²)`, which is
    /// `(‖s‖² / (1 + ‖s‖²)) · s / ‖s‖` with the zero vector mapped to zero.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("squash", "rank-0 input"))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(width).zip(out.chunks_mut(width)) {
            let factor = squash_factor(norm(src));
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * factor;
            }
        }
        let rg = self.rg(x);
        self.push("squash", Tensor::from_parts(shape, out), Op::Squash(x), rg)
    }

    // ----- indexing --------------------------------------------------------

    /// Rows of a `[V, d]` table: output `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be rank 2, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty id list"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("id {bad} out of range for table of {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push_unchecked(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// `out[r] = x[r, idx[r]]` for `x: [R, C]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::shape("pick", format!("need [{}, C], got {shape:?}", idx.len())));
        }
        let c = shape[1];
        if let Some(bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Data(format!("class {bad} out of range for {c} classes")));
        }
        let xv = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &i)| xv[r * c + i]).collect();
        let rg = self.rg(x);
        Ok(self.push_unchecked(Tensor::from_parts(vec![idx.len()], out), Op::Pick { x, idx: idx.to_vec() }, rg))
    }

    fn check_finite_input(&self, op: &'static str, x: Var) -> Result<()> {
        if !self.value(x).all_finite() {
            return Err(Error::numeric(op, "non-finite input"));
        }
        Ok(())
    }

    // ----- backward --------------------------------------------------------

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    /// Afterwards [`grad`](Self::grad) returns leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape; record a new tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, f) => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, xv.len());
                for k in 0..xv.len() {
                    gx[k] += g[k] * unary_derivative(*f, xv[k], y[k]);
                }
            }
            Op::Binary(a, b, op) => self.backprop_binary(*a, *b, *op, &node.value, g, grads),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plan = MatmulPlan::new(sa, sb).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = acc(grads, *a, av.len());
                    plan.for_each(|o, ia, ib| {
                        gemm_nt(&g[o * m * n..], &bv[ib * k * n..], &mut ga[ia * m * k..(ia + 1) * m * k], m, n, k);
                    });
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, bv.len());
                    plan.for_each(|o, ia, ib| {
                        gemm_tn(&av[ia * m * k..], &g[o * m * n..], &mut gb[ib * k * n..(ib + 1) * k * n], k, m, n);
                    });
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let gx = acc(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Permute(x, perm) => {
                if !self.rg(*x) {
                    return;
                }
                let shape = self.shape(*x);
                let in_st = strides(shape);
                let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
                let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
                let zeros = vec![0; perm.len()];
                let gx = acc(grads, *x, g.len());
                for_each_broadcast(&out_shape, &st, &zeros, |o, ix, _| gx[ix] += g[o]);
            }
            Op::Narrow { x, axis, start } => {
                if !self.rg(*x) {
                    return;
                }
                let shape = self.shape(*x);
                let (outer, ext, inner) = split_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                let gx = acc(grads, *x, outer * ext * inner);
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    for (d, s) in gx[base..base + len * inner].iter_mut().zip(&g[o * len * inner..]) {
                        *d += s;
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = self.shape(x)[*axis];
                    if self.rg(x) {
                        let gx = acc(grads, x, outer * ext * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            for (d, s) in gx[o * ext * inner..(o + 1) * ext * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Reduce { x, axis, op, argmax } => {
                if !self.rg(*x) {
                    return;
                }
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let gx = acc(grads, *x, outer * ext * inner);
                match op {
                    Reduce::Sum | Reduce::Mean => {
                        let s = if *op == Reduce::Mean { 1.0 / ext as f64 } else { 1.0 };
                        for o in 0..outer {
                            for e in 0..ext {
                                let dst = &mut gx[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                                for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *d += gv * s;
                                }
                            }
                        }
                    }
                    Reduce::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let e = argmax[o * inner + i];
                                gx[(o * ext + e) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if !self.rg(*x) {
                    return;
                }
                let shape = node.value.shape();
                let gx_local = along_axis2(y, g, shape, *axis, |yl, gl, out| {
                    let dot: f64 = yl.iter().zip(gl).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yl).zip(gl) {
                        *o = yv * (gv - dot);
                    }
                });
                add_into(acc(grads, *x, y.len()), &gx_local);
            }
            Op::LogSoftmax { x, axis } => {
                if !self.rg(*x) {
                    return;
                }
                let shape = node.value.shape();
                let gx_local = along_axis2(y, g, shape, *axis, |yl, gl, out| {
                    let gs: f64 = gl.iter().sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yl).zip(gl) {
                        *o = gv - yv.exp() * gs;
                    }
                });
                add_into(acc(grads, *x, y.len()), &gx_local);
            }
            Op::LogSumExp { x, axis } => {
                if !self.rg(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let gx = acc(grads, *x, xv.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = y[o * inner + i];
                        let gv = g[o * inner + i];
                        for e in 0..ext {
                            let k = (o * ext + e) * inner + i;
                            gx[k] += gv * (xv[k] - lse).exp();
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if !self.rg(*x) {
                    return;
                }
                let width = *node.value.shape().last().unwrap();
                let gx = acc(grads, *x, y.len());
                for (r, &is) in inv_std.iter().enumerate() {
                    let yl = &y[r * width..(r + 1) * width];
                    let gl = &g[r * width..(r + 1) * width];
                    let gm = gl.iter().sum::<f64>() / width as f64;
                    let gym = gl.iter().zip(yl).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for k in 0..width {
                        gx[r * width + k] += is * (gl[k] - gm - yl[k] * gym);
                    }
                }
            }
            Op::Squash(x) => {
                if !self.rg(*x) {
                    return;
                }
                let width = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, xv.len());
                for r in 0..xv.len() / width {
                    let s = &xv[r * width..(r + 1) * width];
                    let gl = &g[r * width..(r + 1) * width];
                    let n = norm(s);
                    let phi = squash_factor(n);
                    // d(phi)/dn / n, finite for n > 0; the term vanishes at n = 0
                    let coef = if n > 0.0 {
                        let n2 = n * n;
                        (1.0 - n2) / (n * (1.0 + n2) * (1.0 + n2))
                    } else {
                        0.0
                    };
                    let gs: f64 = gl.iter().zip(s).map(|(a, b)| a * b).sum();
                    for k in 0..width {
                        gx[r * width + k] += gl[k] * phi + coef * gs * s[k];
                    }
                }
            }
            Op::Gather { table, ids } => {
                if !self.rg(*table) {
                    return;
                }
                let d = self.shape(*table)[1];
                let n = self.value(*table).numel();
                let gt = acc(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *dst += src;
                    }
                }
            }
            Op::Pick { x, idx } => {
                if !self.rg(*x) {
                    return;
                }
                let c = self.shape(*x)[1];
                let gx = acc(grads, *x, idx.len() * c);
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * c + i] += g[r];
                }
            }
        }
    }

    fn backprop_binary(&self, a: Var, b: Var, op: Binary, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out_shape = out.shape();
        let same = sa == sb;
        // local partials evaluated at each output position
        let mut da = if self.rg(a) { Some(vec![0.0; g.len()]) } else { None };
        let mut db = if self.rg(b) { Some(vec![0.0; g.len()]) } else { None };
        let mut body = |o: usize, ia: usize, ib: usize| {
            let (x, y, gv) = (av[ia], bv[ib], g[o]);
            let (pa, pb) = match op {
                Binary::Add => (gv, gv),
                Binary::Sub => (gv, -gv),
                Binary::Mul => (gv * y, gv * x),
                Binary::Div => (gv / y, -gv * x / (y * y)),
            };
            if let Some(d) = da.as_mut() {
                d[o] = pa;
            }
            if let Some(d) = db.as_mut() {
                d[o] = pb;
            }
        };
        if same {
            for o in 0..g.len() {
                body(o, o, o);
            }
        } else {
            let st_a = broadcast_strides(sa, out_shape);
            let st_b = broadcast_strides(sb, out_shape);
            for_each_broadcast(out_shape, &st_a, &st_b, body);
        }
        if let Some(d) = da {
            let r = reduce_to_shape(&d, out_shape, sa);
            add_into(acc(grads, a, r.len()), &r);
        }
        if let Some(d) = db {
            let r = reduce_to_shape(&d, out_shape, sb);
            add_into(acc(grads, b, r.len()), &r);
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn binary_name(op: Binary) -> &'static str {
    match op {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

fn apply_binary(op: Binary, x: f64, y: f64) -> f64 {
    match op {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn apply_unary(f: Unary, v: f64) -> f64 {
    match f {
        Unary::Tanh => v.tanh(),
        Unary::Logistic => sigmoid(v),
        Unary::Relu => v.max(0.0),
        Unary::Exp => v.exp(),
        Unary::Log => v.ln(),
        Unary::Square => v * v,
        Unary::Sqrt => v.sqrt(),
        Unary::Neg => -v,
        Unary::Scale(c) => c * v,
        Unary::AddScalar(c) => v + c,
        Unary::LogSigmoid => log_sigmoid(v),
        Unary::ClampMin(c) => v.max(c),
    }
}

fn unary_derivative(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Tanh => 1.0 - y * y,
        Unary::Logistic => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::LogSigmoid => sigmoid(-x),
        Unary::ClampMin(c) => {
            if x > c {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖s‖ / (1 + ‖s‖²)`; multiplying `s` by this squashes it.
pub(crate) fn squash_factor(n: f64) -> f64 {
    n / (1.0 + n * n)
}

/// Sum in ascending order; the result depends only on the multiset of
/// values.
fn sorted_sum(xs: &mut [f64]) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    xs.iter().sum()
}

pub(crate) fn logsumexp(line: &[f64]) -> f64 {
    let m = line.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + line.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Applies `f(line, out)` to every 1-D line along `axis`.
fn along_axis(x: &[f64], shape: &[usize], axis: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    if inner == 1 {
        for (src, dst) in x.chunks(ext).zip(out.chunks_mut(ext)) {
            f(src, dst);
        }
        return out;
    }
    let mut line = vec![0.0; ext];
    let mut res = vec![0.0; ext];
    for o in 0..outer {
        for i in 0..inner {
            for e in 0..ext {
                line[e] = x[(o * ext + e) * inner + i];
            }
            f(&line, &mut res);
            for e in 0..ext {
                out[(o * ext + e) * inner + i] = res[e];
            }
        }
    }
    out
}

/// Two-input variant of [`along_axis`].
fn along_axis2(
    x: &[f64],
    y: &[f64],
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(&[f64], &[f64], &mut [f64]),
) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    if inner == 1 {
        for ((a, b), dst) in x.chunks(ext).zip(y.chunks(ext)).zip(out.chunks_mut(ext)) {
            f(a, b, dst);
        }
        return out;
    }
    let (mut la, mut lb, mut res) = (vec![0.0; ext], vec![0.0; ext], vec![0.0; ext]);
    for o in 0..outer {
        for i in 0..inner {
            for e in 0..ext {
                la[e] = x[(o * ext + e) * inner + i];
                lb[e] = y[(o * ext + e) * inner + i];
            }
            f(&la, &lb, &mut res);
            for e in 0..ext {
                out[(o * ext + e) * inner + i] = res[e];
            }
        }
    }
    out
}

/// Batch bookkeeping for `matmul`, shared by forward and backward.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    st_a: Vec<usize>,
    st_b: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands must be rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {sa:?} · {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb)
            .ok_or_else(|| Error::shape("matmul", format!("batch axes do not broadcast: {sa:?} · {sb:?}")))?;
        let st_a = broadcast_strides(ba, &batch);
        let st_b = broadcast_strides(bb, &batch);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Ok(MatmulPlan { m, k, n, batch, st_a, st_b, out_shape })
    }

    /// Yields `(out_matrix, a_matrix, b_matrix)` indices.
    fn for_each(&self, f: impl FnMut(usize, usize, usize)) {
        for_each_broadcast(&self.batch, &self.st_a, &self.st_b, f);
    }
}

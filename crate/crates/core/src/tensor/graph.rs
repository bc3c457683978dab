use std::collections::BTreeMap;

use super::ops::{self, AxisMap};
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    MulConst { x: Var, factor: Vec<T> },
    AddConst(Var),
    ScaleRows { x: Var, s: Var },
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Resize { x: Var, maps: (AxisMap, AxisMap) },
    AvgPool { x: Var, kernel: [usize; 3], stride: [usize; 3] },
    Permute { x: Var, index: Vec<usize> },
    Mean(Vec<Var>),
    Sum(Var),
    PickNeg { x: Var, picks: Vec<usize>, scale: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient tape for one forward/backward pass.
///
/// Every operation appends a node holding its output value; [`Graph::backward`]
/// walks the nodes in reverse and applies each operation's adjoint. Nodes that
/// do not depend on a parameter are skipped during backward.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    track: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track: true,
        }
    }

    /// A graph that records values only; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.track && parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a named parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .param(name)
            .ok_or_else(|| Error::Invariant(format!("unknown parameter {name}")))?;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad: self.track && p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn check_finite(&self, v: Var, op: &str) -> Result<Var> {
        if self.value(v).is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("{op} produced a non-finite value")))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| f(a)).collect(),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Adds `b[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        let n = bv.numel();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &c) in row.iter_mut().zip(bv.data()) {
                *o += c;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    /// Affine map over the last axis, for inputs of any rank.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let wshape = self.shape(w).to_vec();
        if wshape.len() != 2 || *shape.last().unwrap() != wshape[0] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: shape,
                rhs: wshape,
            });
        }
        let rows = self.value(x).rows();
        let x2 = if shape.len() == 2 { x } else { self.reshape(x, &[rows, wshape[0]])? };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = wshape[1];
            self.reshape(y, &out_shape)
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.map(x, |v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(&mut self, x: Var, factor: &Tensor<T>) -> Result<Var> {
        if factor.shape() != self.shape(x) {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: factor.shape().to_vec(),
            });
        }
        let out = zip_with(self.value(x), factor, |a, b| a * b);
        Ok(self.push(
            out,
            Op::MulConst {
                x,
                factor: factor.data().to_vec(),
            },
            &[x],
        ))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::Dimension {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let out = zip_with(self.value(x), c, |a, b| a + b);
        Ok(self.push(out, Op::AddConst(x), &[x]))
    }

    /// Multiplies row `i` of `x[m, n]` by `s[i]` (`s` has `m` elements).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != xv.rows() {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: xv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (row, &g) in out.data_mut().chunks_mut(n).zip(sv.data()) {
            for v in row {
                *v *= g;
            }
        }
        Ok(self.push(out, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x));
        let v = self.push(out, Op::Softmax(x), &[x]);
        self.check_finite(v, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::log_softmax_rows(self.value(x));
        let v = self.push(out, Op::LogSoftmax(x), &[x]);
        self.check_finite(v, "log_softmax_rows")
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (mean, rstd) = ops::row_stats(xv.data(), n);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[r]) * rstd[r] * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks 2-D blocks with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self
            .value(*parts.first().ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?)
            .cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || len == 0 || start + len > v.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of {:?}",
                start + len,
                v.shape()
            )));
        }
        let n = v.cols();
        let data: Vec<T> = v
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![v.rows(), len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || len == 0 || start + len > v.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of {:?}",
                start + len,
                v.shape()
            )));
        }
        let n = v.cols();
        let out = Tensor::new(vec![len, n], v.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Row gather from a `[rows, n]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!("gather table must be 2-D, got {:?}", t.shape())));
        }
        let (rows, n) = (t.shape()[0], t.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Lookup { id, rows });
            }
            data.extend_from_slice(&t.data()[id * n..(id + 1) * n]);
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn resize_spatial(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let maps = ops::resize_maps(self.shape(x), target)?;
        let out = ops::resize_spatial(self.value(x), target)?;
        Ok(self.push(out, Op::Resize { x, maps }, &[x]))
    }

    pub fn avg_pool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let out = ops::avg_pool3d(self.value(x), kernel, stride)?;
        Ok(self.push(out, Op::AvgPool { x, kernel, stride }, &[x]))
    }

    /// 2x2 spatial patch merge: `[t, h, w, c] -> [t, h/2, w/2, 4c]`.
    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let (shape, index) = ops::space_to_depth_index(self.shape(x))?;
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Permute { x, index }, &[x]))
    }

    /// Elementwise mean of same-shape tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("mean of nothing".into()))?;
        for &p in parts {
            self.same_shape("mean", first, p)?;
        }
        if parts.len() == 1 {
            // mean of one is the tensor itself; keep a node so callers get a fresh Var
            let out = self.value(first).clone();
            return Ok(self.push(out, Op::Mean(parts.to_vec()), parts));
        }
        let inv = T::of(1.0 / parts.len() as f64);
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            for (a, &v) in acc.data_mut().iter_mut().zip(self.value(p).data()) {
                *a += v;
            }
        }
        for a in acc.data_mut() {
            *a *= inv;
        }
        Ok(self.push(acc, Op::Mean(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `-scale * sum(x[row, col])` over the given picks of a 2-D tensor;
    /// with `x` log-probabilities this is a scaled negative log-likelihood.
    pub fn nll(&mut self, x: Var, picks: &[(usize, usize)], scale: T) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::Shape(format!("nll expects 2-D input, got {:?}", v.shape())));
        }
        let (rows, n) = (v.rows(), v.cols());
        let mut flat = Vec::with_capacity(picks.len());
        for &(r, c) in picks {
            if r >= rows || c >= n {
                return Err(Error::Lookup { id: c, rows: n });
            }
            flat.push(r * n + c);
        }
        let s: T = flat.iter().map(|&i| v.data()[i]).sum();
        let out = Tensor::scalar(-scale * s);
        Ok(self.push(
            out,
            Op::PickNeg {
                x,
                picks: flat,
                scale,
            },
            &[x],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.needs(root) {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_adjoint(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn apply_adjoint(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if self.nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |da| T::gemm(false, true, m, n, k, T::one(), g, val(*b), T::one(), da));
                acc(*b, &mut |db| T::gemm(true, false, k, m, n, T::one(), val(*a), g, T::one(), db));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(*a, &mut |da| T::gemm(false, false, m, n, k, T::one(), g, val(*b), T::one(), da));
                acc(*b, &mut |db| T::gemm(true, false, n, m, k, T::one(), g, val(*a), T::one(), db));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let n = out.cols();
                acc(*b, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += *scale * g));
            }
            Op::MulConst { x, factor } => {
                acc(*x, &mut |d| {
                    for ((d, &g), &f) in d.iter_mut().zip(g).zip(factor) {
                        *d += g * f;
                    }
                });
            }
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::ScaleRows { x, s } => {
                let n = out.cols();
                let (xv, sv) = (val(*x), val(*s));
                acc(*x, &mut |dx| {
                    for ((drow, grow), &sc) in dx.chunks_mut(n).zip(g.chunks(n)).zip(sv) {
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += gv * sc;
                        }
                    }
                });
                acc(*s, &mut |ds| {
                    for ((d, grow), xrow) in ds.iter_mut().zip(g.chunks(n)).zip(xv.chunks(n)) {
                        *d += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (T::one() - y);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * ops::gelu_grad(x);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                let y = out.data();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: T = grow.iter().copied().sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gv - yv.exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = out.cols();
                let xv = val(*x);
                let gv = val(*gain);
                let inv_n = T::of(1.0 / n as f64);
                acc(*gain, &mut |dg| {
                    for (r, (grow, xrow)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                        for ((d, &gy), &xi) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gy * (xi - mean[r]) * rstd[r];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    for (r, ((drow, grow), xrow)) in
                        dx.chunks_mut(n).zip(g.chunks(n)).zip(xv.chunks(n)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dxhat = grow[j] * gv[j];
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for j in 0..n {
                            let dxhat = grow[j] * gv[j];
                            let xhat = (xrow[j] - mean[r]) * rstd[r];
                            drow[j] += rstd[r] * (dxhat - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    acc(p, &mut |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let n = self.nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                acc(*x, &mut |d| add_into(&mut d[start * n..start * n + g.len()], g));
            }
            Op::Gather { table, ids } => {
                let n = out.cols();
                acc(*table, &mut |d| {
                    for (&id, grow) in ids.iter().zip(g.chunks(n)) {
                        add_into(&mut d[id * n..(id + 1) * n], grow);
                    }
                });
            }
            Op::Resize { x, maps } => {
                let &[t, h, w, c] = self.shape(*x) else { unreachable!() };
                let &[_, th, tw, _] = out.shape() else { unreachable!() };
                acc(*x, &mut |d| {
                    for ti in 0..t {
                        for oi in 0..th {
                            let (ri, wi) = maps.0.sources(oi);
                            for oj in 0..tw {
                                let (rj, wj) = maps.1.sources(oj);
                                let weight = T::of(wi * wj);
                                let grow = &g[((ti * th + oi) * tw + oj) * c..][..c];
                                for si in ri.clone() {
                                    for sj in rj.clone() {
                                        let drow = &mut d[((ti * h + si) * w + sj) * c..][..c];
                                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                                            *dv += weight * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, kernel, stride } => {
                let &[_, h, w, c] = self.shape(*x) else { unreachable!() };
                let &[ot, oh, ow, _] = out.shape() else { unreachable!() };
                let inv = T::of(1.0 / (kernel[0] * kernel[1] * kernel[2]) as f64);
                acc(*x, &mut |d| {
                    for a in 0..ot {
                        for b in 0..oh {
                            for e in 0..ow {
                                let grow = &g[((a * oh + b) * ow + e) * c..][..c];
                                for kt in 0..kernel[0] {
                                    for kh in 0..kernel[1] {
                                        for kw in 0..kernel[2] {
                                            let (ti, hi, wi) =
                                                (a * stride[0] + kt, b * stride[1] + kh, e * stride[2] + kw);
                                            let drow = &mut d[((ti * h + hi) * w + wi) * c..][..c];
                                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                                *dv += inv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Permute { x, index } => {
                acc(*x, &mut |d| {
                    for (&i, &gv) in index.iter().zip(g) {
                        d[i] += gv;
                    }
                });
            }
            Op::Mean(parts) => {
                let inv = T::of(1.0 / parts.len() as f64);
                for &p in parts {
                    acc(p, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += inv * g));
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::PickNeg { x, picks, scale } => {
                let step = -*scale * g[0];
                acc(*x, &mut |d| {
                    for &i in picks {
                        d[i] += step;
                    }
                });
            }
        }
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, zero if it never received one.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient matches its node"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients of every parameter that entered the graph.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }
}

//! Reverse-mode autodiff over a flat, append-only tape.
//!
//! Every op appends a node holding its forward value and the parent handles it
//! needs for the vector-Jacobian product. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use super::conv::{self, ConvSpec, PoolSpec};
use super::norm::{self, BnRunning};
use super::{s, Scalar, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// (outer, axis extent, inner) decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    n: usize,
    inner: usize,
}

fn split_axis(shape: &[usize], axis: usize) -> AxisSplit {
    AxisSplit {
        outer: shape[..axis].iter().product(),
        n: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddAxis(Var, Var, AxisSplit),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis(Var, AxisSplit),
    Softmax(Var, AxisSplit),
    LogSoftmax(Var, AxisSplit, Option<Vec<bool>>),
    Diag(Var),
    GatherRows(Var, Vec<usize>),
    Conv(Var, Var, conv::ConvGeom),
    MaxPool(Var, Vec<usize>),
    BatchNorm(Var, Var, Var, norm::BnSaved<T>),
    NormalizeRows(Var, Vec<T>, Vec<bool>),
    PairwiseSqDist(Var, Var),
    GradReverse(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not require grad
    /// or does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::wrt`] but returns zeros when no gradient reached `v`.
    pub fn wrt_or_zeros(&self, v: Var) -> Tensor<T> {
        self.wrt(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// Single-threaded record of executed ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
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

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bt {
            gemm_nn(&da[i * m * k..(i + 1) * m * k], &db[i * k * n..(i + 1) * k * n], &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        self.push("bmm", Tensor::new([bt, m, n], out)?, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Reorders axes; `axes[i]` is the input axis that becomes output axis `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(dim_err("permute", format!("axes {axes:?} for shape {sa:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let out = permute_data(self.data(a), &sa, axes);
        self.push("permute", Tensor::new(out_shape, out)?, Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check_same(name, a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(name, t, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(name, t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a vector along `axis`, broadcasting over every other axis
    /// (bias for linear layers with `axis = last`, for convolutions with `axis = 1`).
    pub fn add_along(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || self.value(b).len() != sx[axis] {
            return Err(dim_err("add_along", format!("bias {:?} on axis {axis} of {sx:?}", self.shape(b))));
        }
        let sp = split_axis(&sx, axis);
        let mut out = self.data(x).to_vec();
        let bd = self.data(b);
        for o in 0..sp.outer {
            for j in 0..sp.n {
                let base = (o * sp.n + j) * sp.inner;
                for v in &mut out[base..base + sp.inner] {
                    *v += bd[j];
                }
            }
        }
        self.push("add_along", Tensor::new(sx, out)?, Op::AddAxis(x, b, sp), &[x, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = s::<T>(c);
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = s::<T>(c);
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| x <= T::zero()) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {}", bad.as_f64()) });
        }
        self.unary("log", a, Op::Log(a), |x| x.ln())
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let total = self.sum(a)?;
        self.scale(total, 1.0 / n)
    }

    /// Sums out `axis`; the result drops that axis (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(dim_err("sum_axis", format!("axis {axis} for {sa:?}")));
        }
        let sp = split_axis(&sa, axis);
        let d = self.data(a);
        let mut out = vec![T::zero(); sp.outer * sp.inner];
        for o in 0..sp.outer {
            for j in 0..sp.n {
                let src = &d[(o * sp.n + j) * sp.inner..][..sp.inner];
                for (acc, &v) in out[o * sp.inner..][..sp.inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape: Vec<usize> = sa.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis(a, sp), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(dim_err("softmax", format!("axis {axis} for {sa:?}")));
        }
        let sp = split_axis(&sa, axis);
        let mut out = self.data(a).to_vec();
        for_each_lane(sp, |idx| {
            let mx = idx.clone().map(|i| out[i]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for i in idx.clone() {
                out[i] = (out[i] - mx).exp();
                z += out[i];
            }
            for i in idx {
                out[i] = out[i] / z;
            }
        });
        self.push("softmax", Tensor::new(sa, out)?, Op::Softmax(a, sp), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.log_softmax_masked(a, axis, None)
    }

    /// Log-softmax along `axis`, normalizing only over entries where `mask` is true.
    /// Masked-out entries produce 0 and receive no gradient. Every lane must keep at
    /// least one unmasked entry.
    pub fn log_softmax_masked(&mut self, a: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(dim_err("log_softmax", format!("axis {axis} for {sa:?}")));
        }
        if let Some(m) = &mask {
            if m.len() != self.value(a).len() {
                return Err(dim_err("log_softmax", "mask length does not match input"));
            }
        }
        let sp = split_axis(&sa, axis);
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let mut empty_lane = false;
        for_each_lane(sp, |idx| {
            let mx = idx.clone().filter(|&i| keep(i)).map(|i| x[i]).fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                empty_lane = true;
                return;
            }
            let z: T = idx.clone().filter(|&i| keep(i)).map(|i| (x[i] - mx).exp()).sum();
            let lz = mx + z.ln();
            for i in idx.filter(|&i| keep(i)) {
                out[i] = x[i] - lz;
            }
        });
        if empty_lane {
            return Err(contract_err("log_softmax lane with every entry masked"));
        }
        self.push("log_softmax", Tensor::new(sa, out)?, Op::LogSoftmax(a, sp, mask), &[a])
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(dim_err("diag", format!("{sa:?} is not square")));
        }
        let n = sa[0];
        let d = self.data(a);
        let out: Vec<T> = (0..n).map(|i| d[i * n + i]).collect();
        self.push("diag", Tensor::new([n], out)?, Op::Diag(a), &[a])
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= sa[0]) {
            return Err(dim_err("gather_rows", format!("rows {rows:?} of {sa:?}")));
        }
        let w = sa[1];
        let d = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&d[r * w..(r + 1) * w]);
        }
        self.push("gather_rows", Tensor::new([rows.len(), w], out)?, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    // ── network layers ──────────────────────────────────────────────────

    /// Cross-correlation. `x` is `[N,C,L]` (1D) or `[N,C,H,W]` (2D); `w` is
    /// `[O,C,k]` or `[O,C,kh,kw]`.
    pub fn conv(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let geom = conv::ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        let out = conv::conv_forward(self.data(x), self.data(w), &geom);
        self.push("conv", Tensor::new(geom.out_shape(), out)?, Op::Conv(x, w, geom), &[x, w])
    }

    /// Max pooling over the trailing one or two axes of `[N,C,L]` / `[N,C,H,W]`.
    /// Ties route the gradient to the first maximal element in scan order.
    pub fn max_pool(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (out_shape, out, argmax) = conv::max_pool_forward(self.value(x), spec)?;
        self.push("max_pool", Tensor::new(out_shape, out)?, Op::MaxPool(x, argmax), &[x])
    }

    /// Batch normalization over axis 1 of `[N,C,...]`. In train mode batch statistics
    /// are used and `running` is updated; in eval mode `running` is read only.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: &mut BnRunning<T>, train: bool) -> Result<Var> {
        let (out, saved) = norm::bn_forward(self.value(x), self.data(gamma), self.data(beta), running, train)?;
        let shape = self.shape(x).to_vec();
        self.push("batch_norm", Tensor::new(shape, out)?, Op::BatchNorm(x, gamma, beta, saved), &[x, gamma, beta])
    }

    /// Divides each row of `[N,d]` by its L2 norm, floored at `floor`.
    pub fn normalize_rows(&mut self, a: Var, floor: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(dim_err("normalize_rows", format!("{sa:?} is not a matrix")));
        }
        let (n, d) = (sa[0], sa[1]);
        let x = self.data(a);
        let mut out = vec![T::zero(); n * d];
        let mut norms = Vec::with_capacity(n);
        let mut floored = Vec::with_capacity(n);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let raw = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nr = raw.max(s(floor));
            floored.push(raw < s(floor));
            norms.push(nr);
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = v / nr;
            }
        }
        self.push("normalize_rows", Tensor::new(sa, out)?, Op::NormalizeRows(a, norms, floored), &[a])
    }

    /// Matrix of squared Euclidean distances `D[i,j] = |a_i - b_j|^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(dim_err("pairwise_sq_dist", format!("{sa:?} vs {sb:?}")));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ra = &xa[i * d..(i + 1) * d];
            for j in 0..n {
                let rb = &xb[j * d..(j + 1) * d];
                out[i * n + j] = ra.iter().zip(rb).map(|(&p, &q)| (p - q) * (p - q)).sum();
            }
        }
        self.push("pairwise_sq_dist", Tensor::new([m, n], out)?, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        let t = self.value(a).clone();
        self.push("grad_reverse", t, Op::GradReverse(a, s(lambda)), &[a])
    }

    // ── composites ──────────────────────────────────────────────────────

    /// `x·w + b` with `x: [N,in]`, `w: [in,out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_along(y, b, 1)
    }

    /// Cosine similarity matrix `M[i,k] = <A_i,B_k> / (|A_i| |B_k|)`, norms floored at 1e-8.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(dim_err("cosine_similarity_matrix", format!("{sa:?} vs {sb:?}")));
        }
        let an = self.normalize_rows(a, 1e-8)?;
        let bn = self.normalize_rows(b, 1e-8)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`. A tape can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(contract_err("backward already called on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract_err(format!("backward root must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| gemm_nt(g, db, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn(da, g, gb, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..bt {
                        gemm_nt(&g[i * m * n..][..m * n], &db[i * k * n..][..k * n], &mut ga[i * m * k..][..m * k], m, n, k);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..bt {
                        gemm_tn(&da[i * m * k..][..m * k], &g[i * m * n..][..m * n], &mut gb[i * k * n..][..k * n], m, k, n);
                    }
                });
            }
            Op::Permute(a, axes) => {
                let out_shape = node.value.shape();
                let mut inv = vec![0; axes.len()];
                for (i, &x) in axes.iter().enumerate() {
                    inv[x] = i;
                }
                let back = permute_data(g, out_shape, &inv);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Reshape(a) | Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(g.iter().zip(db)).for_each(|(x, (&gy, &bv))| *x += gy * bv));
                acc(*b, &mut |gb| gb.iter_mut().zip(g.iter().zip(da)).for_each(|(x, (&gy, &av))| *x += gy * av));
            }
            Op::AddAxis(x, b, sp) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for o in 0..sp.outer {
                        for (j, slot) in gb.iter_mut().enumerate() {
                            let base = (o * sp.n + j) * sp.inner;
                            *slot += g[base..base + sp.inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c)),
            Op::Relu(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(da) {
                        if v > T::zero() {
                            *x += y;
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g.iter().zip(out)).for_each(|(x, (&y, &t))| *x += y * (T::one() - t * t))
            }),
            Op::Exp(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g.iter().zip(out)).for_each(|(x, (&y, &e))| *x += y * e)),
            Op::Log(a) => {
                let da = self.data(*a);
                acc(*a, &mut |ga| ga.iter_mut().zip(g.iter().zip(da)).for_each(|(x, (&y, &v))| *x += y / v));
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumAxis(a, sp) => acc(*a, &mut |ga| {
                for o in 0..sp.outer {
                    let src = &g[o * sp.inner..][..sp.inner];
                    for j in 0..sp.n {
                        add_into(&mut ga[(o * sp.n + j) * sp.inner..][..sp.inner], src);
                    }
                }
            }),
            Op::Softmax(a, sp) => acc(*a, &mut |ga| {
                for_each_lane(*sp, |idx| {
                    let dot: T = idx.clone().map(|i| g[i] * out[i]).sum();
                    for i in idx {
                        ga[i] += out[i] * (g[i] - dot);
                    }
                });
            }),
            Op::LogSoftmax(a, sp, mask) => acc(*a, &mut |ga| {
                let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                for_each_lane(*sp, |idx| {
                    let gs: T = idx.clone().filter(|&i| keep(i)).map(|i| g[i]).sum();
                    for i in idx.filter(|&i| keep(i)) {
                        ga[i] += g[i] - out[i].exp() * gs;
                    }
                });
            }),
            Op::Diag(a) => {
                let n = g.len();
                acc(*a, &mut |ga| (0..n).for_each(|i| ga[i * n + i] += g[i]));
            }
            Op::GatherRows(a, rows) => {
                let w = self.shape(*a)[1];
                acc(*a, &mut |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                    }
                });
            }
            Op::Conv(x, w, geom) => {
                let (dx, dw) = (self.data(*x), self.data(*w));
                acc(*x, &mut |gx| conv::conv_backward_input(g, dw, gx, geom));
                acc(*w, &mut |gw| conv::conv_backward_weight(g, dx, gw, geom));
            }
            Op::MaxPool(x, argmax) => acc(*x, &mut |gx| {
                for (&src, &gy) in argmax.iter().zip(g) {
                    gx[src] += gy;
                }
            }),
            Op::BatchNorm(x, gamma, beta, saved) => {
                let gd = self.data(*gamma);
                let (gx, gg, gb) = norm::bn_backward(g, gd, saved);
                acc(*x, &mut |slot| add_into(slot, &gx));
                acc(*gamma, &mut |slot| add_into(slot, &gg));
                acc(*beta, &mut |slot| add_into(slot, &gb));
            }
            Op::NormalizeRows(a, norms, floored) => {
                let d = node.value.shape()[1];
                acc(*a, &mut |ga| {
                    for (i, (&nr, &fl)) in norms.iter().zip(floored).enumerate() {
                        let y = &out[i * d..(i + 1) * d];
                        let gy = &g[i * d..(i + 1) * d];
                        let dot: T = if fl { T::zero() } else { y.iter().zip(gy).map(|(&p, &q)| p * q).sum() };
                        for k in 0..d {
                            ga[i * d + k] += (gy[k] - y[k] * dot) / nr;
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, n, d) = (sa[0], sb[0], sa[1]);
                let (xa, xb) = (self.data(*a), self.data(*b));
                let two = s::<T>(2.0);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let c = two * g[i * n + j];
                            for k in 0..d {
                                ga[i * d + k] += c * (xa[i * d + k] - xb[j * d + k]);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let c = two * g[i * n + j];
                            for k in 0..d {
                                gb[j * d + k] -= c * (xa[i * d + k] - xb[j * d + k]);
                            }
                        }
                    }
                });
            }
            Op::GradReverse(a, lambda) => {
                let f = -*lambda;
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += f * y));
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

/// Calls `f` with the flat indices of every lane along the split axis.
fn for_each_lane(sp: AxisSplit, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..sp.outer {
        for i in 0..sp.inner {
            let start = o * sp.n * sp.inner + i;
            f((start..start + sp.n * sp.inner).step_by(sp.inner));
        }
    }
}

pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(src[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// `c += a·b` with `a: [m,k]`, `b: [k,n]`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a·bᵀ` with `a: [m,k]`, `b: [n,k]`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ar.iter().zip(br).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for v in acc {
        s += v;
    }
    s
}

/// `c += aᵀ·b` with `a: [k,m]`, `b: [k,n]`, `c: [m,n]`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::{shape_err, Element, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
}

enum Op<T> {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize },
    Scale { x: usize, c: T },
    AddScalar { x: usize },
    Unary { kind: UnaryKind, x: usize },
    Matmul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, inp: usize, out: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, batch: usize, cout: usize },
    Softmax { x: usize, len: usize },
    LogSoftmax { x: usize, len: usize },
    Normalize { x: usize, group: usize, inv_std: Vec<T> },
    SumAxes { x: usize, in_dims: Vec<usize> },
    MaxAxis { x: usize, argmax: Vec<usize>, len: usize, inner: usize },
    AvgPool { x: usize, k: usize, h: usize, w: usize },
    Upsample { x: usize, h: usize, w: usize },
    Reshape { x: usize },
    Permute { x: usize, src_strides: Vec<usize> },
    Concat { xs: Vec<usize>, sizes: Vec<usize>, inner: usize },
    Narrow { x: usize, start: usize, len: usize, full: usize, inner: usize },
    TakeRows { x: usize, idx: Vec<usize>, len: usize, row: usize },
    L2Normalize { x: usize, len: usize, norms: Vec<T> },
    Bce { p: usize, targets: Vec<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive applications for one forward/backward pass.
///
/// A tape is single-threaded; build a fresh one per step and drop it after
/// [`Tape::backward`].
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v.0)
    }
}

/// Attribute value for the string-keyed [`Tape::apply`] entry point.
#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

fn same_len(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

fn broadcast_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    same_len(op, a, b)?;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn var(&self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t, op: Op::Leaf, needs_grad: requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, name: &'static str, dims: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node { value: Tensor::from_parts(dims, data), op, needs_grad });
        Ok(Var(nodes.len() - 1))
    }

    // ---- element-wise -------------------------------------------------

    fn binary(&self, name: &'static str, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let f = |x: T, y: T| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            if ta.dims() == tb.dims() {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                (ta.dims().to_vec(), data)
            } else {
                let dims = broadcast_dims(name, ta.dims(), tb.dims())?;
                let sa = kernels::broadcast_strides(ta.dims(), &dims);
                let sb = kernels::broadcast_strides(tb.dims(), &dims);
                let mut data = vec![T::zero(); dims.iter().product()];
                let (da, db) = (ta.data(), tb.data());
                kernels::visit_runs(&dims, &sa, &sb, |l, oa, ob, len, ia, ib| {
                    let out = &mut data[l..l + len];
                    match kind {
                        BinKind::Add => kernels::map_run(out, da, oa, ia, db, ob, ib, |x, y| x + y),
                        BinKind::Sub => kernels::map_run(out, da, oa, ia, db, ob, ib, |x, y| x - y),
                        BinKind::Mul => kernels::map_run(out, da, oa, ia, db, ob, ib, |x, y| x * y),
                        BinKind::Div => kernels::map_run(out, da, oa, ia, db, ob, ib, |x, y| x / y),
                    }
                });
                (dims, data)
            }
        };
        self.push(name, dims, data, Op::Binary { kind, a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Element-wise sum with size-1 broadcasting on equal-rank operands.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinKind::Div, a, b)
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (t.dims().to_vec(), t.data().iter().map(|&v| v * c).collect())
        };
        self.push("scale", dims, data, Op::Scale { x: x.0, c }, &[x.0])
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (t.dims().to_vec(), t.data().iter().map(|&v| v + c).collect())
        };
        self.push("add_scalar", dims, data, Op::AddScalar { x: x.0 }, &[x.0])
    }

    fn unary(&self, name: &'static str, kind: UnaryKind, x: Var) -> Result<Var> {
        let (dims, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let f = |v: T| match kind {
                UnaryKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
                UnaryKind::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
            };
            (t.dims().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        };
        self.push(name, dims, data, Op::Unary { kind, x: x.0 }, &[x.0])
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary("sigmoid", UnaryKind::Sigmoid, x)
    }

    /// ReLU; the backward pass uses subgradient 0 at exactly 0.
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary("relu", UnaryKind::Relu, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", UnaryKind::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", UnaryKind::Log, x)
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary("sqrt", UnaryKind::Sqrt, x)
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (dims, data, batch, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (da, db) = (ta.dims(), tb.dims());
            let (batch, m, k, k2, n) = match (da.len(), db.len()) {
                (2, 2) => (1, da[0], da[1], db[0], db[1]),
                (3, 3) if da[0] == db[0] => (da[0], da[1], da[2], db[1], db[2]),
                _ => return Err(shape_err("matmul", format!("unsupported operands {da:?} x {db:?}"))),
            };
            if k != k2 {
                return Err(shape_err("matmul", format!("inner dims differ: {da:?} x {db:?}")));
            }
            let mut out = vec![T::zero(); batch * m * n];
            for s in 0..batch {
                kernels::gemm(
                    m,
                    n,
                    k,
                    &ta.data()[s * m * k..(s + 1) * m * k],
                    false,
                    &tb.data()[s * k * n..(s + 1) * k * n],
                    false,
                    &mut out[s * m * n..(s + 1) * m * n],
                    false,
                );
            }
            let dims = if da.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
            (dims, out, batch, m, k, n)
        };
        self.push("matmul", dims, data, Op::Matmul { a: a.0, b: b.0, batch, m, k, n }, &[a.0, b.0])
    }

    /// `x·wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (dims, data, rows, inp, out) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (dx, dw) = (tx.dims(), tw.dims());
            if dw.len() != 2 || dx.is_empty() || *dx.last().unwrap() != dw[1] {
                return Err(shape_err("linear", format!("input {dx:?} incompatible with weight {dw:?}")));
            }
            let (inp, out) = (dw[1], dw[0]);
            let rows = tx.numel() / inp;
            let mut y = vec![T::zero(); rows * out];
            kernels::gemm(rows, out, inp, tx.data(), false, tw.data(), true, &mut y, false);
            if let Some(b) = b {
                let tb = &nodes[b.0].value;
                if tb.numel() != out {
                    return Err(shape_err("linear", format!("bias {:?} for {out} outputs", tb.dims())));
                }
                for row in y.chunks_exact_mut(out) {
                    for (v, &bb) in row.iter_mut().zip(tb.data()) {
                        *v += bb;
                    }
                }
            }
            let mut dims = dx.to_vec();
            *dims.last_mut().unwrap() = out;
            (dims, y, rows, inp, out)
        };
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|v| v.0));
        self.push("linear", dims, data, Op::Linear { x: x.0, w: w.0, b: b.map(|v| v.0), rows, inp, out }, &inputs)
    }

    /// 2-D cross-correlation; `x` is `[N,Ci,H,W]`, `w` is `[Co,Ci,kh,kw]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (dims, data, geom, batch, cout) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (dx, dw) = (tx.dims(), tw.dims());
            if dx.len() != 4 || dw.len() != 4 || dx[1] != dw[1] {
                return Err(shape_err("conv2d", format!("input {dx:?} incompatible with weight {dw:?}")));
            }
            let geom = ConvGeom::new(dx[1], dx[2], dx[3], dw[2], dw[3], stride, pad)
                .ok_or_else(|| shape_err("conv2d", format!("kernel {dw:?} does not fit {dx:?} (stride {stride}, pad {pad})")))?;
            let (batch, cout) = (dx[0], dw[0]);
            let (kk, hw) = (geom.col_rows(), geom.col_cols());
            let bias = match b {
                Some(b) => {
                    let tb = &nodes[b.0].value;
                    if tb.numel() != cout {
                        return Err(shape_err("conv2d", format!("bias {:?} for {cout} channels", tb.dims())));
                    }
                    Some(tb.data())
                }
                None => None,
            };
            let plane = geom.cin * geom.h * geom.w;
            let mut col = vec![T::zero(); kk * hw];
            let mut out = vec![T::zero(); batch * cout * hw];
            for s in 0..batch {
                kernels::im2col(&tx.data()[s * plane..(s + 1) * plane], &geom, &mut col);
                let y = &mut out[s * cout * hw..(s + 1) * cout * hw];
                kernels::gemm(cout, hw, kk, tw.data(), false, &col, false, y, false);
                if let Some(bias) = bias {
                    for (c, row) in y.chunks_exact_mut(hw).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            }
            (vec![batch, cout, geom.ho, geom.wo], out, geom, batch, cout)
        };
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|v| v.0));
        self.push("conv2d", dims, data, Op::Conv2d { x: x.0, w: w.0, b: b.map(|v| v.0), geom, batch, cout }, &inputs)
    }

    // ---- normalisation and softmax ------------------------------------

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (dims, data, len) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let len = *t.dims().last().unwrap();
            let mut out = t.data().to_vec();
            for row in out.chunks_exact_mut(len) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v = *v / s);
            }
            (t.dims().to_vec(), out, len)
        };
        self.push("softmax", dims, data, Op::Softmax { x: x.0, len }, &[x.0])
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let (dims, data, len) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let len = *t.dims().last().unwrap();
            let mut out = t.data().to_vec();
            for row in out.chunks_exact_mut(len) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
                let lse = mx + s.ln();
                row.iter_mut().for_each(|v| *v = *v - lse);
            }
            (t.dims().to_vec(), out, len)
        };
        self.push("log_softmax", dims, data, Op::LogSoftmax { x: x.0, len }, &[x.0])
    }

    fn normalize(&self, name: &'static str, x: Var, group: usize, eps: T) -> Result<Var> {
        let (dims, data, inv_std) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let mut out = t.data().to_vec();
            let gn = T::c(group as f64);
            let mut inv_std = Vec::with_capacity(out.len() / group);
            for g in out.chunks_exact_mut(group) {
                let mean = g.iter().copied().sum::<T>() / gn;
                let var = g.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / gn;
                let inv = T::one() / (var + eps).sqrt();
                g.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                inv_std.push(inv);
            }
            (t.dims().to_vec(), out, inv_std)
        };
        self.push(name, dims, data, Op::Normalize { x: x.0, group, inv_std }, &[x.0])
    }

    /// Per-sample, per-channel standardisation over all trailing axes of
    /// `[N,C,...]`, with `eps` inside the square root.
    pub fn instance_norm(&self, x: Var, eps: T) -> Result<Var> {
        let dims = self.dims(x);
        if dims.len() < 3 {
            return Err(shape_err("instance_norm", format!("expected [N,C,...], got {dims:?}")));
        }
        let group = dims[2..].iter().product();
        self.normalize("instance_norm", x, group, eps)
    }

    /// Standardisation over the last axis (no affine part).
    pub fn layer_norm(&self, x: Var, eps: T) -> Result<Var> {
        let group = *self.dims(x).last().unwrap();
        self.normalize("layer_norm", x, group, eps)
    }

    pub fn l2_normalize(&self, x: Var, eps: T) -> Result<Var> {
        let (dims, data, len, norms) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let len = *t.dims().last().unwrap();
            let mut out = t.data().to_vec();
            let mut norms = Vec::with_capacity(out.len() / len);
            for row in out.chunks_exact_mut(len) {
                let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                row.iter_mut().for_each(|v| *v = *v / n);
                norms.push(n);
            }
            (t.dims().to_vec(), out, len, norms)
        };
        self.push("l2_normalize", dims, data, Op::L2Normalize { x: x.0, len, norms }, &[x.0])
    }

    // ---- reductions ---------------------------------------------------

    /// Sums over `axes`, keeping them as size-1 axes.
    pub fn sum_axes(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let (dims, data, in_dims) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let in_dims = t.dims().to_vec();
            if axes.iter().any(|&a| a >= in_dims.len()) {
                return Err(shape_err("sum_axes", format!("axes {axes:?} out of range for {in_dims:?}")));
            }
            let mut out_dims = in_dims.clone();
            axes.iter().for_each(|&a| out_dims[a] = 1);
            let so = kernels::broadcast_strides(&out_dims, &in_dims);
            let si = kernels::contiguous_strides(&in_dims);
            let mut out = vec![T::zero(); out_dims.iter().product()];
            let d = t.data();
            kernels::visit_runs(&in_dims, &si, &so, |_, oi, oo, len, _, io| {
                if io == 0 {
                    out[oo] += d[oi..oi + len].iter().copied().sum::<T>();
                } else {
                    out[oo..oo + len].iter_mut().zip(&d[oi..oi + len]).for_each(|(o, &v)| *o += v);
                }
            });
            (out_dims, out, in_dims)
        };
        self.push("sum_axes", dims, data, Op::SumAxes { x: x.0, in_dims }, &[x.0])
    }

    pub fn mean_axes(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let dims = self.dims(x);
        let count: usize = axes.iter().map(|&a| dims.get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, T::one() / T::c(count as f64))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let n = self.dims(x).len();
        let axes: Vec<usize> = (0..n).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, vec![1])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value_ref(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Spatial global average pooling: `[N,C,H,W]` to `[N,C]`.
    pub fn gap(&self, x: Var) -> Result<Var> {
        let dims = self.dims(x);
        if dims.len() != 4 {
            return Err(shape_err("gap", format!("expected [N,C,H,W], got {dims:?}")));
        }
        let m = self.mean_axes(x, &[2, 3])?;
        self.reshape(m, vec![dims[0], dims[1]])
    }

    /// Maximum along `axis` (kept as size 1) and the winning indices; the
    /// lowest index wins ties.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let (dims, data, argmax, len, inner) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if axis >= t.dims().len() {
                return Err(shape_err("max_axis", format!("axis {axis} out of range for {:?}", t.dims())));
            }
            let (outer, len, inner) = split_axis(t.dims(), axis);
            let d = t.data();
            let mut out = Vec::with_capacity(outer * inner);
            let mut argmax = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let (mut best, mut bi) = (d[base], 0);
                    for k in 1..len {
                        let v = d[base + k * inner];
                        if v > best {
                            best = v;
                            bi = k;
                        }
                    }
                    out.push(best);
                    argmax.push(bi);
                }
            }
            let mut dims = t.dims().to_vec();
            dims[axis] = 1;
            (dims, out, argmax, len, inner)
        };
        let arg = argmax.clone();
        let v = self.push("max_axis", dims, data, Op::MaxAxis { x: x.0, argmax, len, inner }, &[x.0])?;
        Ok((v, arg))
    }

    // ---- spatial resampling -------------------------------------------

    /// Non-overlapping `k×k` average pooling on `[N,C,H,W]`.
    pub fn avg_pool2d(&self, x: Var, k: usize) -> Result<Var> {
        let (dims, data, h, w) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.dims();
            if d.len() != 4 || k == 0 || d[2] % k != 0 || d[3] % k != 0 {
                return Err(shape_err("avg_pool2d", format!("kernel {k} does not tile {d:?}")));
            }
            let (h, w) = (d[2], d[3]);
            let (oh, ow) = (h / k, w / k);
            let inv = T::one() / T::c((k * k) as f64);
            let mut out = vec![T::zero(); d[0] * d[1] * oh * ow];
            for (p, o) in t.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
                for y in 0..h {
                    for xx in 0..w {
                        o[(y / k) * ow + xx / k] += p[y * w + xx];
                    }
                }
                o.iter_mut().for_each(|v| *v *= inv);
            }
            (vec![d[0], d[1], oh, ow], out, h, w)
        };
        self.push("avg_pool2d", dims, data, Op::AvgPool { x: x.0, k, h, w }, &[x.0])
    }

    /// Bilinear resize of `[N,C,h,w]` to `[N,C,oh,ow]` with half-pixel
    /// centres; an identity when the sizes match.
    pub fn upsample_bilinear(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (dims, data, h, w) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.dims();
            if d.len() != 4 || oh == 0 || ow == 0 {
                return Err(shape_err("upsample_bilinear", format!("bad input {d:?} -> {oh}x{ow}")));
            }
            let (h, w) = (d[2], d[3]);
            let ty = kernels::bilinear_taps(h, oh);
            let tx = kernels::bilinear_taps(w, ow);
            let mut out = vec![T::zero(); d[0] * d[1] * oh * ow];
            for (p, o) in t.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    let (wy1, wy0) = (T::c(wy), T::c(1.0 - wy));
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let (wx1, wx0) = (T::c(wx), T::c(1.0 - wx));
                        let top = p[y0 * w + x0] * wx0 + p[y0 * w + x1] * wx1;
                        let bot = p[y1 * w + x0] * wx0 + p[y1 * w + x1] * wx1;
                        o[oy * ow + ox] = top * wy0 + bot * wy1;
                    }
                }
            }
            (vec![d[0], d[1], oh, ow], out, h, w)
        };
        self.push("upsample_bilinear", dims, data, Op::Upsample { x: x.0, h, w }, &[x.0])
    }

    // ---- layout -------------------------------------------------------

    pub fn reshape(&self, x: Var, dims: Vec<usize>) -> Result<Var> {
        let data = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if dims.iter().product::<usize>() != t.numel() || dims.contains(&0) {
                return Err(shape_err("reshape", format!("cannot view {:?} as {dims:?}", t.dims())));
            }
            t.data().to_vec()
        };
        self.push("reshape", dims, data, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let (dims, data, src_strides) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.dims();
            let mut seen = vec![false; d.len()];
            if perm.len() != d.len() || perm.iter().any(|&p| p >= d.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(shape_err("permute", format!("{perm:?} is not a permutation of {} axes", d.len())));
            }
            let base = kernels::contiguous_strides(d);
            let out_dims: Vec<usize> = perm.iter().map(|&p| d[p]).collect();
            let src_strides: Vec<usize> = perm.iter().map(|&p| base[p]).collect();
            let lin = kernels::contiguous_strides(&out_dims);
            let mut out = vec![T::zero(); t.numel()];
            let src = t.data();
            kernels::visit2(&out_dims, &src_strides, &lin, |l, oi, _| out[l] = src[oi]);
            (out_dims, out, src_strides)
        };
        self.push("permute", dims, data, Op::Permute { x: x.0, src_strides }, &[x.0])
    }

    pub fn transpose(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let n = self.dims(x).len();
        if a >= n || b >= n {
            return Err(shape_err("transpose", format!("axes {a},{b} out of range for rank {n}")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let (dims, data, sizes, inner) = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?.0].value.dims().to_vec();
            if axis >= first.len() {
                return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut sizes = Vec::with_capacity(xs.len());
            for v in xs {
                let d = nodes[v.0].value.dims();
                let compatible = d.len() == first.len()
                    && d.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(shape_err("concat", format!("{d:?} does not match {first:?} off axis {axis}")));
                }
                sizes.push(d[axis]);
            }
            let (outer, _, inner) = split_axis(&first, axis);
            let total: usize = sizes.iter().sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (v, &s) in xs.iter().zip(&sizes) {
                    let d = nodes[v.0].value.data();
                    out.extend_from_slice(&d[o * s * inner..(o + 1) * s * inner]);
                }
            }
            let mut dims = first;
            dims[axis] = total;
            (dims, out, sizes, inner)
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push("concat", dims, data, Op::Concat { xs: ids.clone(), sizes, inner }, &ids)
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (dims, data, full, inner) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.dims();
            if axis >= d.len() || len == 0 || start + len > d[axis] {
                return Err(shape_err("narrow", format!("{start}+{len} on axis {axis} of {d:?}")));
            }
            let (outer, full, inner) = split_axis(d, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut dims = d.to_vec();
            dims[axis] = len;
            (dims, out, full, inner)
        };
        self.push("narrow", dims, data, Op::Narrow { x: x.0, start, len, full, inner }, &[x.0])
    }

    /// Picks entry `idx[n]` along axis 1 for every leading index `n`:
    /// `[N,L,...]` to `[N,...]`.
    pub fn take_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (dims, data, len, row) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let d = t.dims();
            if d.len() < 2 || idx.len() != d[0] || idx.iter().any(|&i| i >= d[1]) {
                return Err(shape_err("take_rows", format!("indices {idx:?} for {d:?}")));
            }
            let (len, row) = (d[1], d[2..].iter().product::<usize>());
            let mut out = Vec::with_capacity(d[0] * row);
            for (n, &i) in idx.iter().enumerate() {
                let base = (n * len + i) * row;
                out.extend_from_slice(&t.data()[base..base + row]);
            }
            let mut dims = vec![d[0]];
            dims.extend_from_slice(&d[2..]);
            if dims.len() == 1 {
                dims.push(1);
            }
            (dims, out, len, row)
        };
        self.push("take_rows", dims, data, Op::TakeRows { x: x.0, idx: idx.to_vec(), len, row }, &[x.0])
    }

    // ---- losses -------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `p` against `targets`;
    /// `p` is clamped to `[eps, 1-eps]` (zero gradient where clamped).
    pub fn bce(&self, p: Var, targets: &[T], eps: T) -> Result<Var> {
        let data = {
            let nodes = self.nodes.borrow();
            let t = &nodes[p.0].value;
            if t.numel() != targets.len() {
                return Err(shape_err("bce", format!("{} predictions for {} targets", t.numel(), targets.len())));
            }
            let n = T::c(targets.len() as f64);
            let s: T = t
                .data()
                .iter()
                .zip(targets)
                .map(|(&pv, &y)| {
                    let pc = pv.max(eps).min(T::one() - eps);
                    -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
                })
                .sum();
            vec![s / n]
        };
        self.push("bce", vec![1], data, Op::Bce { p: p.0, targets: targets.to_vec(), eps }, &[p.0])
    }

    // ---- string dispatch ----------------------------------------------

    /// Applies a primitive by name. Attribute keys: `c` (scale,
    /// add_scalar), `stride`/`pad` (conv2d), `eps`, `axis`, `axes`, `k`,
    /// `h`/`w` (upsample_bilinear), `dims`, `perm`, `start`/`len`.
    pub fn apply(&self, op: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        fn int(op: &'static str, attrs: &Attrs, key: &str) -> Result<usize> {
            match attrs.get(key) {
                Some(AttrValue::Int(v)) if *v >= 0 => Ok(*v as usize),
                other => Err(TensorError::Attr { op, msg: format!("`{key}` must be a non-negative int, got {other:?}") }),
            }
        }
        fn float(op: &'static str, attrs: &Attrs, key: &str) -> Result<f64> {
            match attrs.get(key) {
                Some(AttrValue::Float(v)) => Ok(*v),
                Some(AttrValue::Int(v)) => Ok(*v as f64),
                other => Err(TensorError::Attr { op, msg: format!("`{key}` must be a number, got {other:?}") }),
            }
        }
        fn ints(op: &'static str, attrs: &Attrs, key: &str) -> Result<Vec<usize>> {
            match attrs.get(key) {
                Some(AttrValue::Ints(v)) if v.iter().all(|&x| x >= 0) => Ok(v.iter().map(|&x| x as usize).collect()),
                other => Err(TensorError::Attr { op, msg: format!("`{key}` must be a list of ints, got {other:?}") }),
            }
        }
        let arity = |op: &'static str, n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(TensorError::Attr { op, msg: format!("expects {n} inputs, got {}", inputs.len()) });
            }
            Ok(())
        };
        let eps = |op| attrs.get("eps").map(|_| float(op, attrs, "eps")).unwrap_or(Ok(1e-6)).map(T::c);
        match op {
            "add" | "sub" | "mul" | "div" | "matmul" => {
                arity("binary", 2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match op {
                    "add" => self.add(a, b),
                    "sub" => self.sub(a, b),
                    "mul" => self.mul(a, b),
                    "div" => self.div(a, b),
                    _ => self.matmul(a, b),
                }
            }
            "sigmoid" | "relu" | "exp" | "log" | "sqrt" | "softmax" | "log_softmax" | "sum" | "mean" | "gap" => {
                arity("unary", 1)?;
                let x = inputs[0];
                match op {
                    "sigmoid" => self.sigmoid(x),
                    "relu" => self.relu(x),
                    "exp" => self.exp(x),
                    "log" => self.log(x),
                    "sqrt" => self.sqrt(x),
                    "softmax" => self.softmax(x),
                    "log_softmax" => self.log_softmax(x),
                    "sum" => self.sum(x),
                    "mean" => self.mean(x),
                    _ => self.gap(x),
                }
            }
            "scale" => {
                arity("scale", 1)?;
                self.scale(inputs[0], T::c(float("scale", attrs, "c")?))
            }
            "add_scalar" => {
                arity("add_scalar", 1)?;
                self.add_scalar(inputs[0], T::c(float("add_scalar", attrs, "c")?))
            }
            "linear" => match inputs.len() {
                2 => self.linear(inputs[0], inputs[1], None),
                3 => self.linear(inputs[0], inputs[1], Some(inputs[2])),
                n => Err(TensorError::Attr { op: "linear", msg: format!("expects 2 or 3 inputs, got {n}") }),
            },
            "conv2d" => {
                let stride = int("conv2d", attrs, "stride")?;
                let pad = int("conv2d", attrs, "pad")?;
                match inputs.len() {
                    2 => self.conv2d(inputs[0], inputs[1], None, stride, pad),
                    3 => self.conv2d(inputs[0], inputs[1], Some(inputs[2]), stride, pad),
                    n => Err(TensorError::Attr { op: "conv2d", msg: format!("expects 2 or 3 inputs, got {n}") }),
                }
            }
            "instance_norm" => {
                arity("instance_norm", 1)?;
                self.instance_norm(inputs[0], eps("instance_norm")?)
            }
            "layer_norm" => {
                arity("layer_norm", 1)?;
                self.layer_norm(inputs[0], eps("layer_norm")?)
            }
            "l2_normalize" => {
                arity("l2_normalize", 1)?;
                self.l2_normalize(inputs[0], eps("l2_normalize")?)
            }
            "sum_axes" => {
                arity("sum_axes", 1)?;
                self.sum_axes(inputs[0], &ints("sum_axes", attrs, "axes")?)
            }
            "max_axis" => {
                arity("max_axis", 1)?;
                self.max_axis(inputs[0], int("max_axis", attrs, "axis")?).map(|(v, _)| v)
            }
            "avg_pool2d" => {
                arity("avg_pool2d", 1)?;
                self.avg_pool2d(inputs[0], int("avg_pool2d", attrs, "k")?)
            }
            "upsample_bilinear" => {
                arity("upsample_bilinear", 1)?;
                self.upsample_bilinear(inputs[0], int("upsample_bilinear", attrs, "h")?, int("upsample_bilinear", attrs, "w")?)
            }
            "reshape" => {
                arity("reshape", 1)?;
                self.reshape(inputs[0], ints("reshape", attrs, "dims")?)
            }
            "permute" => {
                arity("permute", 1)?;
                self.permute(inputs[0], &ints("permute", attrs, "perm")?)
            }
            "concat" => self.concat(inputs, int("concat", attrs, "axis")?),
            "narrow" => {
                arity("narrow", 1)?;
                self.narrow(inputs[0], int("narrow", attrs, "axis")?, int("narrow", attrs, "start")?, int("narrow", attrs, "len")?)
            }
            other => Err(TensorError::UnknownOp(other.to_string())),
        }
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients from multiple uses of
    /// a value add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = nodes.get(loss.0).ok_or_else(|| TensorError::Backward("loss is not on this tape".into()))?;
        if root.value.numel() != 1 {
            return Err(TensorError::Backward(format!("loss must be scalar, got dims {:?}", root.value.dims())));
        }
        if !root.needs_grad {
            return Err(TensorError::Backward("loss does not depend on any requires_grad leaf".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.insert(i, Tensor::from_parts(node.value.dims().to_vec(), g));
                continue;
            }
            backprop(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

fn slot<'a, T: Element>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]))
}

fn backprop<T: Element>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    let ydims = node.value.dims();
    let val = |id: usize| nodes[id].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let (da, db) = (nodes[a].value.dims(), nodes[b].value.dims());
            let (va, vb) = (val(a), val(b));
            let sa = kernels::broadcast_strides(da, ydims);
            let sb = kernels::broadcast_strides(db, ydims);
            if let Some(ga) = slot(grads, nodes, a) {
                kernels::visit_runs(ydims, &sa, &sb, |l, oa, ob, len, ia, ib| {
                    let gr = &g[l..l + len];
                    match kind {
                        BinKind::Add | BinKind::Sub => kernels::acc_run(ga, oa, ia, gr, va, oa, ia, vb, ob, ib, |g, _, _| g),
                        BinKind::Mul => kernels::acc_run(ga, oa, ia, gr, va, oa, ia, vb, ob, ib, |g, _, y| g * y),
                        BinKind::Div => kernels::acc_run(ga, oa, ia, gr, va, oa, ia, vb, ob, ib, |g, _, y| g / y),
                    }
                });
            }
            if let Some(gb) = slot(grads, nodes, b) {
                kernels::visit_runs(ydims, &sa, &sb, |l, oa, ob, len, ia, ib| {
                    let gr = &g[l..l + len];
                    match kind {
                        BinKind::Add => kernels::acc_run(gb, ob, ib, gr, va, oa, ia, vb, ob, ib, |g, _, _| g),
                        BinKind::Sub => kernels::acc_run(gb, ob, ib, gr, va, oa, ia, vb, ob, ib, |g, _, _| -g),
                        BinKind::Mul => kernels::acc_run(gb, ob, ib, gr, va, oa, ia, vb, ob, ib, |g, x, _| g * x),
                        BinKind::Div => kernels::acc_run(gb, ob, ib, gr, va, oa, ia, vb, ob, ib, |g, x, y| -g * x / (y * y)),
                    }
                });
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *c);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Op::Unary { kind, x } => {
            let xv = val(*x);
            if let Some(gx) = slot(grads, nodes, *x) {
                for j in 0..g.len() {
                    gx[j] += match kind {
                        UnaryKind::Sigmoid => g[j] * y[j] * (T::one() - y[j]),
                        UnaryKind::Relu => {
                            if xv[j] > T::zero() {
                                g[j]
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Exp => g[j] * y[j],
                        UnaryKind::Log => g[j] / xv[j],
                        UnaryKind::Sqrt => g[j] / (T::c(2.0) * y[j]),
                    };
                }
            }
        }
        Op::Matmul { a, b, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = slot(grads, nodes, *a) {
                for s in 0..*batch {
                    kernels::gemm(m, k, n, &g[s * m * n..(s + 1) * m * n], false, &vb[s * k * n..(s + 1) * k * n], true, &mut ga[s * m * k..(s + 1) * m * k], true);
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for s in 0..*batch {
                    kernels::gemm(k, n, m, &va[s * m * k..(s + 1) * m * k], true, &g[s * m * n..(s + 1) * m * n], false, &mut gb[s * k * n..(s + 1) * k * n], true);
                }
            }
        }
        Op::Linear { x, w, b, rows, inp, out } => {
            let (rows, inp, out) = (*rows, *inp, *out);
            if let Some(gx) = slot(grads, nodes, *x) {
                kernels::gemm(rows, inp, out, g, false, val(*w), false, gx, true);
            }
            if let Some(gw) = slot(grads, nodes, *w) {
                kernels::gemm(out, inp, rows, g, true, val(*x), false, gw, true);
            }
            if let Some(b) = b {
                if let Some(gb) = slot(grads, nodes, *b) {
                    for row in g.chunks_exact(out) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom, batch, cout } => {
            let (kk, hw, cout) = (geom.col_rows(), geom.col_cols(), *cout);
            let plane = geom.cin * geom.h * geom.w;
            let (xv, wv) = (val(*x), val(*w));
            if let Some(gw) = slot(grads, nodes, *w) {
                let mut col = vec![T::zero(); kk * hw];
                for s in 0..*batch {
                    kernels::im2col(&xv[s * plane..(s + 1) * plane], geom, &mut col);
                    kernels::gemm(cout, kk, hw, &g[s * cout * hw..(s + 1) * cout * hw], false, &col, true, gw, true);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut gcol = vec![T::zero(); kk * hw];
                for s in 0..*batch {
                    kernels::gemm(kk, hw, cout, wv, true, &g[s * cout * hw..(s + 1) * cout * hw], false, &mut gcol, false);
                    kernels::col2im(&gcol, geom, &mut gx[s * plane..(s + 1) * plane]);
                }
            }
            if let Some(b) = b {
                if let Some(gb) = slot(grads, nodes, *b) {
                    for s in 0..*batch {
                        for (c, row) in g[s * cout * hw..(s + 1) * cout * hw].chunks_exact(hw).enumerate() {
                            gb[c] += row.iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }
        Op::Softmax { x, len } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((gr, yr), gxr) in g.chunks_exact(*len).zip(y.chunks_exact(*len)).zip(gx.chunks_exact_mut(*len)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..*len {
                        gxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { x, len } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((gr, yr), gxr) in g.chunks_exact(*len).zip(y.chunks_exact(*len)).zip(gx.chunks_exact_mut(*len)) {
                    let s: T = gr.iter().copied().sum();
                    for j in 0..*len {
                        gxr[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
        }
        Op::Normalize { x, group, inv_std } => {
            let gn = T::c(*group as f64);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (q, ((gr, yr), gxr)) in g.chunks_exact(*group).zip(y.chunks_exact(*group)).zip(gx.chunks_exact_mut(*group)).enumerate() {
                    let mg = gr.iter().copied().sum::<T>() / gn;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / gn;
                    for j in 0..*group {
                        gxr[j] += inv_std[q] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
        }
        Op::L2Normalize { x, len, norms } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (q, ((gr, yr), gxr)) in g.chunks_exact(*len).zip(y.chunks_exact(*len)).zip(gx.chunks_exact_mut(*len)).enumerate() {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..*len {
                        gxr[j] += (gr[j] - yr[j] * dot) / norms[q];
                    }
                }
            }
        }
        Op::SumAxes { x, in_dims } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let so = kernels::broadcast_strides(ydims, in_dims);
                let si = kernels::contiguous_strides(in_dims);
                kernels::visit_runs(in_dims, &si, &so, |_, oi, oo, len, _, io| {
                    let dst = &mut gx[oi..oi + len];
                    if io == 0 {
                        dst.iter_mut().for_each(|v| *v += g[oo]);
                    } else {
                        dst.iter_mut().zip(&g[oo..oo + len]).for_each(|(v, &x)| *v += x);
                    }
                });
            }
        }
        Op::MaxAxis { x, argmax, len, inner } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (q, (&gv, &k)) in g.iter().zip(argmax).enumerate() {
                    let (o, i) = (q / inner, q % inner);
                    gx[o * len * inner + k * inner + i] += gv;
                }
            }
        }
        Op::AvgPool { x, k, h, w } => {
            let (k, h, w) = (*k, *h, *w);
            let (oh, ow) = (h / k, w / k);
            let inv = T::one() / T::c((k * k) as f64);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (gp, gxp) in g.chunks_exact(oh * ow).zip(gx.chunks_exact_mut(h * w)) {
                    for yy in 0..h {
                        for xx in 0..w {
                            gxp[yy * w + xx] += gp[(yy / k) * ow + xx / k] * inv;
                        }
                    }
                }
            }
        }
        Op::Upsample { x, h, w } => {
            let (h, w) = (*h, *w);
            let (oh, ow) = (ydims[2], ydims[3]);
            let ty = kernels::bilinear_taps(h, oh);
            let tx = kernels::bilinear_taps(w, ow);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (gp, gxp) in g.chunks_exact(oh * ow).zip(gx.chunks_exact_mut(h * w)) {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        let (wy1, wy0) = (T::c(wy), T::c(1.0 - wy));
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let (wx1, wx0) = (T::c(wx), T::c(1.0 - wx));
                            let v = gp[oy * ow + ox];
                            gxp[y0 * w + x0] += v * wy0 * wx0;
                            gxp[y0 * w + x1] += v * wy0 * wx1;
                            gxp[y1 * w + x0] += v * wy1 * wx0;
                            gxp[y1 * w + x1] += v * wy1 * wx1;
                        }
                    }
                }
            }
        }
        Op::Permute { x, src_strides } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let lin = kernels::contiguous_strides(ydims);
                kernels::visit2(ydims, src_strides, &lin, |l, oi, _| gx[oi] += g[l]);
            }
        }
        Op::Concat { xs, sizes, inner } => {
            let total: usize = sizes.iter().sum();
            let outer = g.len() / (total * inner);
            let mut offset = 0;
            for (&id, &s) in xs.iter().zip(sizes) {
                if let Some(gx) = slot(grads, nodes, id) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + s) * inner];
                        gx[o * s * inner..(o + 1) * s * inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                offset += s;
            }
        }
        Op::Narrow { x, start, len, full, inner } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let outer = gx.len() / (full * inner);
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::TakeRows { x, idx, len, row } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (n, &k) in idx.iter().enumerate() {
                    let base = (n * len + k) * row;
                    gx[base..base + row].iter_mut().zip(&g[n * row..(n + 1) * row]).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Bce { p, targets, eps } => {
            let pv = val(*p);
            let n = T::c(targets.len() as f64);
            if let Some(gp) = slot(grads, nodes, *p) {
                for j in 0..targets.len() {
                    let (pj, t) = (pv[j], targets[j]);
                    if pj < *eps || pj > T::one() - *eps {
                        continue;
                    }
                    gp[j] += -g[0] * (t / pj - (T::one() - t) / (T::one() - pj)) / n;
                }
            }
        }
    }
}

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{broadcast_index, broadcast_shape, col2im, gemm, im2col, permute_index};
use super::{check_axis, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Append-only record of a differentiable computation.
///
/// Node ids increase in creation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    MatMul(MatMulSpec),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    SumTo(usize),
    BroadcastTo(usize),
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, indices: Vec<usize> },
    Conv2d { x: usize, w: usize, b: usize, k: usize, cols: Vec<f64> },
}

#[derive(Clone, Copy)]
struct MatMulSpec {
    a: usize,
    b: usize,
    trans_b: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, shape={:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Var::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: &Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing flowed into `v`.
    pub fn tensor(&self, v: &Var) -> Tensor {
        let shape = &self.shapes[v.id];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push_raw(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = first.shape();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        let nodes = self.inner.borrow();
        let mut offset = 0;
        for p in parts {
            let n = &nodes[p.id];
            let len = n.shape[axis] * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset;
                data[dst..dst + len].copy_from_slice(&n.data[o * len..(o + 1) * len]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push_raw(shape, data, Op::Concat { parts: ids, axis }, rg))
    }

    fn push_raw(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, data, op, requires_grad });
        Var { tape: self.clone(), id }
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_raw(shape, data, op, requires_grad))
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

fn reduce_to(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let map = broadcast_index(out_shape, in_shape);
    let mut acc = vec![0.0; in_shape.iter().product()];
    for (gi, &ii) in g.iter().zip(&map) {
        acc[ii] += gi;
    }
    acc
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
            Binary::Min => "minimum",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
            Binary::Max => a.max(b),
            Binary::Min => a.min(b),
        }
    }

    fn op(self, a: usize, b: usize) -> Op {
        match self {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
            Binary::Max => Op::Maximum(a, b),
            Binary::Min => Op::Minimum(a, b),
        }
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Clamp(f64, f64),
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn node(&self) -> Ref<'_, Node> {
        Ref::map(self.tape.inner.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        let n = self.node();
        Tensor::new(&n.shape, n.data.clone()).expect("node shape")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node().data.clone()
    }

    pub fn item(&self) -> Result<f64> {
        let n = self.node();
        if n.data.len() != 1 {
            return shape_err("Var::item", format!("tensor has shape {:?}", n.shape));
        }
        Ok(n.data[0])
    }

    fn check_same_tape(&self, other: &Var, op: &'static str) -> Result<()> {
        if !self.tape.same(&other.tape) {
            return invalid(format!("{op}: operands live on different tapes"));
        }
        Ok(())
    }

    fn binary(&self, other: &Var, kind: Binary) -> Result<Var> {
        self.check_same_tape(other, kind.name())?;
        let nodes = self.tape.inner.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::Shape {
            op: kind.name(),
            detail: format!("cannot broadcast {:?} with {:?}", a.shape, b.shape),
        })?;
        let data: Vec<f64> = if a.shape == b.shape {
            a.data.iter().zip(&b.data).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else {
            let ma = broadcast_index(&shape, &a.shape);
            let mb = broadcast_index(&shape, &b.shape);
            ma.iter().zip(&mb).map(|(&i, &j)| kind.apply(a.data[i], b.data[j])).collect()
        };
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        self.tape.push(kind.name(), shape, data, kind.op(self.id, other.id), rg)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Div)
    }

    pub fn maximum(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Max)
    }

    pub fn minimum(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Min)
    }

    fn unary(&self, kind: Unary) -> Result<Var> {
        let n = self.node();
        let f: fn(f64, Unary) -> f64 = |x, k| match k {
            Unary::Neg => -x,
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        };
        let data: Vec<f64> = n.data.iter().map(|&x| f(x, kind)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        drop(n);
        let x = self.id;
        let (name, op) = match kind {
            Unary::Neg => ("neg", Op::Neg(x)),
            Unary::Scale(c) => ("scale", Op::Scale(x, c)),
            Unary::AddScalar(_) => ("add_scalar", Op::AddScalar(x)),
            Unary::Relu => ("relu", Op::Relu(x)),
            Unary::Sigmoid => ("sigmoid", Op::Sigmoid(x)),
            Unary::Exp => ("exp", Op::Exp(x)),
            Unary::Log => ("log", Op::Log(x)),
            Unary::Abs => ("abs", Op::Abs(x)),
            Unary::Clamp(lo, hi) => ("clamp", Op::Clamp { x, lo, hi }),
        };
        self.tape.push(name, shape, data, op, rg)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary(Unary::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c))
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(Unary::Sigmoid)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var> {
        self.unary(Unary::Log)
    }

    pub fn abs(&self) -> Result<Var> {
        self.unary(Unary::Abs)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return invalid(format!("clamp bounds [{lo}, {hi}]"));
        }
        self.unary(Unary::Clamp(lo, hi))
    }

    /// `self · other` over the last two axes.
    ///
    /// `self` is `[..., m, k]`; `other` is either a shared `[k, n]` matrix or
    /// a batch `[..., k, n]` with the same leading extents.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` over the last two axes (`other` is `[..., n, k]` or `[n, k]`).
    pub fn matmul_t(&self, other: &Var) -> Result<Var> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var, trans_b: bool) -> Result<Var> {
        self.check_same_tape(other, "matmul")?;
        let nodes = self.tape.inner.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape.len() < 2 || b.shape.len() < 2 {
            return shape_err("matmul", format!("need rank >= 2, got {:?} and {:?}", a.shape, b.shape));
        }
        let ra = a.shape.len();
        let rb = b.shape.len();
        let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
        let (kb, n) = if trans_b { (b.shape[rb - 1], b.shape[rb - 2]) } else { (b.shape[rb - 2], b.shape[rb - 1]) };
        if k != kb {
            return shape_err("matmul", format!("inner dims differ: {:?} x {:?}", a.shape, b.shape));
        }
        let lead: usize = a.shape[..ra - 2].iter().product();
        let shared = rb == 2;
        if !shared && b.shape[..rb - 2] != a.shape[..ra - 2] {
            return shape_err("matmul", format!("batch dims differ: {:?} x {:?}", a.shape, b.shape));
        }
        // A shared right operand folds the batch into the row dimension.
        let spec = if shared {
            MatMulSpec { a: self.id, b: other.id, trans_b, batch: 1, m: lead * m, k, n }
        } else {
            MatMulSpec { a: self.id, b: other.id, trans_b, batch: lead, m, k, n }
        };
        let mut data = vec![0.0; spec.batch * spec.m * n];
        for bi in 0..spec.batch {
            gemm(
                spec.m,
                k,
                n,
                &a.data[bi * spec.m * k..(bi + 1) * spec.m * k],
                false,
                &b.data[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut data[bi * spec.m * n..(bi + 1) * spec.m * n],
                false,
            );
        }
        let mut shape = a.shape.clone();
        shape[ra - 1] = n;
        let rg = a.requires_grad || b.requires_grad;
        drop(nodes);
        self.tape.push("matmul", shape, data, Op::MatMul(spec), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let n = self.node();
        let d = *n.shape.last().ok_or_else(|| Error::Invalid("softmax of a scalar".into()))?;
        let mut data = n.data.clone();
        for row in data.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        drop(n);
        self.tape.push("softmax", shape, data, Op::Softmax(self.id), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that extent.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.check_same_tape(gamma, "layer_norm")?;
        self.check_same_tape(beta, "layer_norm")?;
        let nodes = self.tape.inner.borrow();
        let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
        let d = *x.shape.last().ok_or_else(|| Error::Invalid("layer_norm of a scalar".into()))?;
        if d == 0 || g.shape != [d] || b.shape != [d] {
            return shape_err("layer_norm", format!("x {:?}, gamma {:?}, beta {:?}", x.shape, g.shape, b.shape));
        }
        let rows = x.data.len() / d;
        let mut xhat = vec![0.0; x.data.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; x.data.len()];
        for r in 0..rows {
            let row = &x.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g.data[j] + b.data[j];
            }
        }
        let shape = x.shape.clone();
        let rg = x.requires_grad || g.requires_grad || b.requires_grad;
        drop(nodes);
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        self.tape.push("layer_norm", shape, data, op, rg)
    }

    /// Sums into `shape`, which must broadcast to `self.shape()`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        let n = self.node();
        if broadcast_shape(&n.shape, shape).as_deref() != Some(&n.shape[..]) || shape.len() > n.shape.len() {
            return shape_err("sum_to", format!("{:?} does not reduce to {:?}", n.shape, shape));
        }
        let data = reduce_to(&n.data, &n.shape, shape);
        let rg = n.requires_grad;
        drop(n);
        self.tape.push("sum_to", shape.to_vec(), data, Op::SumTo(self.id), rg)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let n = self.node();
        if broadcast_shape(&n.shape, shape).as_deref() != Some(shape) {
            return shape_err("broadcast_to", format!("{:?} cannot expand to {:?}", n.shape, shape));
        }
        let map = broadcast_index(shape, &n.shape);
        let data = map.iter().map(|&i| n.data[i]).collect();
        let rg = n.requires_grad;
        drop(n);
        self.tape.push("broadcast_to", shape.to_vec(), data, Op::BroadcastTo(self.id), rg)
    }

    /// Sum over `axes`; reduced axes are dropped unless `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape();
        let mut kept = shape.clone();
        for &ax in axes {
            check_axis("sum_axes", ax, shape.len())?;
            kept[ax] = 1;
        }
        let s = self.sum_to(&kept)?;
        if keepdim {
            return Ok(s);
        }
        let squeezed: Vec<usize> =
            shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &e)| e).collect();
        s.reshape(&squeezed)
    }

    /// Arithmetic mean over `axes`; errors on an empty reduction.
    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape();
        let mut count = 1usize;
        for &ax in axes {
            check_axis("mean_axes", ax, shape.len())?;
            count *= shape[ax];
        }
        if count == 0 || axes.is_empty() {
            return invalid("mean over an empty reduction");
        }
        self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Result<Var> {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Result<Var> {
        let n = self.numel();
        if n == 0 {
            return invalid("mean over an empty tensor");
        }
        self.sum_all()?.scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let n = self.node();
        if shape.iter().product::<usize>() != n.data.len() {
            return shape_err("reshape", format!("{:?} -> {:?}", n.shape, shape));
        }
        let data = n.data.clone();
        let rg = n.requires_grad;
        drop(n);
        self.tape.push("reshape", shape.to_vec(), data, Op::Reshape(self.id), rg)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let n = self.node();
        let rank = n.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return invalid(format!("permute: {:?} is not a permutation of rank {}", perm, rank));
        }
        let map = permute_index(&n.shape, perm);
        let data = map.iter().map(|&i| n.data[i]).collect();
        let shape = perm.iter().map(|&p| n.shape[p]).collect();
        let rg = n.requires_grad;
        drop(n);
        self.tape.push("permute", shape, data, Op::Permute { x: self.id, perm: perm.to_vec() }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var> {
        let r = self.shape().len();
        if r < 2 {
            return shape_err("transpose", "rank < 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let n = self.node();
        check_axis("narrow", axis, n.shape.len())?;
        if start + len > n.shape[axis] {
            return shape_err("narrow", format!("[{start}, {}) exceeds extent {}", start + len, n.shape[axis]));
        }
        let outer: usize = n.shape[..axis].iter().product();
        let inner: usize = n.shape[axis + 1..].iter().product();
        let ext = n.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&n.data[base..base + len * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = len;
        let rg = n.requires_grad;
        drop(n);
        self.tape.push("narrow", shape, data, Op::Narrow { x: self.id, axis, start }, rg)
    }

    /// Gathers entries of axis 0; indices may repeat.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var> {
        let n = self.node();
        if n.shape.is_empty() {
            return shape_err("index_select", "scalar input");
        }
        let rows = n.shape[0];
        let inner: usize = n.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return invalid(format!("index_select: index {i} out of range for {rows} rows"));
            }
            data.extend_from_slice(&n.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = n.shape.clone();
        shape[0] = indices.len();
        let rg = n.requires_grad;
        drop(n);
        let op = Op::IndexSelect { x: self.id, indices: indices.to_vec() };
        self.tape.push("index_select", shape, data, op, rg)
    }

    /// Same-padded 2-D convolution of an `[H, W, Cin]` map with weights
    /// `[k, k, Cin, Cout]` and bias `[Cout]` (odd `k`).
    pub fn conv2d(&self, weight: &Var, bias: &Var) -> Result<Var> {
        self.check_same_tape(weight, "conv2d")?;
        self.check_same_tape(bias, "conv2d")?;
        let nodes = self.tape.inner.borrow();
        let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
        let ok = x.shape.len() == 3
            && w.shape.len() == 4
            && w.shape[0] == w.shape[1]
            && w.shape[0] % 2 == 1
            && w.shape[2] == x.shape[2]
            && b.shape == [w.shape[3]];
        if !ok {
            return shape_err("conv2d", format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape));
        }
        let (h, wd, cin) = (x.shape[0], x.shape[1], x.shape[2]);
        let (k, cout) = (w.shape[0], w.shape[3]);
        let cols = im2col(&x.data, h, wd, cin, k);
        let mut data = vec![0.0; h * wd * cout];
        for row in data.chunks_mut(cout) {
            row.copy_from_slice(&b.data);
        }
        gemm(h * wd, k * k * cin, cout, &cols, false, &w.data, false, &mut data, true);
        let rg = x.requires_grad || w.requires_grad || b.requires_grad;
        drop(nodes);
        let op = Op::Conv2d { x: self.id, w: weight.id, b: bias.id, k, cols };
        self.tape.push("conv2d", vec![h, wd, cout], data, op, rg)
    }

    /// Reverse sweep from this scalar, seeding d(self)/d(self) = 1.
    pub fn backward(&self) -> Result<Grads> {
        let nodes = self.tape.inner.borrow();
        if nodes[self.id].data.len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", nodes[self.id].shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Grads { grads, shapes })
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    let out = &node.data;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            if rg(a) {
                accumulate(grads, a, reduce_to(g, &node.shape, &nodes[a].shape));
            }
            if rg(b) {
                let mut gb = reduce_to(g, &node.shape, &nodes[b].shape);
                if matches!(node.op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, b, gb);
            }
        }
        &Op::Mul(a, b) | &Op::Div(a, b) | &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
            let (na, nb) = (&nodes[a], &nodes[b]);
            let same = na.shape == nb.shape;
            let ma = if same { Vec::new() } else { broadcast_index(&node.shape, &na.shape) };
            let mb = if same { Vec::new() } else { broadcast_index(&node.shape, &nb.shape) };
            let ix = |m: &Vec<usize>, i: usize| if same { i } else { m[i] };
            let mut ga = vec![0.0; na.data.len()];
            let mut gb = vec![0.0; nb.data.len()];
            for i in 0..g.len() {
                let (ia, ib) = (ix(&ma, i), ix(&mb, i));
                let (x, y) = (na.data[ia], nb.data[ib]);
                let (da, db) = match node.op {
                    Op::Mul(..) => (y, x),
                    Op::Div(..) => (1.0 / y, -x / (y * y)),
                    // ties send the gradient to the left operand
                    Op::Maximum(..) => {
                        if x >= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                    _ => {
                        if x <= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                };
                ga[ia] += g[i] * da;
                gb[ib] += g[i] * db;
            }
            if rg(a) {
                accumulate(grads, a, ga);
            }
            if rg(b) {
                accumulate(grads, b, gb);
            }
        }
        &Op::Neg(x) => accumulate(grads, x, g.iter().map(|v| -v).collect()),
        &Op::Scale(x, c) => accumulate(grads, x, g.iter().map(|v| v * c).collect()),
        &Op::AddScalar(x) => accumulate(grads, x, g.to_vec()),
        &Op::Relu(x) => {
            let xs = &nodes[x].data;
            accumulate(grads, x, g.iter().zip(xs).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect())
        }
        &Op::Sigmoid(x) => accumulate(grads, x, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect()),
        &Op::Exp(x) => accumulate(grads, x, g.iter().zip(out).map(|(g, e)| g * e).collect()),
        &Op::Log(x) => {
            let xs = &nodes[x].data;
            accumulate(grads, x, g.iter().zip(xs).map(|(g, v)| g / v).collect())
        }
        &Op::Abs(x) => {
            let xs = &nodes[x].data;
            accumulate(grads, x, g.iter().zip(xs).map(|(g, v)| g * v.signum() * (*v != 0.0) as u8 as f64).collect())
        }
        &Op::Clamp { x, lo, hi } => {
            let xs = &nodes[x].data;
            accumulate(grads, x, g.iter().zip(xs).map(|(g, &v)| if v > lo && v < hi { *g } else { 0.0 }).collect())
        }
        &Op::MatMul(s) => {
            let (a, b) = (&nodes[s.a], &nodes[s.b]);
            let (m, k, n) = (s.m, s.k, s.n);
            if rg(s.a) {
                let mut ga = vec![0.0; a.data.len()];
                for bi in 0..s.batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &b.data[bi * k * n..(bi + 1) * k * n];
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, gc, false, bb, !s.trans_b, &mut ga[bi * m * k..(bi + 1) * m * k], false);
                }
                accumulate(grads, s.a, ga);
            }
            if rg(s.b) {
                let mut gb = vec![0.0; b.data.len()];
                for bi in 0..s.batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let aa = &a.data[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if s.trans_b {
                        gemm(n, m, k, gc, true, aa, false, dst, false);
                    } else {
                        gemm(k, m, n, aa, true, gc, false, dst, false);
                    }
                }
                accumulate(grads, s.b, gb);
            }
        }
        &Op::Softmax(x) => {
            let d = *node.shape.last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, x, gx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *node.shape.last().unwrap();
            let gam = &nodes[*gamma].data;
            let rows = g.len() / d;
            if rg(*x) {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gam[j];
                        m1 += gh;
                        m2 += gh * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                    }
                }
                accumulate(grads, *x, gx);
            }
            if rg(*gamma) {
                let mut gg = vec![0.0; d];
                for (i, gv) in g.iter().enumerate() {
                    gg[i % d] += gv * xhat[i];
                }
                accumulate(grads, *gamma, gg);
            }
            if rg(*beta) {
                let mut gb = vec![0.0; d];
                for (i, gv) in g.iter().enumerate() {
                    gb[i % d] += gv;
                }
                accumulate(grads, *beta, gb);
            }
        }
        &Op::SumTo(x) => {
            let map = broadcast_index(&nodes[x].shape, &node.shape);
            accumulate(grads, x, map.iter().map(|&i| g[i]).collect());
        }
        &Op::BroadcastTo(x) => accumulate(grads, x, reduce_to(g, &node.shape, &nodes[x].shape)),
        &Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
        Op::Permute { x, perm } => {
            let map = permute_index(&nodes[*x].shape, perm);
            let mut gx = vec![0.0; g.len()];
            for (gv, &src) in g.iter().zip(&map) {
                gx[src] = *gv;
            }
            accumulate(grads, *x, gx);
        }
        Op::Concat { parts, axis } => {
            let axis = *axis;
            let outer: usize = node.shape[..axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let total = node.shape[axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[axis] * inner;
                if rg(p) {
                    let mut gp = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += len;
            }
        }
        &Op::Narrow { x, axis, start } => {
            let xs = &nodes[x].shape;
            let outer: usize = xs[..axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let len = node.shape[axis];
            let mut gx = vec![0.0; nodes[x].data.len()];
            for o in 0..outer {
                let dst = o * xs[axis] * inner + start * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, x, gx);
        }
        Op::IndexSelect { x, indices } => {
            let inner: usize = nodes[*x].shape[1..].iter().product();
            let mut gx = vec![0.0; nodes[*x].data.len()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..inner {
                    gx[i * inner + j] += g[r * inner + j];
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Conv2d { x, w, b, k, cols } => {
            let (h, wd, cin) = (nodes[*x].shape[0], nodes[*x].shape[1], nodes[*x].shape[2]);
            let cout = node.shape[2];
            let kk = k * k * cin;
            if rg(*w) {
                let mut gw = vec![0.0; kk * cout];
                gemm(kk, h * wd, cout, cols, true, g, false, &mut gw, false);
                accumulate(grads, *w, gw);
            }
            if rg(*b) {
                let mut gb = vec![0.0; cout];
                for row in g.chunks(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                accumulate(grads, *b, gb);
            }
            if rg(*x) {
                let mut gcols = vec![0.0; h * wd * kk];
                gemm(h * wd, cout, kk, g, false, &nodes[*w].data, true, &mut gcols, false);
                accumulate(grads, *x, col2im(&gcols, h, wd, cin, *k));
            }
        }
    }
}

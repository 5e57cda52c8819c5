//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! immutable once recorded. [`Tape::backward`] walks the nodes in reverse and
//! returns a fresh [`Gradients`] table; it does not consume or modify the
//! tape, so it may be called more than once (gradients are never accumulated
//! across calls). A tape is single-writer: build one per forward pass.

use std::cell::RefCell;
use std::ops;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

type Id = usize;

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Output-to-input flat index map for broadcasting; `None` means identity.
type BroadcastMap = Option<Vec<usize>>;

enum Op {
    Leaf,
    Add(Id, Id, BroadcastMap, BroadcastMap),
    Sub(Id, Id, BroadcastMap, BroadcastMap),
    Mul(Id, Id, BroadcastMap, BroadcastMap),
    Neg(Id),
    Scale(Id, f64),
    AddScalar(Id),
    MatMul {
        a: Id,
        b: Id,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose(Id),
    Reshape(Id),
    Sum(Id),
    LogSoftmax(Id),
    Softmax(Id),
    LogSumExp(Id),
    LogAddExp(Id, Id),
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Glu(Id),
    Sigmoid(Id),
    Swish(Id),
    Relu(Id),
    Exp(Id),
    Log(Id),
    DepthwiseConv1d(Id, Id),
    IndexRows(Id, Vec<usize>),
    IndexCols(Id, Vec<usize>),
    Pick(Id, Vec<usize>),
    SliceRows(Id, usize),
    SliceCols(Id, usize),
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    Dropout(Id, Vec<f64>),
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a shared tensor (typically a model parameter) without copying it.
    pub fn shared(&self, value: &Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::clone(value), Op::Leaf, requires_grad)
    }

    fn value(&self, id: Id) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients or does not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("gradient shape"))
    }

    /// Borrowing variant of [`wrt`](Self::wrt).
    pub fn slice(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: Id) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], id: Id, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, ma, mb) => {
            scatter_map(acc(grads, nodes, *a), g, ma.as_deref(), |gi, _| gi);
            scatter_map(acc(grads, nodes, *b), g, mb.as_deref(), |gi, _| gi);
        }
        Op::Sub(a, b, ma, mb) => {
            scatter_map(acc(grads, nodes, *a), g, ma.as_deref(), |gi, _| gi);
            scatter_map(acc(grads, nodes, *b), g, mb.as_deref(), |gi, _| -gi);
        }
        Op::Mul(a, b, ma, mb) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let at = |i: usize| av.data()[ma.as_ref().map_or(i, |m| m[i])];
            let bt = |i: usize| bv.data()[mb.as_ref().map_or(i, |m| m[i])];
            scatter_map(acc(grads, nodes, *a), g, ma.as_deref(), |gi, i| gi * bt(i));
            scatter_map(acc(grads, nodes, *b), g, mb.as_deref(), |gi, i| gi * at(i));
        }
        Op::Neg(a) => unary(grads, nodes, *a, g, |gi, _| -gi),
        Op::Scale(a, c) => unary(grads, nodes, *a, g, |gi, _| gi * c),
        Op::AddScalar(a) => unary(grads, nodes, *a, g, |gi, _| gi),
        Op::MatMul {
            a,
            b,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (rsb, csb) = if *trans_b { (1, k as isize) } else { (n as isize, 1) };
            if nodes[*a].requires_grad {
                let bv = Arc::clone(&nodes[*b].value);
                let da = acc(grads, nodes, *a).unwrap();
                // dA[m×k] += G[m×n] · op(B)ᵀ
                gemm(m, n, k, g, (n as isize, 1), bv.data(), (csb, rsb), da);
            }
            if nodes[*b].requires_grad {
                let av = Arc::clone(&nodes[*a].value);
                let db = acc(grads, nodes, *b).unwrap();
                if *trans_b {
                    // dB[n×k] += Gᵀ[n×m] · A[m×k]
                    gemm(n, m, k, g, (1, n as isize), av.data(), (k as isize, 1), db);
                } else {
                    // dB[k×n] += Aᵀ[k×m] · G[m×n]
                    gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), db);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            if let Some(da) = acc(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) => unary(grads, nodes, *a, g, |gi, _| gi),
        Op::Sum(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                let c = out.last_dim();
                for (r, (grow, orow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for j in 0..c {
                        da[r * c + j] += grow[j] - orow[j].exp() * total;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                let c = out.last_dim();
                for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da[r * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogSumExp(a) => {
            let av = Arc::clone(&nodes[*a].value);
            if let Some(da) = acc(grads, nodes, *a) {
                let c = av.last_dim();
                for (r, row) in av.data().chunks(c).enumerate() {
                    let lse = out.data()[r];
                    if lse == f64::NEG_INFINITY {
                        continue;
                    }
                    for j in 0..c {
                        da[r * c + j] += g[r] * (row[j] - lse).exp();
                    }
                }
            }
        }
        Op::LogAddExp(a, b) => {
            for src in [*a, *b] {
                let sv = Arc::clone(&nodes[src].value);
                if let Some(ds) = acc(grads, nodes, src) {
                    for i in 0..g.len() {
                        let o = out.data()[i];
                        if o != f64::NEG_INFINITY {
                            ds[i] += g[i] * (sv.data()[i] - o).exp();
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = Arc::clone(&nodes[*gain].value);
            let c = gv.numel();
            if let Some(dx) = acc(grads, nodes, *x) {
                for (r, &inv) in inv_std.iter().enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let hrow = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        let d = grow[j] * gv.data()[j];
                        sum_d += d;
                        sum_dh += d * hrow[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let d = grow[j] * gv.data()[j];
                        dx[r * c + j] += inv / cf * (cf * d - sum_d - hrow[j] * sum_dh);
                    }
                }
            }
            if let Some(dg) = acc(grads, nodes, *gain) {
                for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                    dg[i % c] += gi * h;
                }
            }
            if let Some(db) = acc(grads, nodes, *bias) {
                for (i, gi) in g.iter().enumerate() {
                    db[i % c] += gi;
                }
            }
        }
        Op::Glu(a) => {
            let av = Arc::clone(&nodes[*a].value);
            if let Some(da) = acc(grads, nodes, *a) {
                let c = out.last_dim();
                for r in 0..out.outer_len() {
                    let row = &av.data()[r * 2 * c..(r + 1) * 2 * c];
                    for j in 0..c {
                        let gi = g[r * c + j];
                        let s = sigmoid(row[c + j]);
                        da[r * 2 * c + j] += gi * s;
                        da[r * 2 * c + c + j] += gi * row[j] * s * (1.0 - s);
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            unary(grads, nodes, *a, g, |gi, i| gi * y[i] * (1.0 - y[i]));
        }
        Op::Swish(a) => {
            let xv = Arc::clone(&nodes[*a].value);
            let x = xv.data();
            unary(grads, nodes, *a, g, |gi, i| {
                let s = sigmoid(x[i]);
                gi * (s + x[i] * s * (1.0 - s))
            });
        }
        Op::Relu(a) => {
            let y = out.data();
            unary(grads, nodes, *a, g, |gi, i| if y[i] > 0.0 { gi } else { 0.0 });
        }
        Op::Exp(a) => {
            let y = out.data();
            unary(grads, nodes, *a, g, |gi, i| gi * y[i]);
        }
        Op::Log(a) => {
            let xv = Arc::clone(&nodes[*a].value);
            let x = xv.data();
            unary(grads, nodes, *a, g, |gi, i| gi / x[i]);
        }
        Op::DepthwiseConv1d(x, w) => {
            let xv = Arc::clone(&nodes[*x].value);
            let wv = Arc::clone(&nodes[*w].value);
            let (t_len, c) = (xv.shape()[0], xv.shape()[1]);
            let k = wv.shape()[0];
            let pad = (k - 1) / 2;
            let taps = |t: usize| (0..k).filter_map(move |j| (t + j).checked_sub(pad).filter(|&s| s < t_len).map(|s| (j, s)));
            if let Some(dx) = acc(grads, nodes, *x) {
                for t in 0..t_len {
                    for (j, s) in taps(t) {
                        for ch in 0..c {
                            dx[s * c + ch] += g[t * c + ch] * wv.data()[j * c + ch];
                        }
                    }
                }
            }
            if let Some(dw) = acc(grads, nodes, *w) {
                for t in 0..t_len {
                    for (j, s) in taps(t) {
                        for ch in 0..c {
                            dw[j * c + ch] += g[t * c + ch] * xv.data()[s * c + ch];
                        }
                    }
                }
            }
        }
        Op::IndexRows(a, idx) => {
            if let Some(da) = acc(grads, nodes, *a) {
                let c = out.last_dim();
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::IndexCols(a, idx) => {
            let ac = nodes[*a].value.last_dim();
            if let Some(da) = acc(grads, nodes, *a) {
                let c = idx.len();
                for r in 0..out.outer_len() {
                    for (j, &src) in idx.iter().enumerate() {
                        da[r * ac + src] += g[r * c + j];
                    }
                }
            }
        }
        Op::Pick(a, idx) => {
            let ac = nodes[*a].value.last_dim();
            if let Some(da) = acc(grads, nodes, *a) {
                for (r, &j) in idx.iter().enumerate() {
                    da[r * ac + j] += g[r];
                }
            }
        }
        Op::SliceRows(a, start) => {
            let c = out.last_dim();
            if let Some(da) = acc(grads, nodes, *a) {
                for (i, gi) in g.iter().enumerate() {
                    da[start * c + i] += gi;
                }
            }
        }
        Op::SliceCols(a, start) => {
            let ac = nodes[*a].value.last_dim();
            let c = out.last_dim();
            if let Some(da) = acc(grads, nodes, *a) {
                for r in 0..out.outer_len() {
                    for j in 0..c {
                        da[r * ac + start + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(dp) = acc(grads, nodes, p) {
                    for (d, gi) in dp.iter_mut().zip(&g[offset..offset + n]) {
                        *d += gi;
                    }
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let c = out.last_dim();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.last_dim();
                if let Some(dp) = acc(grads, nodes, p) {
                    for r in 0..out.outer_len() {
                        for j in 0..pc {
                            dp[r * pc + j] += g[r * c + offset + j];
                        }
                    }
                }
                offset += pc;
            }
        }
        Op::Dropout(a, mask) => unary(grads, nodes, *a, g, |gi, i| gi * mask[i]),
    }
}

fn unary(grads: &mut [Option<Vec<f64>>], nodes: &[Node], a: Id, g: &[f64], f: impl Fn(f64, usize) -> f64) {
    if let Some(da) = acc(grads, nodes, a) {
        for (i, (d, &gi)) in da.iter_mut().zip(g).enumerate() {
            *d += f(gi, i);
        }
    }
}

fn scatter_map(target: Option<&mut Vec<f64>>, g: &[f64], map: Option<&[usize]>, f: impl Fn(f64, usize) -> f64) {
    let Some(t) = target else { return };
    match map {
        None => {
            for (i, (d, &gi)) in t.iter_mut().zip(g).enumerate() {
                *d += f(gi, i);
            }
        }
        Some(m) => {
            for (i, &gi) in g.iter().enumerate() {
                t[m[i]] += f(gi, i);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m×n] += a[m×k] · b[k×n]` with arbitrary strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: callers pass slices whose extents match (m, k, n) and the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

fn broadcast_map(input: &[usize], out: &[usize]) -> BroadcastMap {
    if input == out {
        return None;
    }
    let n = out.len();
    let offset = n - input.len();
    // stride of each output axis inside the input (0 where broadcast)
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..n).rev() {
        if i >= offset {
            let d = input[i - offset];
            if d != 1 {
                strides[i] = s;
            }
            s *= d;
        }
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut index = vec![0usize; n];
    for _ in 0..numel {
        map.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..n).rev() {
            index[ax] += 1;
            if index[ax] < out[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Some(map)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary_op(self, f: impl Fn(&Tensor) -> Tensor, op: impl FnOnce(Id) -> Op) -> Var<'t> {
        let v = f(&self.value());
        let rg = self.requires_grad();
        self.tape.push(v, op(self.id), rg)
    }

    fn binary_op(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Id, Id, BroadcastMap, BroadcastMap) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let ma = broadcast_map(a.shape(), &shape);
        let mb = broadcast_map(b.shape(), &shape);
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|i| {
                let x = a.data()[ma.as_ref().map_or(i, |m| m[i])];
                let y = b.data()[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(Tensor::new(shape, data)?, op(self.id, other.id, ma, mb), rg))
    }

    /// Elementwise sum with broadcasting.
    // Shape errors make these fallible, so the operator traits do not fit.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, |x, y| x + y, Op::Add)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with broadcasting.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, |x, y| x * y, Op::Mul)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'t> {
        self.unary_op(|t| t.map(|v| -v), Op::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary_op(|t| t.map(|v| v * c), |a| Op::Scale(a, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary_op(|t| t.map(|v| v + c), Op::AddScalar)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (kb, n) = if trans_b {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}{}",
                a.shape(),
                b.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        gemm(m, k, n, a.data(), (k as isize, 1), b.data(), bs, &mut out);
        let rg = self.tape.needs(&[self.id, other.id]);
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.tape.push(Tensor::new(vec![m, n], out)?, op, rg))
    }

    /// Matrix product `self · other` of 2-D operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// Matrix product with the right operand transposed, `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::Shape("transpose needs a 2-D tensor".into()));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(vec![c, r], data)?, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Reshape(self.id), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        self.unary_op(|t| Tensor::scalar(t.data().iter().sum()), Op::Sum)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Log-softmax over the last axis, computed with a max shift.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let mut t = (*self.value()).clone();
        check_finite(&t, "log_softmax")?;
        let c = t.last_dim();
        for row in t.data_mut().chunks_mut(c) {
            super::tensor::log_softmax_in_place(row);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(t, Op::LogSoftmax(self.id), rg))
    }

    /// Softmax over the last axis; rows that are entirely `-inf` are rejected.
    pub fn softmax(self) -> Result<Var<'t>> {
        let mut t = (*self.value()).clone();
        let c = t.last_dim();
        for row in t.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numeric("softmax row has no finite entry".into()));
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(t, Op::Softmax(self.id), rg))
    }

    /// `ln Σ exp` over the last axis; the axis is removed from the shape.
    pub fn log_sum_exp(self) -> Var<'t> {
        self.unary_op(
            |t| {
                let mut shape = t.shape().to_vec();
                shape.pop();
                let data = t.rows().map(super::tensor::log_sum_exp).collect();
                Tensor::new(shape, data).expect("lse shape")
            },
            Op::LogSumExp,
        )
    }

    /// Elementwise `ln(exp(a) + exp(b))` for same-shaped operands; `-inf` safe.
    pub fn log_add_exp(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "log_add_exp shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| super::tensor::log_add_exp(x, y))
            .collect();
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::LogAddExp(self.id, other.id),
            rg,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        if gain.value().numel() != c || bias.value().numel() != c {
            return Err(Error::Shape(format!("layer_norm parameters must have {c} entries")));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let rows = x.outer_len();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for (r, row) in x.rows().enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.tape.needs(&[self.id, gain.id, bias.id]);
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), out)?, op, rg))
    }

    /// Gated linear unit over the last axis: first half ⊙ sigmoid(second half).
    pub fn glu(self) -> Result<Var<'t>> {
        let x = self.value();
        let c2 = x.last_dim();
        if !c2.is_multiple_of(2) {
            return Err(Error::Shape(format!("glu needs an even last axis, got {c2}")));
        }
        let c = c2 / 2;
        let mut out = Vec::with_capacity(x.numel() / 2);
        for row in x.rows() {
            for j in 0..c {
                out.push(row[j] * sigmoid(row[c + j]));
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, out)?, Op::Glu(self.id), rg))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_op(|t| t.map(sigmoid), Op::Sigmoid)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(self) -> Var<'t> {
        self.unary_op(|t| t.map(|v| v * sigmoid(v)), Op::Swish)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_op(|t| t.map(|v| v.max(0.0)), Op::Relu)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_op(|t| t.map(f64::exp), Op::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary_op(|t| t.map(f64::ln), Op::Log)
    }

    /// Depthwise 1-D convolution along rows of `[T×C]` with a `[K×C]` kernel,
    /// zero "same" padding (`K` odd).
    pub fn depthwise_conv1d(self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernel.value());
        if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::Shape(format!(
                "depthwise_conv1d needs [T×C] and [K×C], got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (t_len, c) = (x.shape()[0], x.shape()[1]);
        let k = w.shape()[0];
        if k % 2 == 0 {
            return Err(Error::Shape(format!("kernel size must be odd, got {k}")));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for j in 0..k {
                let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                for ch in 0..c {
                    out[t * c + ch] += w.data()[j * c + ch] * x.data()[s * c + ch];
                }
            }
        }
        let rg = self.tape.needs(&[self.id, kernel.id]);
        Ok(self.tape.push(
            Tensor::new(vec![t_len, c], out)?,
            Op::DepthwiseConv1d(self.id, kernel.id),
            rg,
        ))
    }

    /// Gathers rows of a 2-D tensor; also serves as embedding lookup.
    pub fn index_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = dims2(&a, "index_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row index {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(a.row(i));
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::IndexRows(self.id, idx.to_vec()),
            rg,
        ))
    }

    /// Gathers columns (last-axis entries) of every row.
    pub fn index_cols(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let c = a.last_dim();
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Shape(format!("column index {bad} out of range for {c} columns")));
        }
        let mut data = Vec::with_capacity(a.outer_len() * idx.len());
        for row in a.rows() {
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = idx.len();
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::IndexCols(self.id, idx.to_vec()), rg))
    }

    /// `out[r] = self[r, idx[r]]` for a 2-D tensor.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = dims2(&a, "pick")?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape(format!(
                "pick needs {r} indices below {c}, got {idx:?}"
            )));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| a.at(i, j)).collect();
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::vector(data), Op::Pick(self.id, idx.to_vec()), rg))
    }

    /// Rows `start..start+len` of a 2-D tensor (or entries of a 1-D one).
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (r, c) = if a.ndim() == 1 { (a.numel(), 1) } else { dims2(&a, "slice_rows")? };
        if start + len > r {
            return Err(Error::Shape(format!("row slice {start}..{} out of {r}", start + len)));
        }
        let data = a.data()[start * c..(start + len) * c].to_vec();
        let shape = if a.ndim() == 1 { vec![len] } else { vec![len, c] };
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::SliceRows(self.id, start), rg))
    }

    /// Last-axis entries `start..start+len` of every row.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let c = a.last_dim();
        if start + len > c {
            return Err(Error::Shape(format!("column slice {start}..{} out of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(a.outer_len() * len);
        for row in a.rows() {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::SliceCols(self.id, start), rg))
    }

    /// Stacks tensors along the first axis. All parts share the trailing shape.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = &values[0].shape()[values[0].ndim().min(1)..];
        if values.iter().any(|v| v.ndim() == 0 || &v.shape()[1..] != tail) {
            return Err(Error::Shape("concat_rows parts disagree on trailing shape".into()));
        }
        let rows: usize = values.iter().map(|v| v.shape()[0]).sum();
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let data = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(Tensor::new(shape, data)?, Op::ConcatRows(ids), rg))
    }

    /// Joins tensors along the last axis. All parts share the leading shape.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].outer_len();
        let lead = &values[0].shape()[..values[0].ndim().saturating_sub(1)];
        if values
            .iter()
            .any(|v| &v.shape()[..v.ndim().saturating_sub(1)] != lead)
        {
            return Err(Error::Shape("concat_cols parts disagree on leading shape".into()));
        }
        let cols: usize = values.iter().map(|v| v.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(cols);
        let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(Tensor::new(shape, data)?, Op::ConcatCols(ids), rg))
    }

    /// Inverted dropout. `draws` holds one uniform draw per element; an
    /// element survives when its draw is at least `rate`.
    pub fn dropout(self, rate: f64, draws: &[f64]) -> Result<Var<'t>> {
        let a = self.value();
        if draws.len() != a.numel() {
            return Err(Error::Shape("dropout needs one draw per element".into()));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = draws.iter().map(|&u| if u >= rate { scale } else { 0.0 }).collect();
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Dropout(self.id, mask),
            rg,
        ))
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape(format!("{what} needs a 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|v| v.is_nan() || v.is_infinite() && *v > 0.0) {
        return Err(Error::Numeric(format!("{what} received a non-finite input")));
    }
    Ok(())
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(i.matmul(v).unwrap().value().data(), &[3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        assert_eq!(r.matmul(v).unwrap().value().data(), &[11.0]);
        assert!(matches!(v.matmul(v), Err(Error::Shape(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = x.mul(x).unwrap().sum();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn log_softmax_symmetry_and_stability() {
        let tape = Tape::new();
        let y = tape.constant(t(&[2], &[0.0, 0.0])).log_softmax().unwrap().value();
        assert!((y.data()[0] - 0.5f64.ln()).abs() < 1e-15);
        let y = tape.constant(t(&[2], &[1000.0, 0.0])).log_softmax().unwrap().value();
        assert!(y.data()[0].abs() < 1e-12);
        assert!((y.data()[1] + 1000.0).abs() < 1e-9);
        assert!(tape.constant(t(&[1], &[f64::NAN])).log_softmax().is_err());
    }

    #[test]
    fn broadcasting_bias_add() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        let bad = tape.leaf(t(&[2], &[0.0; 2]));
        assert!(x.add(bad).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let grads = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn log_add_exp_of_neg_infinity_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[f64::NEG_INFINITY, 0.0]));
        let b = tape.leaf(t(&[2], &[f64::NEG_INFINITY, 0.0]));
        let y = a.log_add_exp(b).unwrap();
        let picked = y.slice_rows(0, 1).unwrap().sum();
        let grads = tape.backward(picked).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0; 4]));
        let y = x.dropout(0.5, &[0.1, 0.6, 0.9, 0.2]).unwrap();
        assert_eq!(y.value().data(), &[0.0, 2.0, 2.0, 0.0]);
    }
}

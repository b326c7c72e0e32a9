//! Reverse-mode automatic differentiation over a linear tape.

use std::ops::Range;
use std::sync::Arc;

use super::mask::Mask;
use super::tensor::{ce_dims, gemm, logsumexp, numel, rope_apply, Tensor};
use super::Scalar;
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
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, nt: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { table: Var, ids: Arc<Vec<usize>> },
    Softmax(Var),
    RmsNorm { x: Var, w: Var, eps: f64 },
    Silu(Var),
    Rope { x: Var, positions: Arc<Vec<usize>>, base: f64 },
    CrossEntropy { logits: Var, targets: Arc<Vec<usize>> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for one forward pass.
///
/// While gradients are disabled (see [`Tape::set_grad_enabled`]) operations
/// still compute values but record no backward rule, and the node range is
/// logged as a stopped segment. Backward never enters those nodes.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    stopped: Vec<Range<usize>>,
    stop_start: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            stopped: Vec::new(),
            stop_start: None,
        }
    }

    /// A tape that never records backward rules; used for inference.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.set_grad_enabled(false);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn set_grad_enabled(&mut self, on: bool) {
        if on == self.grad_enabled {
            return;
        }
        self.grad_enabled = on;
        if on {
            let start = self.stop_start.take().expect("stop segment was opened");
            if start < self.nodes.len() {
                self.stopped.push(start..self.nodes.len());
            }
        } else {
            self.stop_start = Some(self.nodes.len());
        }
    }

    /// Node ranges recorded with gradients disabled.
    pub fn stopped_segments(&self) -> Vec<Range<usize>> {
        let mut segs = self.stopped.clone();
        if let Some(start) = self.stop_start {
            if start < self.nodes.len() {
                segs.push(start..self.nodes.len());
            }
        }
        segs
    }

    /// End of the most recent stopped segment: everything differentiable
    /// after it was recorded with gradients enabled.
    pub fn boundary(&self) -> Option<usize> {
        self.stopped_segments().last().map(|r| r.end)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Count of nodes in `range` that carry a backward rule.
    pub fn differentiable_nodes_in(&self, range: Range<usize>) -> usize {
        self.nodes[range]
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul { a, b, nt: false }, &[a, b]))
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMul { a, b, nt: true }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let v = {
            let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat(&vals, axis)?
        };
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Row lookup into a `[rows, width]` table (embedding).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).gather_rows(ids)?;
        let ids = Arc::new(ids.to_vec());
        Ok(self.push(v, Op::Gather { table, ids }, &[table]))
    }

    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let v = self.value(x).softmax_rows(mask)?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let v = self.value(x).rms_norm(self.value(w), eps)?;
        Ok(self.push(v, Op::RmsNorm { x, w, eps }, &[x, w]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).silu();
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let v = self.value(x).rope(positions, base)?;
        let positions = Arc::new(positions.to_vec());
        Ok(self.push(v, Op::Rope { x, positions, base }, &[x]))
    }

    /// Scalar mean negative log-likelihood.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ce = self.value(logits).cross_entropy(targets)?;
        let targets = Arc::new(targets.to_vec());
        Ok(self.push(
            Tensor::scalar(ce),
            Op::CrossEntropy { logits, targets },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Identity on values; blocks gradient flow into `x`'s history.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.nodes.push(Node {
            value: v,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `silu(x·gate) ⊙ (x·up) · down`
    pub fn swiglu(&mut self, x: Var, gate: Var, up: Var, down: Var) -> Result<Var> {
        let g = self.matmul(x, gate)?;
        let g = self.silu(g);
        let u = self.matmul(x, up)?;
        let h = self.mul(g, u)?;
        self.matmul(h, down)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                for (input, contrib) in self.backward_node(node, &g) {
                    if self.nodes[input.0].requires_grad {
                        accumulate(&mut grads[input.0], contrib);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, nt } => {
                let (sa, sb) = (shp(a), shp(b));
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = if nt { sb[r - 2] } else { sb[r - 1] };
                let batch = numel(&sa[..r - 2]);
                let (av, bv) = (val(a), val(b));
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let asl = &av[bi * m * k..(bi + 1) * m * k];
                    let bsl = &bv[bi * k * n..(bi + 1) * k * n];
                    let das = &mut da[bi * m * k..(bi + 1) * m * k];
                    let dbs = &mut db[bi * k * n..(bi + 1) * k * n];
                    if nt {
                        // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                        gemm(gs, bsl, das, (m, n, k), false, false);
                        gemm(gs, asl, dbs, (n, m, k), true, false);
                    } else {
                        // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                        gemm(gs, bsl, das, (m, n, k), false, true);
                        gemm(asl, gs, dbs, (k, m, n), true, false);
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Mul(a, b) => {
                let da = g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect();
                vec![(a, da), (b, db)]
            }
            &Op::Scale(a, c) => vec![(a, g.iter().map(|&g| g * c).collect())],
            &Op::Reshape(a) => vec![(a, g.to_vec())],
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec())
                    .and_then(|t| t.permute(&inv))
                    .expect("permute grad");
                vec![(*a, gt.into_vec())]
            }
            &Op::Narrow { x, axis, start } => {
                let s = shp(x);
                let len = node.value.shape()[axis];
                let outer = numel(&s[..axis]);
                let inner = numel(&s[axis + 1..]);
                let mut dx = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let dst = o * s[axis] * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(x, dx)]
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer = numel(&out_shape[..axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let chunk = shp(p)[axis] * inner;
                    let mut dp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        dp.extend_from_slice(&g[base..base + chunk]);
                    }
                    offset += chunk;
                    res.push((p, dp));
                }
                res
            }
            Op::Gather { table, ids } => {
                let width = shp(*table)[1];
                let mut dt = vec![T::zero(); val(*table).len()];
                for (row, &id) in ids.iter().enumerate() {
                    for (d, &gv) in dt[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(&g[row * width..(row + 1) * width])
                    {
                        *d = *d + gv;
                    }
                }
                vec![(*table, dt)]
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); y.len()];
                if cols > 0 {
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                }
                vec![(x, dx)]
            }
            &Op::RmsNorm { x, w, eps } => {
                let (xv, wv) = (val(x), val(w));
                let width = wv.len();
                let n = T::of(width as f64);
                let eps = T::of(eps);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); width];
                for ((xr, gr), dr) in xv.chunks(width).zip(g.chunks(width)).zip(dx.chunks_mut(width)) {
                    let ms = xr.iter().map(|&v| v * v).sum::<T>() / n;
                    let inv = (ms + eps).sqrt().recip();
                    let mut dot = T::zero();
                    for j in 0..width {
                        dot = dot + gr[j] * wv[j] * xr[j];
                        dw[j] = dw[j] + gr[j] * xr[j] * inv;
                    }
                    let coef = inv * inv * inv * dot / n;
                    for j in 0..width {
                        dr[j] = inv * gr[j] * wv[j] - xr[j] * coef;
                    }
                }
                vec![(x, dx), (w, dw)]
            }
            &Op::Silu(x) => {
                let dx = val(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = (T::one() + (-v).exp()).recip();
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                vec![(x, dx)]
            }
            Op::Rope { x, positions, base } => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())
                    .and_then(|t| rope_apply(&t, positions, *base, true))
                    .expect("rope grad");
                vec![(*x, gt.into_vec())]
            }
            Op::CrossEntropy { logits, targets } => {
                let lt = &self.nodes[logits.0].value;
                let (n, v) = ce_dims(lt, targets).expect("validated in forward");
                let scale = g[0] / T::of(n as f64);
                let mut dl = Vec::with_capacity(n * v);
                for (row, &t) in lt.data().chunks(v).zip(targets.iter()) {
                    let lse = logsumexp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl.push((p - onehot) * scale);
                    }
                }
                vec![(*logits, dl)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; val(x).len()])],
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
    }
}

/// Result of [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed in.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

use std::sync::Arc;

use super::mask::Mask;
use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor.
///
/// The buffer is reference counted so clones are cheap; mutation goes through
/// [`Tensor::data_mut`], which copies on write when the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim("new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    /// Builds from a slice of `f64`, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| U::of(x.f64())).collect()),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Batched matrix product over the last two axes. Leading axes must match
    /// exactly.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.batched_gemm(other, false, "matmul")
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        self.batched_gemm(other, true, "matmul_nt")
    }

    fn batched_gemm(&self, other: &Self, nt: bool, op: &'static str) -> Result<Self> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(Error::dim(op, a, b));
        }
        let r = a.len();
        let (m, k) = (a[r - 2], a[r - 1]);
        let (kb, n) = if nt {
            (b[r - 1], b[r - 2])
        } else {
            (b[r - 2], b[r - 1])
        };
        if k != kb {
            return Err(Error::dim(op, a, b));
        }
        let batch = numel(&a[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                &self.data[bi * m * k..(bi + 1) * m * k],
                &other.data[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                (m, k, n),
                false,
                nt,
            );
        }
        let mut shape = a[..r - 2].to_vec();
        shape.extend([m, n]);
        Self::new(&shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape, &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &self.shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; r];
        let mut offset = 0usize;
        for _ in 0..total {
            out.push(self.data[offset]);
            for d in (0..r).rev() {
                idx[d] += 1;
                offset += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Self::new(&out_shape, out)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", &[], &[]))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::dim("concat", &first.shape, &[axis]));
        }
        let mut total_axis = 0;
        for p in parts {
            let ok = p.rank() == r
                && p.shape[..axis] == first.shape[..axis]
                && p.shape[axis + 1..] == first.shape[axis + 1..];
            if !ok {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
            total_axis += p.shape[axis];
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Self::new(&shape, out)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::dim("narrow", &self.shape, &[axis, start, len]));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let full = self.shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(&shape, out)
    }

    /// Selects rows of a `[rows, width]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("gather_rows", &self.shape, &[ids.len()]));
        }
        let (rows, width) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::data(format!(
                    "row id {id} is out of range for a table of {rows} rows"
                )));
            }
            out.extend_from_slice(&self.data[id * width..(id + 1) * width]);
        }
        Self::new(&[ids.len(), width], out)
    }

    /// Softmax over the last axis. `mask`, when given, covers the last two
    /// axes and is broadcast over the leading ones; masked entries become
    /// exactly zero and a row with nothing unmasked becomes all zeros.
    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Result<Self> {
        let r = self.rank();
        if r == 0 {
            return Err(Error::dim("softmax_rows", &self.shape, &[]));
        }
        let cols = self.shape[r - 1];
        let rows_per_mask = if r >= 2 { self.shape[r - 2] } else { 1 };
        if let Some(m) = mask {
            if m.rows() != rows_per_mask || m.cols() != cols {
                return Err(Error::dim("softmax_rows", &self.shape, &[m.rows(), m.cols()]));
            }
        }
        let mut out = vec![T::zero(); self.numel()];
        if cols == 0 {
            return Self::new(&self.shape, out);
        }
        for (row, (src, dst)) in self
            .data
            .chunks(cols)
            .zip(out.chunks_mut(cols))
            .enumerate()
        {
            let mrow = row % rows_per_mask;
            let allowed = |c: usize| mask.is_none_or(|m| m.allowed(mrow, c));
            let mut max = T::neg_infinity();
            for (c, &x) in src.iter().enumerate() {
                if allowed(c) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut denom = T::zero();
            for (c, (&x, y)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if allowed(c) {
                    *y = (x - max).exp();
                    denom = denom + *y;
                }
            }
            for y in dst.iter_mut() {
                *y = *y / denom;
            }
        }
        Self::new(&self.shape, out)
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ weight` over the last axis.
    pub fn rms_norm(&self, weight: &Self, eps: f64) -> Result<Self> {
        let width = *self.shape.last().unwrap_or(&0);
        if weight.shape != [width] {
            return Err(Error::dim("rms_norm", &self.shape, &weight.shape));
        }
        let eps = T::of(eps);
        let n = T::of(width as f64);
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data.chunks(width.max(1)) {
            let ms = row.iter().map(|&x| x * x).sum::<T>() / n;
            let inv = (ms + eps).sqrt().recip();
            out.extend(row.iter().zip(weight.data.iter()).map(|(&x, &w)| x * inv * w));
        }
        Self::new(&self.shape, out)
    }

    pub fn silu(&self) -> Self {
        self.map(|x| x / (T::one() + (-x).exp()))
    }

    /// Rotary position embedding on a `[.., seq, heads, head_dim]` tensor.
    /// Consecutive pairs `(2j, 2j+1)` rotate by `pos · base^(-2j/head_dim)`.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Self> {
        rope_apply(self, positions, base, false)
    }

    /// Mean negative log-likelihood of `targets` under `[n, vocab]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<T> {
        let (n, v) = ce_dims(self, targets)?;
        let mut total = 0.0f64;
        for (row, &t) in self.data.chunks(v).zip(targets) {
            total += (logsumexp(row) - row[t]).f64();
        }
        Ok(T::of(total / n as f64))
    }

    /// Row-wise `logsumexp(row) - row[target]`, one entry per row.
    pub fn nll_per_row(&self, targets: &[usize]) -> Result<Vec<f64>> {
        let (_, v) = ce_dims(self, targets)?;
        Ok(self
            .data
            .chunks(v)
            .zip(targets)
            .map(|(row, &t)| (logsumexp(row) - row[t]).f64())
            .collect())
    }
}

pub(crate) fn ce_dims<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
        return Err(Error::dim("cross_entropy", s, &[targets.len()]));
    }
    let v = s[1];
    if let Some((i, &t)) = targets.iter().enumerate().find(|&(_, &t)| t >= v) {
        return Err(Error::data(format!(
            "target {t} at row {i} is outside the vocabulary of {v}"
        )));
    }
    Ok((s[0], v))
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[usize],
    base: f64,
    inverse: bool,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let r = s.len();
    if r < 3 || s[r - 3] != positions.len() || !s[r - 1].is_multiple_of(2) {
        return Err(Error::dim("rope", s, &[positions.len()]));
    }
    let (seq, heads, dim) = (s[r - 3], s[r - 2], s[r - 1]);
    let half = dim / 2;
    // cos/sin table per (position, pair)
    let mut table = Vec::with_capacity(seq * half * 2);
    for &p in positions {
        for j in 0..half {
            let theta = p as f64 * base.powf(-2.0 * j as f64 / dim as f64);
            let (sin, cos) = theta.sin_cos();
            table.push(T::of(cos));
            table.push(T::of(if inverse { -sin } else { sin }));
        }
    }
    let mut out = x.data().to_vec();
    for (block, chunk) in out.chunks_mut(dim).enumerate() {
        let t = (block / heads) % seq;
        let row = &table[t * half * 2..(t + 1) * half * 2];
        for j in 0..half {
            let (cos, sin) = (row[2 * j], row[2 * j + 1]);
            let (a, b) = (chunk[2 * j], chunk[2 * j + 1]);
            chunk[2 * j] = a * cos - b * sin;
            chunk[2 * j + 1] = a * sin + b * cos;
        }
    }
    Tensor::new(s, out)
}

/// `out += op(a) · op(b)` for one `m × k` by `k × n` product. `ta`/`tb` mean
/// the operand is stored transposed (`k × m` / `n × k`).
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    (m, k, n): (usize, usize, usize),
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *o = *o + aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc = acc + x * y;
                    }
                    out[i * n + j] = out[i * n + j] + acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == T::zero() {
                        continue;
                    }
                    for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o = *o + api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc = acc + a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = out[i * n + j] + acc;
                }
            }
        }
    }
}

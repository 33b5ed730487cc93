//! Dense row-major tensors and the eager kernels the autodiff graph is built on.
//!
//! Every tensor owns a contiguous buffer whose length equals the product of
//! its shape. Kernels never reorder reductions, so results are bit-for-bit
//! reproducible for a given input.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor axes must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {} elements but {} were supplied",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
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
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let off = index
            .iter()
            .zip(strides(&self.shape))
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[off]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r
            || perm
                .iter()
                .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &self.shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        let inner = *out_shape.last().unwrap_or(&1);
        let inner_stride = *src_strides.last().unwrap_or(&1);
        let outer = self.numel() / inner.max(1);
        for _ in 0..outer {
            let base: usize = idx[..r.saturating_sub(1)]
                .iter()
                .zip(&src_strides)
                .map(|(i, s)| i * s)
                .sum();
            for j in 0..inner {
                out.push(self.data[base + j * inner_stride]);
            }
            // advance all but the innermost axis
            for ax in (0..r.saturating_sub(1)).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        if r == 0 {
            out = self.data.clone();
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting element-wise arithmetic
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes (right-aligned, 1 or missing axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` when read as `out_shape`; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_flat, a_flat, b_flat)` for every output element in row-major order.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = out_shape.len();
    let n = numel(out_shape);
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let mut o = 0;
    while o < n {
        let mut ba = 0;
        let mut bb = 0;
        for ax in 0..r - 1 {
            ba += idx[ax] * sa[ax];
            bb += idx[ax] * sb[ax];
        }
        for j in 0..inner {
            f(o + j, ba + j * ia, bb + j * ib);
        }
        o += inner;
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        });
    }
    let out_shape =
        broadcast_shape(&a.shape, &b.shape).map_err(|_| Error::shape(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = vec![T::zero(); numel(&out_shape)];
    for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
        data[o] = f(a.data[i], b.data[j])
    });
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        zip_broadcast("add", self, other, |x, y| x + y)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        zip_broadcast("sub", self, other, |x, y| x - y)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        zip_broadcast("mul", self, other, |x, y| x * y)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    /// Expand to `shape` by repeating along broadcast axes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shape(&self.shape, shape)?;
        if out != shape {
            return Err(Error::shape("broadcast_to", &self.shape, shape));
        }
        let sa = broadcast_strides(&self.shape, shape);
        let mut data = vec![T::zero(); numel(shape)];
        for_each_broadcast(shape, &sa, &sa, |o, i, _| data[o] = self.data[i]);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sum-reduce a broadcast result back to `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let out = broadcast_shape(shape, &self.shape)?;
        if out != self.shape {
            return Err(Error::shape("sum_to_shape", &self.shape, shape));
        }
        let st = broadcast_strides(shape, &self.shape);
        let mut data = vec![T::zero(); numel(shape)];
        for_each_broadcast(&self.shape, &st, &st, |o, i, _| data[i] += self.data[o]);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let u = c * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// `c[m×n] += a[m×k] · b[k×n]`, i-k-j order.
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, row-by-row dot products.
pub(crate) fn gemm_nt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Batch geometry of a matmul: `(batch, m, k, n, b_shared)`.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared = lead_b.is_empty();
    if !shared && lead_a != lead_b {
        return Err(err());
    }
    Ok((numel(lead_a), m, k, n, shared))
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// identical, or `other` may be a plain matrix shared by every batch.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (batch, m, k, n, shared) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a = &self.data[bi * m * k..(bi + 1) * m * k];
            let b = if shared {
                &other.data[..]
            } else {
                &other.data[bi * k * n..(bi + 1) * k * n]
            };
            gemm_acc(m, k, n, a, b, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let mut shape = self.shape[..self.rank() - 2].to_vec();
        shape.extend([m, n]);
        Ok(Tensor { shape, data: out })
    }

    /// `x · wᵀ (+ bias)` over the last axis: `x[..., in]`, `w[out, in]`, `bias[out]`.
    pub fn linear(&self, w: &Self, bias: Option<&Self>) -> Result<Self> {
        let fan_in = *self.shape.last().unwrap_or(&0);
        if w.rank() != 2 || w.shape[1] != fan_in || self.rank() == 0 {
            return Err(Error::shape("linear", &self.shape, &w.shape));
        }
        let fan_out = w.shape[0];
        if let Some(b) = bias {
            if b.shape != [fan_out] {
                return Err(Error::shape("linear bias", &w.shape, &b.shape));
            }
        }
        let rows = self.numel() / fan_in;
        let mut out = vec![T::zero(); rows * fan_out];
        gemm_nt_acc(rows, fan_in, fan_out, &self.data, &w.data, &mut out);
        if let Some(b) = bias {
            for row in out.chunks_mut(fan_out) {
                for (o, &bv) in row.iter_mut().zip(&b.data) {
                    *o += bv;
                }
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = fan_out;
        Ok(Tensor { shape, data: out })
    }

    /// Grouped kernel-size-one convolution without bias.
    ///
    /// `x[..., C_in, L]`, `w[C_out, C_in / groups]`. For output channel `i` in
    /// group `g`: `out[..., i, l] = Σ_j w[i, j] · x[..., g·(C_in/groups) + j, l]`.
    pub fn grouped_pointwise_conv(&self, w: &Self, groups: usize) -> Result<Self> {
        let (lead, c_in, len) = conv_dims(&self.shape)?;
        let (c_out, cin_g, cout_g) = conv_weight_dims(c_in, &w.shape, groups)?;
        let mut out = vec![T::zero(); lead * c_out * len];
        for b in 0..lead {
            let xb = &self.data[b * c_in * len..(b + 1) * c_in * len];
            let ob = &mut out[b * c_out * len..(b + 1) * c_out * len];
            for g in 0..groups {
                let wg = &w.data[g * cout_g * cin_g..(g + 1) * cout_g * cin_g];
                let xg = &xb[g * cin_g * len..(g + 1) * cin_g * len];
                let og = &mut ob[g * cout_g * len..(g + 1) * cout_g * len];
                gemm_acc(cout_g, cin_g, len, wg, xg, og);
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = c_out;
        Ok(Tensor { shape, data: out })
    }
}

pub(crate) fn conv_dims(x: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() < 2 {
        return Err(Error::shape("grouped_pointwise_conv", x, &[]));
    }
    let r = x.len();
    Ok((numel(&x[..r - 2]), x[r - 2], x[r - 1]))
}

/// Returns `(C_out, C_in/groups, C_out/groups)` after validating divisibility.
pub(crate) fn conv_weight_dims(
    c_in: usize,
    w: &[usize],
    groups: usize,
) -> Result<(usize, usize, usize)> {
    if w.len() != 2 {
        return Err(Error::shape("grouped_pointwise_conv weight", &[c_in], w));
    }
    let c_out = w[0];
    if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "grouped conv: C_in={c_in} and C_out={c_out} must both be divisible by groups={groups}"
        )));
    }
    if w[1] != c_in / groups {
        return Err(Error::shape("grouped_pointwise_conv", &[c_in, groups], w));
    }
    Ok((c_out, c_in / groups, c_out / groups))
}

// ---------------------------------------------------------------------------
// Reductions and softmax
// ---------------------------------------------------------------------------

/// `(outer, axis_len, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Tensor<T> {
    /// Numerically stable softmax along `axis` (max subtracted before exponentiation).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(self.data[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (self.data[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Arithmetic mean over `axes`. With `keepdim` the reduced axes stay as
    /// length one, otherwise they are removed.
    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Self> {
        let (kept, count) = reduce_plan(&self.shape, axes)?;
        let mut s = self.sum_to_shape(&kept)?;
        let inv = T::one() / T::lit(count as f64);
        s.data.iter_mut().for_each(|v| *v *= inv);
        if !keepdim {
            s.shape = squeeze_axes(&kept, axes);
        }
        Ok(s)
    }
}

/// Validates reduction axes; returns the keep-dim shape and element count per output.
pub(crate) fn reduce_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, usize)> {
    if axes.is_empty() {
        return Err(Error::Numeric("mean over an empty axis list".into()));
    }
    let mut kept = shape.to_vec();
    let mut count = 1;
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() || axes[..i].contains(&a) {
            return Err(Error::Contract(format!(
                "reduction axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        count *= shape[a];
        kept[a] = 1;
    }
    Ok((kept, count))
}

pub(crate) fn squeeze_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

// ---------------------------------------------------------------------------
// Concatenation and slicing
// ---------------------------------------------------------------------------

impl<T: Scalar> Tensor<T> {
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::shape("concat", &first.shape, &[axis]));
        }
        for p in parts {
            let ok = p.rank() == r && (0..r).all(|i| i == axis || p.shape[i] == first.shape[i]);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape("narrow", &self.shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let b = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::eye(2).matmul(&b).unwrap(), b);
        let z = Tensor::<f64>::zeros(&[2, 3])
            .matmul(&t(&[3, 2], &[1., 2., 3., 4., 5., 6.]))
            .unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 2]));
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let c = a.matmul(&t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        assert_eq!(c.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let e = Tensor::<f64>::zeros(&[2, 3])
            .matmul(&Tensor::zeros(&[2, 3]))
            .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[3], &[0., 0., 0.]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-50.0, 0.0, 3.7, 1e3] {
            let s = t(&[2], &[c, c + 2f64.ln()]).softmax(0).unwrap();
            assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        // direct evaluation: e^k / (e + e^2 + e^3)
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = [1f64, 2., 3.].iter().map(|v| v.exp() / z).collect();
        let s = t(&[3], &[1., 2., 3.]).softmax(0).unwrap();
        for (a, b) in s.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in s.data().iter().zip(&[0.09003057, 0.24472847, 0.66524096]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rejects_nan_and_bad_axis() {
        assert!(matches!(
            t(&[2], &[f64::NAN, 0.]).softmax(0),
            Err(Error::Numeric(_))
        ));
        assert!(t(&[2], &[0., 0.]).softmax(1).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[2, 2], &[0., 5., 0., 5.]);
        let s = x.softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn broadcast_add_matches_tiling() {
        let a = t(&[2], &[1., 2.]);
        let b = t(&[2, 1], &[10., 20.]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[11., 12., 21., 22.]);
        assert!(t(&[3], &[1., 2., 3.]).add(&t(&[2], &[1., 2.])).is_err());
    }

    #[test]
    fn mul_by_ones_and_zeros() {
        let x = t(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]);
        assert_eq!(x.mul(&Tensor::ones(&[2, 3])).unwrap(), x);
        assert_eq!(x.mul(&Tensor::zeros(&[3])).unwrap(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn mean_examples() {
        let c = Tensor::<f64>::full(&[3, 4], 2.5);
        assert_eq!(c.mean(&[0, 1], false).unwrap().item(), 2.5);
        let x = t(&[1, 3], &[1., 2., 3.]);
        assert_eq!(x.mean(&[0], false).unwrap(), t(&[3], &[1., 2., 3.]));
        let m = t(&[2, 2], &[1., 2., 3., 4.]).mean(&[0], false).unwrap();
        assert_eq!(m, t(&[2], &[2., 3.]));
        assert!(matches!(x.mean(&[], false), Err(Error::Numeric(_))));
        assert!(x.mean(&[0, 0], false).is_err());
    }

    #[test]
    fn grouped_conv_examples() {
        // identity coefficients per group
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.5 - 1.0);
        let w = Tensor::from_fn(&[4, 2], |i| if i % 2 == (i / 2) % 2 { 1.0 } else { 0.0 });
        assert_eq!(x.grouped_pointwise_conv(&w, 2).unwrap(), x);
        // all-ones row sums channels
        let ones = Tensor::ones(&[1, 4]);
        let s = x.grouped_pointwise_conv(&ones, 1).unwrap();
        for l in 0..3 {
            let expect: f64 = (0..4).map(|c| x.at(&[c, l])).sum();
            assert_eq!(s.at(&[0, l]), expect);
        }
        assert!(matches!(
            x.grouped_pointwise_conv(&Tensor::ones(&[3, 2]), 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn concat_and_narrow() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        assert_eq!(c.narrow(1, 0, 1).unwrap(), a);
        assert_eq!(c.narrow(1, 1, 2).unwrap(), b);
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    /// Naive oracle: out[b, g*cout_g + i, l] = Σ_j w[g*cout_g + i, j] x[b, g*cin_g + j, l]
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, groups: usize) -> Vec<f64> {
        let (c_in, len) = (x.shape()[1], x.shape()[2]);
        let c_out = w.shape()[0];
        let (cin_g, cout_g) = (c_in / groups, c_out / groups);
        let mut out = Vec::new();
        for b in 0..x.shape()[0] {
            for o in 0..c_out {
                let g = o / cout_g;
                for l in 0..len {
                    let mut s = 0.0;
                    for j in 0..cin_g {
                        s += w.at(&[o, j]) * x.at(&[b, g * cin_g + j, l]);
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn reshape_round_trip_is_identity(d0 in 1usize..5, d1 in 1usize..5, d2 in 1usize..5) {
            let x = Tensor::<f64>::from_fn(&[d0, d1, d2], |i| (i as f64).sin());
            let y = x.reshape(&[d0 * d1, d2]).unwrap().reshape(&[d0, d1, d2]).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn grouped_conv_equals_per_group_products(
            groups in 1usize..4, cin_g in 1usize..3, cout_g in 1usize..3,
            len in 1usize..6, batch in 1usize..3, seed in any::<u64>(),
        ) {
            prop_assume!(groups * cin_g <= 8 && groups * cout_g <= 8);
            let mut rng = crate::rng::Rng::seed(seed);
            let x = rng.normal_tensor::<f64>(&[batch, groups * cin_g, len], 1.0);
            let w = rng.normal_tensor::<f64>(&[groups * cout_g, cin_g], 1.0);
            let y = x.grouped_pointwise_conv(&w, groups).unwrap();
            let expect = conv_oracle(&x, &w, groups);
            for (a, b) in y.data().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
            let n = vals.len();
            let s = Tensor::new(&[n], vals.clone()).unwrap().softmax(0).unwrap();
            prop_assert!((s.sum_all() - 1.0).abs() < 1e-6);
            prop_assert!(s.all_finite());
            prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn softmax_shift_invariant(vals in proptest::collection::vec(-30f64..30.0, 1..10), c in -100f64..100.0) {
            let n = vals.len();
            let x = Tensor::new(&[n], vals).unwrap();
            let a = x.softmax(0).unwrap();
            let b = x.map(|v| v + c).softmax(0).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }
}

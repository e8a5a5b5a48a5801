//! Dense row-major tensors and the forward kernels shared by the tape and by
//! the inference-only code paths.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    Float
    + FloatConst
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Checks that `rhs` either equals `self`'s shape or is a suffix of it
    /// (broadcast along leading axes). Returns the broadcast repeat count.
    pub(crate) fn broadcast_count(&self, rhs: &Tensor<T>, op: &'static str) -> Result<usize> {
        let (ls, rs) = (&self.shape, &rhs.shape);
        if rs.len() <= ls.len() && ls[ls.len() - rs.len()..] == rs[..] {
            Ok(self.data.len() / rhs.data.len().max(1))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: ls.clone(),
                rhs: rs.clone(),
            })
        }
    }

    pub(crate) fn zip_broadcast(
        &self,
        rhs: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        self.broadcast_count(rhs, op)?;
        let m = rhs.data.len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, rhs.data[i % m]))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Sums `self` (shaped like a broadcast result) down to `shape`, a suffix of its shape.
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Self {
        if shape == self.shape.as_slice() {
            return self.clone();
        }
        let m: usize = shape.iter().product();
        let mut data = vec![T::zero(); m];
        for (i, &v) in self.data.iter().enumerate() {
            data[i % m] += v;
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Matrix product over the last two axes. `rhs` is either rank 2 (shared by
    /// every batch entry) or has the same leading batch extents as `self`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        let (batch, m, k) = self.matmul_dims()?;
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        };
        if rhs.rank() < 2 {
            return Err(mismatch());
        }
        let (rb, rk, n) = rhs.matmul_dims()?;
        let shared = rhs.rank() == 2;
        if rk != k || (!shared && (rb != batch || rhs.shape[..rhs.rank() - 2] != self.shape[..self.rank() - 2])) {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); batch * m * n];
        for b in 0..batch {
            let a = &self.data[b * m * k..(b + 1) * m * k];
            let bm = if shared {
                &rhs.data[..]
            } else {
                &rhs.data[b * k * n..(b + 1) * k * n]
            };
            let o = &mut out[b * m * n..(b + 1) * m * n];
            gemm_nn(a, bm, o, m, k, n);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor { shape, data: out })
    }

    pub(crate) fn matmul_dims(&self) -> Result<(usize, usize, usize)> {
        if self.rank() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let r = self.rank();
        let batch = self.shape[..r - 2].iter().product();
        Ok((batch, self.shape[r - 2], self.shape[r - 1]))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "softmax")?;
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(out[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= s;
                }
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
        .check_finite("softmax")
    }

    /// Normalizes to zero mean and unit variance along `axis`; also returns the
    /// per-slice reciprocal standard deviations.
    pub fn layernorm(&self, axis: usize, eps: T) -> Result<(Self, Vec<T>)> {
        self.check_axis(axis, "layernorm")?;
        let (outer, n, inner) = axis_split(&self.shape, axis);
        let nf = T::of(n as f64);
        let mut out = self.data.clone();
        let mut rstds = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mean = T::zero();
                for j in 0..n {
                    mean += out[base + j * inner];
                }
                mean /= nf;
                let mut var = T::zero();
                for j in 0..n {
                    let d = out[base + j * inner] - mean;
                    var += d * d;
                }
                var /= nf;
                let rstd = (var + eps).sqrt().recip();
                for j in 0..n {
                    let v = &mut out[base + j * inner];
                    *v = (*v - mean) * rstd;
                }
                rstds.push(rstd);
            }
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: out,
        }
        .check_finite("layernorm")?;
        Ok((t, rstds))
    }

    /// Sum along `axis`, or over everything (yielding a scalar) when `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Self> {
        match axis {
            None => {
                let mut s = T::zero();
                for &v in &self.data {
                    s += v;
                }
                Ok(Tensor::scalar(s))
            }
            Some(axis) => {
                self.check_axis(axis, "sum")?;
                let (outer, n, inner) = axis_split(&self.shape, axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += self.data[(o * n + j) * inner + i];
                        }
                    }
                }
                let mut shape = self.shape.clone();
                shape.remove(axis);
                Ok(Tensor { shape, data: out })
            }
        }
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Self> {
        let n = match axis {
            None => self.data.len(),
            Some(a) => {
                self.check_axis(a, "mean")?;
                self.shape[a]
            }
        };
        let s = self.sum(axis)?;
        let inv = T::one() / T::of(n as f64);
        Ok(s.map(|v| v * inv))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        self.check_axis(a, "transpose")?;
        self.check_axis(b, "transpose")?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        Ok(self.permute(&perm))
    }

    fn permute(&self, perm: &[usize]) -> Self {
        let r = self.rank();
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut src_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            src_strides[i] = src_strides[i + 1] * self.shape[i + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; r];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor { shape, data }
    }

    /// Selects entries along `axis`; indices may repeat.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        self.check_axis(axis, "gather")?;
        let (outer, n, inner) = axis_split(&self.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for axis extent {n}"
            )));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let s = (o * n + j) * inner;
                data.extend_from_slice(&self.data[s..s + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// 2-D convolution on channel-last input `[H, W, Cin]` with weights
    /// `[k, k, Cin, Cout]`, zero padding.
    pub fn conv2d(&self, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let g = ConvGeom::new(self, w, stride, pad)?;
        let mut out = vec![T::zero(); g.ho * g.wo * g.co];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = &mut out[(oy * g.wo + ox) * g.co..(oy * g.wo + ox + 1) * g.co];
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let xin = &self.data[(iy * g.w + ix) * g.ci..(iy * g.w + ix + 1) * g.ci];
                        let wk = &w.data[(ky * g.k + kx) * g.ci * g.co..];
                        for (c, &xv) in xin.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let row = &wk[c * g.co..(c + 1) * g.co];
                            for (ov, &wv) in o.iter_mut().zip(row) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![g.ho, g.wo, g.co],
            data: out,
        })
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis < self.rank() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{op}: axis {axis} out of range for rank {}",
                self.rank()
            )))
        }
    }
}

pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub(crate) fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        };
        if x.rank() != 3 || w.rank() != 4 || w.shape[0] != w.shape[1] || w.shape[2] != x.shape[2] {
            return Err(mismatch());
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (h, wd, ci) = (x.shape[0], x.shape[1], x.shape[2]);
        let (k, co) = (w.shape[0], w.shape[3]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch());
        }
        Ok(ConvGeom {
            h,
            w: wd,
            ci,
            co,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    #[inline]
    pub(crate) fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = o * self.stride + kk;
        if p < self.pad || p - self.pad >= extent {
            None
        } else {
            Some(p - self.pad)
        }
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += aᵀ · b` for `a: m×k`, `b: m×n` (out is `k×n`).
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

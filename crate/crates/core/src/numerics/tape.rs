//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Nodes are created in evaluation order, so the tape is always
//! topologically sorted and `backward` is a single reverse sweep.

use super::tensor::{axis_split, gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, ConvGeom, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    Abs(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, axis: usize, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Transpose(Var, usize, usize),
    Reshape(Var),
    Gather { x: Var, axis: usize, indices: Vec<usize> },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation tape (one per forward pass).
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`]; absent for nodes that do not require grad.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, inputs: &[Var]) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Untracked results keep no backward record.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// Elementwise sum; `b` may be broadcast along leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_broadcast(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_broadcast(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_broadcast(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale", &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), "add_scalar", &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), "exp", &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a), "log", &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), "relu", &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), "gelu", &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a), "sqrt", &[a])
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        self.clamp(a, min, f64::INFINITY)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), "clamp", &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), "abs", &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).softmax(axis)?;
        self.push(v, Op::Softmax(a, axis), "softmax", &[a])
    }

    pub fn layernorm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let (v, rstd) = self.value(a).layernorm(axis, T::of(eps))?;
        self.push(v, Op::LayerNorm { x: a, axis, rstd }, "layernorm", &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = self.value(x).conv2d(self.value(w), stride, pad)?;
        self.push(v, Op::Conv2d { x, w, stride, pad }, "conv2d", &[x, w])
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let v = self.value(a).transpose(d0, d1)?;
        self.push(v, Op::Transpose(a, d0, d1), "transpose", &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape", &[a])
    }

    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).gather(axis, indices)?;
        self.push(
            v,
            Op::Gather {
                x: a,
                axis,
                indices: indices.to_vec(),
            },
            "gather",
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let v = self.value(a).sum(axis)?;
        self.push(v, Op::Sum(a, axis), "sum", &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let v = self.value(a).mean(axis)?;
        self.push(v, Op::Mean(a, axis), "mean", &[a])
    }

    /// Accumulates d(root)/d(node) for every node that requires grad.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (input, cg) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(cg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |a: Var, f: &dyn Fn(usize) -> T| -> Vec<(Var, Tensor<T>)> {
            let data = (0..g.len()).map(|i| g.data()[i] * f(i)).collect();
            vec![(a, Tensor::new(g.shape().to_vec(), data).expect("same shape"))]
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let mut out = vec![(*a, g.clone())];
                if needs(*b) {
                    out.push((*b, g.reduce_to(val(*b).shape())));
                }
                out
            }
            Op::Sub(a, b) => {
                let mut out = vec![(*a, g.clone())];
                if needs(*b) {
                    out.push((*b, g.map(|v| -v).reduce_to(val(*b).shape())));
                }
                out
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, g.zip_broadcast(bv, "mul", |x, y| x * y)?));
                }
                if needs(*b) {
                    let ga = g.zip_broadcast(av, "mul", |x, y| x * y)?;
                    out.push((*b, ga.reduce_to(bv.shape())));
                }
                out
            }
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, g.map(|v| v * s))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Exp(a) => elementwise(*a, &|i| y.data()[i]),
            Op::Log(a) => {
                let x = val(*a);
                elementwise(*a, &|i| x.data()[i].recip())
            }
            Op::Relu(a) => {
                let x = val(*a);
                elementwise(*a, &|i| if x.data()[i] > T::zero() { T::one() } else { T::zero() })
            }
            Op::Gelu(a) => {
                let x = val(*a);
                elementwise(*a, &|i| gelu_grad(x.data()[i]))
            }
            Op::Sqrt(a) => elementwise(*a, &|i| T::of(0.5) / y.data()[i]),
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                let (lo, hi) = (*lo, *hi);
                elementwise(*a, &|i| {
                    let v = x.data()[i];
                    if v > lo && v < hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Abs(a) => {
                let x = val(*a);
                elementwise(*a, &|i| x.data()[i].signum())
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            let k = base + j * inner;
                            dot += g.data()[k] * y.data()[k];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            dx[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::LayerNorm { x, axis, rstd } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let r = rstd[o * inner + i];
                        let (mut mg, mut mgy) = (T::zero(), T::zero());
                        for j in 0..n {
                            let k = base + j * inner;
                            mg += g.data()[k];
                            mgy += g.data()[k] * y.data()[k];
                        }
                        mg /= nf;
                        mgy /= nf;
                        for j in 0..n {
                            let k = base + j * inner;
                            dx[k] = r * (g.data()[k] - mg - y.data()[k] * mgy);
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = av.matmul_dims()?;
                let n = bv.shape()[bv.rank() - 1];
                let shared = bv.rank() == 2;
                let mut out = Vec::new();
                if needs(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        let bm = if shared { bv.data() } else { &bv.data()[bi * k * n..(bi + 1) * k * n] };
                        gemm_nt(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            bm,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        let target = if shared {
                            &mut db[..]
                        } else {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        };
                        gemm_tn(
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            target,
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
                out
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let geo = ConvGeom::new(xv, wv, *stride, *pad)?;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let (ci, co, k) = (geo.ci, geo.co, geo.k);
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        let go = &g.data()[(oy * geo.wo + ox) * co..(oy * geo.wo + ox + 1) * co];
                        for ky in 0..k {
                            let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                                let xoff = (iy * geo.w + ix) * ci;
                                let woff = (ky * k + kx) * ci * co;
                                for c in 0..ci {
                                    let wrow = &wv.data()[woff + c * co..woff + (c + 1) * co];
                                    let mut s = T::zero();
                                    for (&gv, &wv) in go.iter().zip(wrow) {
                                        s += gv * wv;
                                    }
                                    dx[xoff + c] += s;
                                    let xval = xv.data()[xoff + c];
                                    if xval != T::zero() {
                                        let dwrow = &mut dw[woff + c * co..woff + (c + 1) * co];
                                        for (d, &gv) in dwrow.iter_mut().zip(go) {
                                            *d += xval * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), dx)?),
                    (*w, Tensor::new(wv.shape().to_vec(), dw)?),
                ]
            }
            Op::Transpose(a, d0, d1) => vec![(*a, g.transpose(*d0, *d1)?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Gather { x, axis, indices } => {
                let xv = val(*x);
                let (outer, n, inner) = axis_split(xv.shape(), *axis);
                let mut dx = vec![T::zero(); xv.len()];
                let m = indices.len();
                for o in 0..outer {
                    for (pos, &j) in indices.iter().enumerate() {
                        let src = (o * m + pos) * inner;
                        let dst = (o * n + j) * inner;
                        for t in 0..inner {
                            dx[dst + t] += g.data()[src + t];
                        }
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let xv = val(*a);
                let is_mean = matches!(node.op, Op::Mean(..));
                let mut dx = vec![T::zero(); xv.len()];
                match axis {
                    None => {
                        let s = if is_mean { g.item() / T::of(xv.len() as f64) } else { g.item() };
                        dx.iter_mut().for_each(|d| *d = s);
                    }
                    Some(ax) => {
                        let (outer, n, inner) = axis_split(xv.shape(), *ax);
                        let scale = if is_mean { T::one() / T::of(n as f64) } else { T::one() };
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + j) * inner + i] = g.data()[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                vec![(*a, Tensor::new(xv.shape().to_vec(), dx)?)]
            }
        })
    }
}

/// Convenience for code paths that never need gradients.
pub(crate) fn plain_matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_nt(a, b, &mut out, m, k, n);
    out
}

#[allow(dead_code)]
pub(crate) fn plain_matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a, b, &mut out, m, k, n);
    out
}

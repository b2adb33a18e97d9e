//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] records every operation as a node; [`Var`] is a cheap handle
//! into it. Nodes are appended in evaluation order, so the reverse pass walks
//! indices downwards. A node only carries a backward rule when some ancestor
//! needs a gradient, which keeps frozen sub-networks cheap.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Float, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param { store: u64, id: ParamId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalarVar(Var, Var),
    AddScalarVar(Var, Var),
    AddChannelBias(Var, Var),
    AddPerSampleChannel(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, T, T),
    LogSigmoid(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    UpConv { x: Var, w: Var, b: Option<Var>, sh: usize, sw: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat(Vec<Var>),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    MulConst(Var, Arc<Tensor<T>>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    param_cache: RefCell<BTreeMap<(u64, ParamId), Var>>,
    detached: RefCell<BTreeSet<u64>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every tracked parameter belonging to `store`, in id order.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter(|(uid, _, _)| *uid == store.uid())
            .filter_map(|&(_, id, node)| self.grads[node].as_ref().map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output columns `[lo, hi)` whose input column `ow * stride + kj - pad` lies inside `0..w`.
fn valid_cols(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride).min(wo);
    let hi = if w + pad > kj { (w + pad - kj).div_ceil(stride).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let l = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                    line[..lo].iter_mut().for_each(|v| *v = T::zero());
                    line[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let first = lo * stride + kj - pad;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &sv) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
                                *v = sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let l = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                    if lo >= hi {
                        continue;
                    }
                    let first = (ci * h + ih as usize) * w + lo * stride + kj - pad;
                    let line = &src[oh * wo + lo..oh * wo + hi];
                    for (d, &g) in dx[first..].iter_mut().step_by(stride).zip(line) {
                        *d += g;
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_cache: RefCell::new(BTreeMap::new()),
            detached: RefCell::new(BTreeSet::new()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op: if needs_grad { op } else { Op::Leaf }, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is recorded (inputs of finite-difference checks).
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Treat every parameter of `store` as a constant in this graph.
    pub fn detach_store(&self, store: &ParamStore<T>) {
        self.detached.borrow_mut().insert(store.uid());
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.param_cache.borrow().get(&key) {
            return v;
        }
        let track = store.is_trainable(id) && !self.detached.borrow().contains(&store.uid());
        let value = store.shared(id);
        let v = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value,
                op: if track { Op::Param { store: store.uid(), id } } else { Op::Leaf },
                needs_grad: track,
            });
            Var(nodes.len() - 1)
        };
        self.param_cache.borrow_mut().insert(key, v);
        v
    }

    fn binary_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        va.zip_map(&vb, f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same(a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::of_f64(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), self.needs(a))
    }

    fn scalar_of(&self, s: Var) -> Result<T> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(shape_err(format!("expected scalar, got {:?}", sv.shape())));
        }
        Ok(sv.data()[0])
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of(s)?;
        let v = self.value(x).map(|a| a * k);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(v, Op::MulScalarVar(x, s), ng))
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of(s)?;
        let v = self.value(x).map(|a| a + k);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(v, Op::AddScalarVar(x, s), ng))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let shape = xv.shape();
        if shape.len() < 2 || bv.numel() != shape[1] {
            return Err(shape_err(format!("bias {:?} for input {:?}", bv.shape(), shape)));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner = xv.numel() / (n * c);
        let mut out = (*xv).clone();
        for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bias = bv.data()[chunk_idx % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddChannelBias(x, b), ng))
    }

    /// `x[n, c, h, w] + e[n, c]`, broadcast over space.
    pub fn add_per_sample_channel(&self, x: Var, e: Var) -> Result<Var> {
        let xv = self.value(x);
        let ev = self.value(e);
        let (n, c, h, w) = xv.dims4()?;
        if ev.shape() != [n, c] {
            return Err(shape_err(format!("embedding {:?} for input {:?}", ev.shape(), xv.shape())));
        }
        let mut out = (*xv).clone();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let add = ev.data()[i];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let ng = self.needs(x) || self.needs(e);
        Ok(self.push(out, Op::AddPerSampleChannel(x, e), ng))
    }

    pub fn relu(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), self.needs(x))
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = T::of_f64(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        self.push(v, Op::LeakyRelu(x, s), self.needs(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x), self.needs(x))
    }

    pub fn square(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.push(v, Op::Square(x), self.needs(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.push(v, Op::Abs(x), self.needs(x))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(v, Op::Clamp(x, lo, hi), self.needs(x))
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.min(T::zero()) - (-a.abs()).exp().ln_1p());
        self.push(v, Op::LogSigmoid(x), self.needs(x))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// 2-d convolution, square kernel, NCHW, weight `[out, in, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4()?;
        let (o, ci, k, k2) = wv.dims4()?;
        if ci != c || k != k2 {
            return Err(shape_err(format!("conv2d weight {:?} for input {:?}", wv.shape(), xv.shape())));
        }
        let (ho, wo) = match (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err(format!("conv2d kernel {k} too large for {h}x{wd}"))),
        };
        let l = ho * wo;
        let ckk = c * k * k;
        let mut out = vec![T::zero(); n * o * l];
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * l] };
        for s in 0..n {
            let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
            let rhs: &[T] = if direct {
                xs
            } else {
                im2col(xs, c, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            gemm(o, ckk, l, wv.data(), false, rhs, false, &mut out[s * o * l..(s + 1) * o * l], false);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != o {
                return Err(shape_err(format!("conv2d bias {:?} for {o} outputs", bv.shape())));
            }
            for (i, chunk) in out.chunks_mut(l).enumerate() {
                let bias = bv.data()[i % o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// Non-overlapping transposed convolution (kernel == stride per axis),
    /// weight `[in, out, sh, sw]`. Upsamples height by `sh` and width by `sw`.
    pub fn up_conv(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4()?;
        let (ci, o, sh, sw) = wv.dims4()?;
        if ci != c {
            return Err(shape_err(format!("up_conv weight {:?} for input {:?}", wv.shape(), xv.shape())));
        }
        let hw = h * wd;
        let osw = o * sh * sw;
        let (ho, wo) = (h * sh, wd * sw);
        let mut tmp = vec![T::zero(); osw * hw];
        let mut out = vec![T::zero(); n * o * ho * wo];
        for s in 0..n {
            let xs = &xv.data()[s * c * hw..(s + 1) * c * hw];
            gemm(osw, c, hw, wv.data(), true, xs, false, &mut tmp, false);
            let os = &mut out[s * o * ho * wo..(s + 1) * o * ho * wo];
            for oc in 0..o {
                for a in 0..sh {
                    for bb in 0..sw {
                        let row = &tmp[((oc * sh + a) * sw + bb) * hw..][..hw];
                        for i in 0..h {
                            for j in 0..wd {
                                os[(oc * ho + i * sh + a) * wo + j * sw + bb] = row[i * wd + j];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != o {
                return Err(shape_err(format!("up_conv bias {:?} for {o} outputs", bv.shape())));
            }
            for (i, chunk) in out.chunks_mut(ho * wo).enumerate() {
                let bias = bv.data()[i % o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::UpConv { x, w, b, sh, sw }, ng))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in raster order.
    pub fn max_pool2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("max_pool2 needs even dims, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let cands = [(2 * i) * w + 2 * j, (2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1];
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    let oi = plane * ho * wo + i * wo + j;
                    out[oi] = src[best];
                    argmax[oi] = best as u32;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&[n, c, ho, wo], out)?, Op::MaxPool2 { x, argmax }, ng))
    }

    /// `x[n, in] @ w[out, in]^T + b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, fin) = xv.dims2()?;
        let (fout, win) = wv.dims2()?;
        if win != fin {
            return Err(shape_err(format!("linear weight {:?} for input {:?}", wv.shape(), xv.shape())));
        }
        let mut out = vec![T::zero(); n * fout];
        gemm(n, fin, fout, xv.data(), false, wv.data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != fout {
                return Err(shape_err(format!("linear bias {:?} for {fout} outputs", bv.shape())));
            }
            for row in out.chunks_mut(fout) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, ng))
    }

    /// Concatenate along axis 1 (channels). All other axes must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let s0 = first.shape();
        if s0.len() < 2 {
            return Err(shape_err("concat needs rank >= 2"));
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut total_c = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != s0.len() || s[0] != n || s[2..] != s0[2..] {
                return Err(shape_err(format!("concat {:?} with {:?}", s0, s)));
            }
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for s in 0..n {
            for v in &vals {
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[s * c * inner..(s + 1) * c * inner]);
            }
        }
        let mut shape = s0.to_vec();
        shape[1] = total_c;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), ng))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), self.needs(x)))
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / T::of_f64(xv.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), self.needs(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.needs(x))
    }

    /// Elementwise product with a fixed tensor (dropout masks, weights).
    pub fn mul_const(&self, x: Var, c: Tensor<T>) -> Result<Var> {
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(v, Op::MulConst(x, Arc::new(c)), self.needs(x)))
    }

    /// Mean squared difference of two same-shaped nodes.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.mean(self.square(d)))
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        fn acc<T: Float>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, g: Tensor<T>) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
            let need = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf | Op::Param { .. } => unreachable!(),
                Op::Add(a, b) => {
                    if need(*b) {
                        acc(&mut grads, &nodes, *b, g.clone());
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    if need(*b) {
                        acc(&mut grads, &nodes, *b, g.map(|v| -v));
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, &nodes, *a, g.zip_map(val(*b), |x, y| x * y)?);
                    }
                    if need(*b) {
                        acc(&mut grads, &nodes, *b, g.zip_map(val(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, &nodes, *a, g.map(|v| v * s));
                }
                Op::MulScalarVar(x, s) => {
                    let k = val(*s).data()[0];
                    if need(*s) {
                        let d: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                        acc(&mut grads, &nodes, *s, Tensor::new(val(*s).shape(), vec![d])?);
                    }
                    if need(*x) {
                        acc(&mut grads, &nodes, *x, g.map(|v| v * k));
                    }
                }
                Op::AddScalarVar(x, s) => {
                    if need(*s) {
                        acc(&mut grads, &nodes, *s, Tensor::new(val(*s).shape(), vec![g.sum()])?);
                    }
                    acc(&mut grads, &nodes, *x, g);
                }
                Op::AddChannelBias(x, b) => {
                    if need(*b) {
                        let shape = val(*x).shape();
                        let (n, c) = (shape[0], shape[1]);
                        let inner = g.numel() / (n * c);
                        let mut db = vec![T::zero(); c];
                        for (idx, chunk) in g.data().chunks(inner).enumerate() {
                            db[idx % c] += chunk.iter().copied().sum();
                        }
                        acc(&mut grads, &nodes, *b, Tensor::new(val(*b).shape(), db)?);
                    }
                    acc(&mut grads, &nodes, *x, g);
                }
                Op::AddPerSampleChannel(x, e) => {
                    if need(*e) {
                        let (_, _, h, w) = val(*x).dims4()?;
                        let de: Vec<T> = g.data().chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                        acc(&mut grads, &nodes, *e, Tensor::new(val(*e).shape(), de)?);
                    }
                    acc(&mut grads, &nodes, *x, g);
                }
                Op::Relu(x) => {
                    let d = g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                    acc(&mut grads, &nodes, *x, d);
                }
                Op::LeakyRelu(x, s) => {
                    let s = *s;
                    let d = g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { gv * s })?;
                    acc(&mut grads, &nodes, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (T::one() - y * y))?;
                    acc(&mut grads, &nodes, *x, d);
                }
                Op::Square(x) => {
                    let two = T::of_f64(2.0);
                    let d = g.zip_map(val(*x), |gv, xv| gv * two * xv)?;
                    acc(&mut grads, &nodes, *x, d);
                }
                Op::Abs(x) => {
                    let d = g.zip_map(val(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })?;
                    acc(&mut grads, &nodes, *x, d);
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(val(*x), |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() })?;
                    acc(&mut grads, &nodes, *x, d);
                }
                Op::LogSigmoid(x) => {
                    // d/dx ln σ(x) = σ(-x)
                    let d = g.zip_map(val(*x), |gv, xv| gv / (T::one() + xv.exp()))?;
                    acc(&mut grads, &nodes, *x, d);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (n, c, h, wd) = xv.dims4()?;
                    let (o, _, k, _) = wv.dims4()?;
                    let (_, _, ho, wo) = node.value.dims4()?;
                    let l = ho * wo;
                    let ckk = c * k * k;
                    let direct = k == 1 && *stride == 1 && *pad == 0;
                    if let Some(b) = b.filter(|b| need(*b)) {
                        let mut db = vec![T::zero(); o];
                        for (idx, chunk) in g.data().chunks(l).enumerate() {
                            db[idx % o] += chunk.iter().copied().sum();
                        }
                        acc(&mut grads, &nodes, b, Tensor::new(&[o], db)?);
                    }
                    let want_w = need(*w);
                    let want_x = need(*x);
                    let mut dw = if want_w { vec![T::zero(); o * ckk] } else { Vec::new() };
                    let mut dx = if want_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
                    let mut cols = vec![T::zero(); if direct { 0 } else { ckk * l }];
                    let mut dcols = vec![T::zero(); if want_x && !direct { ckk * l } else { 0 }];
                    for s in 0..n {
                        let gs = &g.data()[s * o * l..(s + 1) * o * l];
                        let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
                        if want_w {
                            let rhs: &[T] = if direct {
                                xs
                            } else {
                                im2col(xs, c, h, wd, k, *stride, *pad, ho, wo, &mut cols);
                                &cols
                            };
                            gemm(o, l, ckk, gs, false, rhs, true, &mut dw, true);
                        }
                        if want_x {
                            let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                            if direct {
                                gemm(ckk, o, l, wv.data(), true, gs, false, dxs, true);
                            } else {
                                gemm(ckk, o, l, wv.data(), true, gs, false, &mut dcols, false);
                                col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo, dxs);
                            }
                        }
                    }
                    if want_w {
                        acc(&mut grads, &nodes, *w, Tensor::new(wv.shape(), dw)?);
                    }
                    if want_x {
                        acc(&mut grads, &nodes, *x, Tensor::new(xv.shape(), dx)?);
                    }
                }
                Op::UpConv { x, w, b, sh, sw } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (n, c, h, wd) = xv.dims4()?;
                    let o = wv.shape()[1];
                    let (sh, sw) = (*sh, *sw);
                    let (ho, wo) = (h * sh, wd * sw);
                    let hw = h * wd;
                    let osw = o * sh * sw;
                    if let Some(b) = b.filter(|b| need(*b)) {
                        let mut db = vec![T::zero(); o];
                        for (idx, chunk) in g.data().chunks(ho * wo).enumerate() {
                            db[idx % o] += chunk.iter().copied().sum();
                        }
                        acc(&mut grads, &nodes, b, Tensor::new(&[o], db)?);
                    }
                    let want_w = need(*w);
                    let want_x = need(*x);
                    let mut dw = if want_w { vec![T::zero(); c * osw] } else { Vec::new() };
                    let mut dx = if want_x { vec![T::zero(); n * c * hw] } else { Vec::new() };
                    let mut dtmp = vec![T::zero(); osw * hw];
                    for s in 0..n {
                        let gs = &g.data()[s * o * ho * wo..(s + 1) * o * ho * wo];
                        for oc in 0..o {
                            for a in 0..sh {
                                for bb in 0..sw {
                                    let row = &mut dtmp[((oc * sh + a) * sw + bb) * hw..][..hw];
                                    for i in 0..h {
                                        for j in 0..wd {
                                            row[i * wd + j] = gs[(oc * ho + i * sh + a) * wo + j * sw + bb];
                                        }
                                    }
                                }
                            }
                        }
                        if want_x {
                            gemm(c, osw, hw, wv.data(), false, &dtmp, false, &mut dx[s * c * hw..(s + 1) * c * hw], false);
                        }
                        if want_w {
                            let xs = &xv.data()[s * c * hw..(s + 1) * c * hw];
                            gemm(c, hw, osw, xs, false, &dtmp, true, &mut dw, true);
                        }
                    }
                    if want_w {
                        acc(&mut grads, &nodes, *w, Tensor::new(wv.shape(), dw)?);
                    }
                    if want_x {
                        acc(&mut grads, &nodes, *x, Tensor::new(xv.shape(), dx)?);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4()?;
                    let per_out = (h / 2) * (w / 2);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for (oi, (&gv, &am)) in g.data().iter().zip(argmax).enumerate() {
                        let plane = oi / per_out;
                        dx[plane * h * w + am as usize] += gv;
                    }
                    acc(&mut grads, &nodes, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (n, fin) = xv.dims2()?;
                    let fout = wv.shape()[0];
                    if let Some(b) = b.filter(|b| need(*b)) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.data().chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(&mut grads, &nodes, b, Tensor::new(&[fout], db)?);
                    }
                    if need(*w) {
                        let mut dw = vec![T::zero(); fout * fin];
                        gemm(fout, n, fin, g.data(), true, xv.data(), false, &mut dw, false);
                        acc(&mut grads, &nodes, *w, Tensor::new(wv.shape(), dw)?);
                    }
                    if need(*x) {
                        let mut dx = vec![T::zero(); n * fin];
                        gemm(n, fout, fin, g.data(), false, wv.data(), false, &mut dx, false);
                        acc(&mut grads, &nodes, *x, Tensor::new(xv.shape(), dx)?);
                    }
                }
                Op::Concat(parts) => {
                    let shape = node.value.shape();
                    let n = shape[0];
                    let total_c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let pshape = val(p).shape().to_vec();
                        let c = pshape[1];
                        if need(p) {
                            let mut d = Vec::with_capacity(n * c * inner);
                            for s in 0..n {
                                let start = (s * total_c + offset) * inner;
                                d.extend_from_slice(&g.data()[start..start + c * inner]);
                            }
                            acc(&mut grads, &nodes, p, Tensor::new(&pshape, d)?);
                        }
                        offset += c;
                    }
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(&mut grads, &nodes, *x, g.reshape(&shape)?);
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let d = g.data()[0] / T::of_f64(xv.numel() as f64);
                    acc(&mut grads, &nodes, *x, Tensor::full(xv.shape(), d));
                }
                Op::Sum(x) => {
                    let xv = val(*x);
                    acc(&mut grads, &nodes, *x, Tensor::full(xv.shape(), g.data()[0]));
                }
                Op::MulConst(x, c) => {
                    acc(&mut grads, &nodes, *x, g.zip_map(c, |a, b| a * b)?);
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } => Some((store, id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central-difference check of d(sum(f(x) * probe)) / dx against the tape.
    fn check_input_grad(
        x: Tensor<f64>,
        f: impl Fn(&Graph<f64>, Var) -> Var,
        rng: &mut RngStream,
    ) {
        let g = Graph::new();
        let xv = g.input(x.clone());
        let y = f(&g, xv);
        let probe = rand_tensor(&g.shape(y), rng);
        let yp = g.mul_const(y, probe.clone()).unwrap();
        let loss = g.sum(yp);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(xv).unwrap().clone();
        let eval = |t: Tensor<f64>| {
            let g = Graph::new();
            let v = g.constant(t);
            let y = f(&g, v);
            let yp = g.mul_const(y, probe.clone()).unwrap();
            g.scalar_value(g.sum(yp))
        };
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / (1e-8 + fd.abs().max(an.abs()));
            assert!(err < 1e-5 || (fd - an).abs() < 1e-8, "elem {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = RngStream::new(5, "conv-direct");
        for (k, stride, pad) in [(1, 1, 0), (1, 2, 1), (2, 2, 0), (3, 1, 1), (3, 2, 2), (3, 3, 1), (4, 2, 1), (4, 1, 3)] {
            let (n, c, o, h, w) = (2, 3, 2, 7, 6);
            let x = rand_tensor(&[n, c, h, w], &mut rng);
            let wt = rand_tensor(&[o, c, k, k], &mut rng);
            let g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
            let y = g.value(g.conv2d(xv, wv, None, stride, pad).unwrap());
            let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            assert_eq!(y.shape(), [n, o, ho, wo]);
            for (s, oc, i, j) in (0..n).flat_map(|s| (0..o).flat_map(move |oc| (0..ho).flat_map(move |i| (0..wo).map(move |j| (s, oc, i, j))))) {
                let mut want = 0.0;
                for (ci, a, b) in (0..c).flat_map(|ci| (0..k).flat_map(move |a| (0..k).map(move |b| (ci, a, b)))) {
                    let (ih, iw) = ((i * stride + a) as isize - pad as isize, (j * stride + b) as isize - pad as isize);
                    if (0..h as isize).contains(&ih) && (0..w as isize).contains(&iw) {
                        want += wt.data()[((oc * c + ci) * k + a) * k + b] * x.data()[((s * c + ci) * h + ih as usize) * w + iw as usize];
                    }
                }
                let got = y.data()[((s * o + oc) * ho + i) * wo + j];
                assert!((got - want).abs() < 1e-12, "k{k} s{stride} p{pad} at {s},{oc},{i},{j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn conv2d_input_and_weight_grads() {
        let mut rng = RngStream::new(3, "conv");
        let w = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let x = rand_tensor(&[2, 2, 5, 6], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (3, 2)] {
            let (w2, b2) = (w.clone(), b.clone());
            check_input_grad(x.clone(), move |g, v| {
                let wv = g.constant(w2.clone());
                let bv = g.constant(b2.clone());
                g.conv2d(v, wv, Some(bv), stride, pad).unwrap()
            }, &mut rng);
            let x2 = x.clone();
            check_input_grad(w.clone(), move |g, wv| {
                let xv = g.constant(x2.clone());
                g.conv2d(xv, wv, None, stride, pad).unwrap()
            }, &mut rng);
        }
    }

    #[test]
    fn conv1x1_and_upconv_grads() {
        let mut rng = RngStream::new(4, "up");
        let x = rand_tensor(&[2, 3, 3, 2], &mut rng);
        let w1 = rand_tensor(&[5, 3, 1, 1], &mut rng);
        check_input_grad(x.clone(), |g, v| {
            let wv = g.constant(w1.clone());
            g.conv2d(v, wv, None, 1, 0).unwrap()
        }, &mut rng);
        let wu = rand_tensor(&[3, 2, 2, 4], &mut rng);
        let bu = rand_tensor(&[2], &mut rng);
        check_input_grad(x.clone(), |g, v| {
            let wv = g.constant(wu.clone());
            let bv = g.constant(bu.clone());
            g.up_conv(v, wv, Some(bv)).unwrap()
        }, &mut rng);
        check_input_grad(wu.clone(), |g, wv| {
            let xv = g.constant(x.clone());
            g.up_conv(xv, wv, None).unwrap()
        }, &mut rng);
    }

    #[test]
    fn pointwise_pool_linear_concat_grads() {
        let mut rng = RngStream::new(5, "misc");
        let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
        check_input_grad(x.clone(), |g, v| g.max_pool2(v).unwrap(), &mut rng);
        check_input_grad(x.clone(), |g, v| g.tanh(g.leaky_relu(v, 0.2)), &mut rng);
        check_input_grad(x.clone(), |g, v| g.log_sigmoid(g.clamp(g.scale(v, 3.0), -2.5, 2.5)), &mut rng);
        check_input_grad(x.clone(), |g, v| {
            let sq = g.square(v);
            let ab = g.abs(v);
            g.concat(&[sq, ab, v]).unwrap()
        }, &mut rng);
        let e = rand_tensor(&[2, 2], &mut rng);
        check_input_grad(e, |g, ev| {
            let xv = g.constant(x.clone());
            g.add_per_sample_channel(xv, ev).unwrap()
        }, &mut rng);
        let w = rand_tensor(&[3, 4], &mut rng);
        let feats = rand_tensor(&[5, 4], &mut rng);
        check_input_grad(feats, |g, v| {
            let wv = g.constant(w.clone());
            g.linear(v, wv, None).unwrap()
        }, &mut rng);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(0, "p");
        let a = store.add_uniform("a", &[3], 3, &mut rng).unwrap();
        let b = store.add_uniform("b", &[3], 3, &mut rng).unwrap();
        store.set_trainable(b, false);
        let g = Graph::new();
        let (va, vb) = (g.param(&store, a), g.param(&store, b));
        let prod = g.mul(va, vb).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
        assert_eq!(grads[0].1, *store.get(b));
    }
}

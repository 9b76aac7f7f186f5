//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or differentiable inputs (model parameters, or an input that a
//! caller wants the gradient of). [`Tape::backward`] walks the record in
//! reverse and returns the gradient of a scalar node with respect to every
//! node that requires one.

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::{ConvGeom, ConvShape, BN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch-norm node, to be folded
/// into the running estimates after the step.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with the current batch statistics.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// normalized input
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Relu(Var),
    Add(Var, Var),
    AbsDiff(Var, Var),
    ScaleShift {
        x: Var,
        scale: Option<Tensor<T>>,
    },
    Concat(Vec<Var>),
    Upsample {
        x: Var,
        h: usize,
        w: usize,
    },
    GlobalAvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        /// d loss / d logits, precomputed in the forward pass
        dlogits: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), stats: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Batch statistics recorded by training-mode normalization so far.
    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.stats)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient will be reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a node's value into a new constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        if xv.shape().len() != 4 || wv.shape().len() != 4 {
            return Err(Error::shape(format!("conv2d expects rank-4 input and weight, got {:?} / {:?}", xv.shape(), wv.shape())));
        }
        let (n, cin, h, wd) = xv.dims4();
        let (cout, wcin, kh, kw) = wv.dims4();
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if h + 2 * geom.pad < geom.dilation * (kh - 1) + 1 || wd + 2 * geom.pad < geom.dilation * (kw - 1) + 1 {
            return Err(Error::shape(format!("conv2d: kernel larger than padded input {h}x{wd}")));
        }
        let shape = ConvShape { cin, h, w: wd, cout, kh, kw, ho: geom.out_dim(h, kh), wo: geom.out_dim(wd, kw) };
        let bias = match b {
            Some(b) => {
                let bv = self.nodes[b.0].value.data();
                if bv.len() != cout {
                    return Err(Error::shape(format!("conv2d: bias has {} entries, expected {cout}", bv.len())));
                }
                Some(bv)
            }
            None => None,
        };
        let keep = self.rg(w);
        let (out, cols) = kernels::conv2d_forward(xv.data(), n, &shape, wv.data(), bias, &geom, keep);
        let value = Tensor::from_vec(&[n, cout, shape.ho, shape.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv { x, w, b, shape, geom, cols }, rg))
    }

    /// Per-channel normalization followed by the affine `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode<'_, T>, name: &str) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        if g.len() != c || bt.len() != c {
            return Err(Error::shape(format!("batch_norm {name}: {c} channels vs affine {}", g.len())));
        }
        let eps = T::of(BN_EPS);
        let (mean, inv_std, batch) = match mode {
            NormMode::Batch => {
                let (mean, var) = kernels::channel_moments(xv.data(), n, c, plane);
                let count = n * plane;
                let unbiased = if count > 1 {
                    let f = T::of(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<_>>();
                self.stats.push(BatchStats { name: name.to_string(), mean: mean.clone(), var: unbiased });
                (mean, inv, true)
            }
            NormMode::Running { mean, var } => {
                (mean.to_vec(), var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(), false)
            }
        };
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for p in base..base + plane {
                    let xh = (xv.data()[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = xh;
                    out[p] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::Norm { x, gamma, beta, xhat, inv_std, batch }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise `|a - b|`.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| (x - y).abs())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AbsDiff(a, b), rg))
    }

    /// `x * scale + shift` with constant, same-shaped `scale` and `shift`.
    pub fn scale_shift(&mut self, x: Var, scale: Option<Tensor<T>>, shift: Option<&Tensor<T>>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut value = match &scale {
            Some(s) => xv.zip_map(s, |a, b| a * b)?,
            None => xv.clone(),
        };
        if let Some(sh) = shift {
            value.expect_same_shape(sh)?;
            value.add_assign(sh);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::ScaleShift { x, scale }, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.nodes[parts[0].0].value.dims4();
        let mut channels = 0;
        for p in parts {
            let (n, c, h, w) = self.nodes[p.0].value.dims4();
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(Error::shape(format!("concat: {:?} vs {:?}", first, (n, c, h, w))));
            }
            channels += c;
        }
        let (n, _, h, w) = first;
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for i in 0..n {
            for p in parts {
                let v = &self.nodes[p.0].value;
                out.extend_from_slice(v.row(i));
            }
        }
        let value = Tensor::from_vec(&[n, channels, h, w], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn upsample_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4();
        if (h, w) == (ho, wo) {
            return x;
        }
        let out = kernels::upsample_bilinear(xv.data(), n * c, h, w, ho, wo);
        let value = Tensor::from_vec(&[n, c, ho, wo], out).expect("upsample shape");
        let rg = self.rg(x);
        self.push(value, Op::Upsample { x, h, w }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4();
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let out = (0..n * c).map(|p| xv.data()[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[n, c, 1, 1], out).expect("pool shape");
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool(x), rg)
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, geom: ConvGeom) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.dims4();
        let (out, argmax, ho, wo) = kernels::max_pool(xv.data(), n * c, h, w, kernel, &geom);
        let value = Tensor::from_vec(&[n, c, ho, wo], out).expect("pool shape");
        let rg = self.rg(x);
        self.push(value, Op::MaxPool { x, argmax }, rg)
    }

    /// Mean cross-entropy of softmax(`logits`) against integer class
    /// targets. Pixels with `valid == false` are ignored; with no valid
    /// pixels the loss is zero. Probabilities are floored at 1e-12 before
    /// the logarithm.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8], valid: Option<&[bool]>) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let (n, c, h, w) = lv.dims4();
        let plane = h * w;
        if target.len() != n * plane || valid.is_some_and(|v| v.len() != n * plane) {
            return Err(Error::shape(format!("cross_entropy: target {} vs logits {:?}", target.len(), lv.shape())));
        }
        let count = match valid {
            Some(v) => v.iter().filter(|&&b| b).count(),
            None => n * plane,
        };
        let floor = T::of(1e-12);
        let mut dlogits = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        if count > 0 {
            let inv = T::one() / T::of(count as f64);
            let mut probs = vec![T::zero(); c];
            for i in 0..n {
                let li = lv.row(i);
                for p in 0..plane {
                    if valid.is_some_and(|v| !v[i * plane + p]) {
                        continue;
                    }
                    let t = target[i * plane + p] as usize;
                    if t >= c {
                        return Err(Error::shape(format!("cross_entropy: class {t} >= {c}")));
                    }
                    kernels::softmax_pixel(li, c, plane, p, &mut probs);
                    let pt = probs[t];
                    loss -= pt.max(floor).ln();
                    if pt > floor {
                        for k in 0..c {
                            let onehot = if k == t { T::one() } else { T::zero() };
                            dlogits[(i * c + k) * plane + p] = (probs[k] - onehot) * inv;
                        }
                    }
                }
            }
            loss *= inv;
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, dlogits }, rg))
    }

    /// Mean over pixels of KL(`reference` || softmax(`logits`)), where
    /// `reference` holds fixed class probabilities laid out like `logits`.
    pub fn kl_to_reference(&mut self, logits: Var, reference: &Tensor<T>) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        lv.expect_same_shape(reference)?;
        let (n, c, h, w) = lv.dims4();
        let plane = h * w;
        let inv = T::one() / T::of((n * plane) as f64);
        let tiny = T::of(1e-30);
        let mut dlogits = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        let mut q = vec![T::zero(); c];
        for i in 0..n {
            let li = lv.row(i);
            let ri = reference.row(i);
            for p in 0..plane {
                kernels::softmax_pixel(li, c, plane, p, &mut q);
                for k in 0..c {
                    let pk = ri[k * plane + p];
                    if pk > T::zero() {
                        loss += pk * ((pk + tiny).ln() - (q[k] + tiny).ln());
                    }
                    dlogits[(i * c + k) * plane + p] = (q[k] - pk) * inv;
                }
            }
        }
        loss *= inv;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, dlogits }, rg))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms.iter().map(|&(v, w)| self.nodes[v.0].value.data()[0] * w).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Gradient of the scalar `loss` with respect to every node on a path to
    /// it that requires a gradient.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, shape, geom, cols } => {
                let n = self.nodes[x.0].value.shape()[0];
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                // Separate the borrows of distinct gradient slots.
                let mut dx = self.rg(*x).then(|| take_or_zero(grads, *x, self));
                let mut dw = self.rg(*w).then(|| take_or_zero(grads, *w, self));
                let mut db = b.filter(|b| self.rg(*b)).map(|b| take_or_zero(grads, b, self));
                kernels::conv2d_backward(
                    gd,
                    xv,
                    cols.as_deref(),
                    n,
                    shape,
                    wv,
                    geom,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    grads[x.0] = Some(t);
                }
                if let Some(t) = dw {
                    grads[w.0] = Some(t);
                }
                if let (Some(t), Some(b)) = (db, b) {
                    grads[b.0] = Some(t);
                }
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, batch } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4();
                let plane = h * w;
                let gam = self.nodes[gamma.0].value.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for p in base..base + plane {
                            sum_dy[ch] += gd[p];
                            sum_dy_xhat[ch] += gd[p] * xhat[p];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |d| {
                    for (a, &s) in d.iter_mut().zip(&sum_dy_xhat) {
                        *a += s;
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for (a, &s) in d.iter_mut().zip(&sum_dy) {
                        *a += s;
                    }
                });
                let m = T::of((n * plane) as f64);
                self.accumulate(grads, *x, |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for p in base..base + plane {
                                d[p] += if *batch {
                                    k * (gd[p] - sum_dy[ch] / m - xhat[p] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * gd[p]
                                };
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((a, &gy), &yv) in d.iter_mut().zip(gd).zip(y) {
                        if yv > T::zero() {
                            *a += gy;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |d| {
                        for (x, &gy) in d.iter_mut().zip(gd) {
                            *x += gy;
                        }
                    });
                }
            }
            Op::AbsDiff(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let sign = |i: usize| {
                    let diff = av[i] - bv[i];
                    if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                self.accumulate(grads, *a, |d| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += gd[i] * sign(i);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x -= gd[i] * sign(i);
                    }
                });
            }
            Op::ScaleShift { x, scale } => {
                self.accumulate(grads, *x, |d| match scale {
                    Some(s) => {
                        for ((a, &gy), &sv) in d.iter_mut().zip(gd).zip(s.data()) {
                            *a += gy * sv;
                        }
                    }
                    None => {
                        for (a, &gy) in d.iter_mut().zip(gd) {
                            *a += gy;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = node.value.dims4();
                let plane = h * w;
                let total = node.value.row_len();
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    let len = c * plane;
                    self.accumulate(grads, *p, |d| {
                        for i in 0..n {
                            let src = &gd[i * total + offset..i * total + offset + len];
                            for (a, &gy) in d[i * len..(i + 1) * len].iter_mut().zip(src) {
                                *a += gy;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Upsample { x, h, w } => {
                let (n, c, ho, wo) = node.value.dims4();
                self.accumulate(grads, *x, |d| kernels::upsample_bilinear_backward(gd, n * c, *h, *w, ho, wo, d));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4();
                let plane = h * w;
                let inv = T::one() / T::of(plane as f64);
                self.accumulate(grads, *x, |d| {
                    for (p, &gy) in gd.iter().enumerate() {
                        for a in &mut d[p * plane..(p + 1) * plane] {
                            *a += gy * inv;
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4();
                let (_, _, ho, wo) = node.value.dims4();
                self.accumulate(grads, *x, |d| {
                    for (o, (&gy, &src)) in gd.iter().zip(argmax).enumerate() {
                        let plane_idx = o / (ho * wo);
                        d[plane_idx * h * w + src] += gy;
                    }
                });
            }
            Op::CrossEntropy { logits, dlogits } => {
                let s = gd[0];
                self.accumulate(grads, *logits, |d| {
                    for (a, &dl) in d.iter_mut().zip(dlogits) {
                        *a += s * dl;
                    }
                });
            }
            Op::WeightedSum(terms) => {
                let s = gd[0];
                for &(v, wt) in terms {
                    self.accumulate(grads, v, |d| d[0] += s * wt);
                }
            }
        }
    }
}

fn take_or_zero<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, tape: &Tape<T>) -> Tensor<T> {
    grads[v.0].take().unwrap_or_else(|| Tensor::zeros(tape.nodes[v.0].value.shape()))
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x` along every coordinate.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < tol || (x - y).abs() < 1e-9, "coord {i}: analytic {x} numeric {y}");
        }
    }

    fn probe(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// conv -> batch norm -> relu -> upsample -> CE, gradient w.r.t. input.
    fn pipeline(x: &Tensor<f64>, w: &Tensor<f64>, want_input: bool) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let xv = if want_input { tape.input(x.clone()) } else { tape.constant(x.clone()) };
        let wv = if want_input { tape.constant(w.clone()) } else { tape.input(w.clone()) };
        let c = tape.conv2d(xv, wv, None, ConvGeom::new(2, 1, 1)).unwrap();
        let gamma = tape.constant(Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap());
        let beta = tape.constant(Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap());
        let bn = tape.batch_norm(c, gamma, beta, NormMode::Batch, "bn").unwrap();
        let r = tape.relu(bn);
        let up = tape.upsample_bilinear(r, 6, 6);
        let target: Vec<u8> = (0..2 * 36).map(|i| (i % 3 == 0) as u8).collect();
        let loss = tape.cross_entropy(up, &target, None).unwrap();
        let grads = tape.backward(loss);
        let g = grads.get(if want_input { xv } else { wv }).unwrap().data().to_vec();
        (tape.value(loss).data()[0], g)
    }

    #[test]
    fn conv_bn_relu_upsample_ce_gradients_match_finite_differences() {
        let x = probe(1, &[2, 3, 6, 6]);
        let w = probe(2, &[2, 3, 3, 3]);
        let (_, gx) = pipeline(&x, &w, true);
        let num = numeric_grad(&x, &|xp| pipeline(xp, &w, true).0);
        assert_close(&gx, &num, 1e-5);
        let (_, gw) = pipeline(&x, &w, false);
        let num = numeric_grad(&w, &|wp| pipeline(&x, wp, false).0);
        assert_close(&gw, &num, 1e-5);
    }

    #[test]
    fn concat_pool_absdiff_maxpool_gradients() {
        let a = probe(3, &[2, 2, 4, 4]);
        let b = probe(4, &[2, 2, 4, 4]);
        let f = |a: &Tensor<f64>, grad: bool| {
            let mut tape = Tape::new();
            let av = if grad { tape.input(a.clone()) } else { tape.constant(a.clone()) };
            let bv = tape.constant(b.clone());
            let d = tape.abs_diff(av, bv).unwrap();
            let mp = tape.max_pool(d, 3, ConvGeom::new(2, 1, 1));
            let gp = tape.global_avg_pool(mp);
            let gp_up = tape.upsample_bilinear(gp, 4, 4);
            let cat = tape.concat(&[gp_up, av]).unwrap();
            let w = tape.constant(probe(5, &[2, 4, 1, 1]));
            let bias = tape.constant(Tensor::from_vec(&[2], vec![0.3, -0.1]).unwrap());
            let logits = tape.conv2d(cat, w, Some(bias), ConvGeom::new(1, 0, 1)).unwrap();
            let scaled = tape
                .scale_shift(logits, Some(probe(6, &[2, 2, 4, 4])), Some(&probe(7, &[2, 2, 4, 4])))
                .unwrap();
            let reference = Tensor::from_fn(&[2, 2, 4, 4], |i| if (i / 16) % 2 == 0 { 0.3 } else { 0.7 });
            let kl = tape.kl_to_reference(scaled, &reference).unwrap();
            let target = vec![1u8; 32];
            let ce = tape.cross_entropy(logits, &target, None).unwrap();
            let total = tape.weighted_sum(&[(kl, 0.5), (ce, 2.0)]);
            let g = if grad { tape.backward(total).get(av).unwrap().data().to_vec() } else { vec![] };
            (tape.value(total).data()[0], g)
        };
        let (_, g) = f(&a, true);
        let num = numeric_grad(&a, &|ap| f(ap, false).0);
        assert_close(&g, &num, 1e-5);
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let loss = tape.cross_entropy(l, &[1, 0, 1, 0, 1, 0, 1, 0, 1], None).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ignored_pixels_do_not_contribute() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::from_vec(&[1, 2, 1, 2], vec![5.0, 0.0, 0.0, 3.0]).unwrap());
        let loss = tape.cross_entropy(l, &[0, 0], Some(&[true, false])).unwrap();
        let g = tape.backward(loss);
        let d = g.get(l).unwrap().data();
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        let none = tape.cross_entropy(l, &[0, 0], Some(&[false, false])).unwrap();
        assert_eq!(tape.value(none).data()[0], 0.0);
    }
}

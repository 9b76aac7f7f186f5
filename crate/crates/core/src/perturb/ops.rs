//! Stochastic feature perturbations, each expressed as an affine edit
//! `x * scale + shift` with constant `scale` and `shift`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise affine edit of a feature batch. `None` means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEdit<T> {
    pub scale: Option<Tensor<T>>,
    pub shift: Option<Tensor<T>>,
}

impl<T: Scalar> FeatureEdit<T> {
    pub fn identity() -> Self {
        Self { scale: None, shift: None }
    }

    pub fn scaled(scale: Tensor<T>) -> Self {
        Self { scale: Some(scale), shift: None }
    }

    pub fn shifted(shift: Tensor<T>) -> Self {
        Self { scale: None, shift: Some(shift) }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.is_none() && self.shift.is_none()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = match &self.scale {
            Some(s) => x.zip_map(s, |a, b| a * b)?,
            None => x.clone(),
        };
        if let Some(sh) = &self.shift {
            out.expect_same_shape(sh)?;
            out.add_assign(sh);
        }
        Ok(out)
    }

    /// Resets rows whose flag is false to the identity.
    pub fn restrict_rows(mut self, keep: &[bool]) -> Self {
        if keep.iter().all(|&k| !k) {
            return Self::identity();
        }
        if let Some(s) = &mut self.scale {
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    s.row_mut(i).fill(T::one());
                }
            }
        }
        if let Some(s) = &mut self.shift {
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    s.row_mut(i).fill(T::zero());
                }
            }
        }
        self
    }
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {v}")));
    }
    Ok(())
}

/// `scale = 1 + u`, `u ~ U(-amplitude, amplitude)` per element.
pub fn feature_noise_edit<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R, amplitude: f64) -> FeatureEdit<T> {
    if amplitude == 0.0 {
        return FeatureEdit::identity();
    }
    FeatureEdit::scaled(Tensor::from_fn(shape, |_| T::of(1.0 + rng.random_range(-amplitude..=amplitude))))
}

pub fn feature_noise<T: Scalar, R: Rng + ?Sized>(d: &Tensor<T>, rng: &mut R, amplitude: f64) -> Result<Tensor<T>> {
    feature_noise_edit(d.shape(), rng, amplitude).apply(d)
}

/// Channel-mean of `|d|` per spatial position, `[N, H*W]` flattened.
fn attention<T: Scalar>(d: &Tensor<T>) -> Vec<Vec<f64>> {
    let (n, c, h, w) = d.dims4();
    let plane = h * w;
    (0..n)
        .map(|i| {
            let row = d.row(i);
            (0..plane).map(|p| (0..c).map(|k| row[k * plane + p].as_f64().abs()).sum::<f64>() / c as f64).collect()
        })
        .collect()
}

/// Zeroes, across all channels, the spatial positions whose attention
/// (channel-mean of `|d|`) exceeds the `gamma`-quantile of the sample's
/// attention map, with `gamma ~ U(range)` drawn per sample.
pub fn feature_dropout_edit<T: Scalar, R: Rng + ?Sized>(
    d: &Tensor<T>,
    rng: &mut R,
    range: [f64; 2],
) -> Result<FeatureEdit<T>> {
    if !(0.0 <= range[0] && range[0] <= range[1] && range[1] <= 1.0) {
        return Err(Error::InvalidArgument(format!("dropout quantile range {range:?} must be ordered within [0, 1]")));
    }
    let (_, c, h, w) = d.dims4();
    let plane = h * w;
    let mut scale = Tensor::full(d.shape(), T::one());
    for (i, att) in attention(d).into_iter().enumerate() {
        let gamma = if range[0] == range[1] { range[0] } else { rng.random_range(range[0]..range[1]) };
        let threshold = super::gate::quantile(&att, gamma)?;
        let row = scale.row_mut(i);
        for (p, &a) in att.iter().enumerate() {
            if a > threshold {
                for k in 0..c {
                    row[k * plane + p] = T::zero();
                }
            }
        }
    }
    Ok(FeatureEdit::scaled(scale))
}

pub fn feature_dropout<T: Scalar, R: Rng + ?Sized>(d: &Tensor<T>, rng: &mut R, range: [f64; 2]) -> Result<Tensor<T>> {
    feature_dropout_edit(d, rng, range)?.apply(d)
}

fn check_label(shape: &[usize], label: &[u8]) -> Result<()> {
    let (n, _, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if label.len() != n * h * w {
        return Err(Error::shape(format!("pseudo-label of {} pixels for features {shape:?}", label.len())));
    }
    Ok(())
}

/// Zero every channel where `label[n, y, x] == zero_where`.
fn region_edit<T: Scalar>(shape: &[usize], label: &[u8], zero_where: u8) -> Result<FeatureEdit<T>> {
    check_label(shape, label)?;
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    let mut scale = Tensor::full(shape, T::one());
    for i in 0..shape[0] {
        let row = scale.row_mut(i);
        for p in 0..plane {
            if label[i * plane + p] == zero_where {
                for k in 0..c {
                    row[k * plane + p] = T::zero();
                }
            }
        }
    }
    Ok(FeatureEdit::scaled(scale))
}

/// Zeroes features at changed pseudo-label positions.
pub fn object_masking_edit<T: Scalar>(shape: &[usize], label: &[u8]) -> Result<FeatureEdit<T>> {
    region_edit(shape, label, 1)
}

/// Zeroes features at unchanged pseudo-label positions.
pub fn context_masking_edit<T: Scalar>(shape: &[usize], label: &[u8]) -> Result<FeatureEdit<T>> {
    region_edit(shape, label, 0)
}

pub fn object_masking<T: Scalar>(d: &Tensor<T>, label: &[u8]) -> Result<Tensor<T>> {
    object_masking_edit(d.shape(), label)?.apply(d)
}

pub fn context_masking<T: Scalar>(d: &Tensor<T>, label: &[u8]) -> Result<Tensor<T>> {
    context_masking_edit(d.shape(), label)?.apply(d)
}

/// Half-open rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn within(&self, outer: &Rect) -> bool {
        self.y0 >= outer.y0 && self.x0 >= outer.x0 && self.y1 <= outer.y1 && self.x1 <= outer.x1
    }
}

/// Bounding boxes of the 4-connected components of the 1-pixels of an
/// `h x w` map, in scan order of their first pixel.
pub fn component_boxes(label: &[u8], h: usize, w: usize) -> Vec<Rect> {
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if label[start] != 1 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut b = Rect { y0: h, x0: w, y1: 0, x1: 0 };
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            b.y0 = b.y0.min(y);
            b.x0 = b.x0.min(x);
            b.y1 = b.y1.max(y + 1);
            b.x1 = b.x1.max(x + 1);
            let mut visit = |q: usize| {
                if label[q] == 1 && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        boxes.push(b);
    }
    boxes
}

/// Random rectangle inside `outer` covering an `area ~ U(area_range)`
/// fraction of it (side lengths scaled by `sqrt(area)`, at least 1).
pub fn random_rect_within<R: Rng + ?Sized>(outer: &Rect, area_range: [f64; 2], rng: &mut R) -> Rect {
    let (bh, bw) = (outer.y1 - outer.y0, outer.x1 - outer.x0);
    let ratio = if area_range[0] == area_range[1] { area_range[0] } else { rng.random_range(area_range[0]..area_range[1]) };
    let side = ratio.sqrt();
    let rh = ((side * bh as f64).round() as usize).clamp(1, bh);
    let rw = ((side * bw as f64).round() as usize).clamp(1, bw);
    let y0 = outer.y0 + rng.random_range(0..=bh - rh);
    let x0 = outer.x0 + rng.random_range(0..=bw - rw);
    Rect { y0, x0, y1: y0 + rh, x1: x0 + rw }
}

/// The cutout rectangle of one sample and the component box it was drawn
/// from (`None` on the no-change fallback).
pub fn guided_cutout_rect<R: Rng + ?Sized>(
    label: &[u8],
    h: usize,
    w: usize,
    area_range: [f64; 2],
    rng: &mut R,
) -> (Rect, Option<Rect>) {
    let boxes = component_boxes(label, h, w);
    if boxes.is_empty() {
        let full = Rect { y0: 0, x0: 0, y1: h, x1: w };
        return (random_rect_within(&full, area_range, rng), None);
    }
    let b = boxes[rng.random_range(0..boxes.len())];
    (random_rect_within(&b, area_range, rng), Some(b))
}

/// Zeroes, across channels, a random rectangle inside the bounding box of a
/// random changed component of each sample's pseudo-label.
pub fn guided_cutout_edit<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    label: &[u8],
    rng: &mut R,
    area_range: [f64; 2],
) -> Result<FeatureEdit<T>> {
    check_label(shape, label)?;
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let plane = h * w;
    let mut scale = Tensor::full(shape, T::one());
    for i in 0..shape[0] {
        let (rect, _) = guided_cutout_rect(&label[i * plane..(i + 1) * plane], h, w, area_range, rng);
        let row = scale.row_mut(i);
        for k in 0..c {
            for y in rect.y0..rect.y1 {
                row[k * plane + y * w + rect.x0..k * plane + y * w + rect.x1].fill(T::zero());
            }
        }
    }
    Ok(FeatureEdit::scaled(scale))
}

pub fn guided_cutout<T: Scalar, R: Rng + ?Sized>(
    d: &Tensor<T>,
    label: &[u8],
    rng: &mut R,
    area_range: [f64; 2],
) -> Result<Tensor<T>> {
    guided_cutout_edit(d.shape(), label, rng, area_range)?.apply(d)
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1 / (1 - rate)`.
pub fn random_dropout_edit<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R, rate: f64) -> Result<FeatureEdit<T>> {
    check_unit_interval("dropout rate", rate)?;
    if rate == 0.0 {
        return Ok(FeatureEdit::identity());
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Ok(FeatureEdit::scaled(Tensor::from_fn(shape, |_| if rng.random_bool(rate) { T::zero() } else { keep })))
}

pub fn random_dropout<T: Scalar, R: Rng + ?Sized>(d: &Tensor<T>, rng: &mut R, rate: f64) -> Result<Tensor<T>> {
    random_dropout_edit(d.shape(), rng, rate)?.apply(d)
}

/// Nearest-neighbour downsampling of `[N, H, W]` label maps
/// (`src = floor(dst * in / out)`).
pub fn resize_labels(label: &[u8], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * ho * wo);
    for i in 0..n {
        for y in 0..ho {
            let sy = y * h / ho;
            for x in 0..wo {
                out.push(label[(i * h + sy) * w + x * w / wo]);
            }
        }
    }
    out
}

/// Random direction with unit L2 norm per sample.
pub fn random_unit<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(rand_distr::StandardNormal)));
    normalize_rows(&mut t);
    t
}

/// Scales each sample to unit L2 norm. Returns, per sample, whether the row
/// had a usable (finite, non-zero) norm; unusable rows are left untouched.
pub fn normalize_rows<T: Scalar>(t: &mut Tensor<T>) -> Vec<bool> {
    let n = t.shape()[0];
    (0..n)
        .map(|i| {
            let row = t.row_mut(i);
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                for v in row.iter_mut() {
                    *v = T::of(v.as_f64() / norm);
                }
                true
            } else {
                false
            }
        })
        .collect()
}

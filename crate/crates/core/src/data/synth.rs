//! Desk-scale synthetic change scenes: textured ground with flat-coloured
//! "buildings", where the second acquisition adds or removes some of them
//! under a global illumination drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::model::ImagePair;
use crate::params::derive_seed;

/// Every tenth sample (indices `9, 19, ...`) has no change.
pub const ZERO_CHANGE_EVERY: usize = 10;

const STRIDE: usize = 32;
const MIN_PREVALENCE: f64 = 0.02;
const MAX_PREVALENCE: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// An axis-aligned rectangle or ellipse given by centre and half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub hy: f64,
    pub hx: f64,
    pub color: [f32; 3],
}

impl Shape {
    /// Whether the centre of pixel `(y, x)` lies inside the shape.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.hy;
        let dx = (x as f64 + 0.5 - self.cx) / self.hx;
        match self.kind {
            ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn overlaps(&self, other: &Shape, margin: f64) -> bool {
        (self.cy - other.cy).abs() < self.hy + other.hy + margin && (self.cx - other.cx).abs() < self.hx + other.hx + margin
    }
}

/// One generated sample together with the shapes that produced it.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub pair: ImagePair,
    pub before: Vec<Shape>,
    pub after: Vec<Shape>,
}

fn random_shape<R: Rng>(size: usize, rng: &mut R) -> Shape {
    let s = size as f64 / 64.0;
    let hy = rng.random_range(3.0..10.0) * s;
    let hx = rng.random_range(3.0..10.0) * s;
    let cy = rng.random_range(hy..size as f64 - hy);
    let cx = rng.random_range(hx..size as f64 - hx);
    let kind = if rng.random_bool(0.6) { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let color = if rng.random_bool(0.7) {
        std::array::from_fn(|_| rng.random_range(0.6..0.95))
    } else {
        std::array::from_fn(|_| rng.random_range(0.05..0.2))
    };
    Shape { kind, cy, cx, hy, hx, color }
}

/// Adds up to `count` shapes that keep clear of `existing`.
fn place<R: Rng>(size: usize, existing: &[Shape], count: usize, rng: &mut R) -> Vec<Shape> {
    let mut out: Vec<Shape> = Vec::new();
    for _ in 0..count {
        for _ in 0..50 {
            let s = random_shape(size, rng);
            if existing.iter().chain(&out).all(|o| !s.overlaps(o, 2.0)) {
                out.push(s);
                break;
            }
        }
    }
    out
}

fn footprint(shapes: &[Shape], size: usize) -> Vec<bool> {
    (0..size * size).map(|p| shapes.iter().any(|s| s.contains(p / size, p % size))).collect()
}

struct Texture {
    base: [f32; 3],
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new<R: Rng>(rng: &mut R, n_waves: usize, amplitude: f64) -> Self {
        let base = std::array::from_fn(|_| rng.random_range(0.25..0.5));
        let waves = (0..n_waves)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(1.0..6.0);
                (theta, freq, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0) * amplitude)
            })
            .collect();
        Self { base, waves }
    }

    fn value(&self, y: usize, x: usize, size: usize) -> f32 {
        let (u, v) = (y as f64 / size as f64, x as f64 / size as f64);
        self.waves
            .iter()
            .map(|&(theta, f, phase, a)| a * (std::f64::consts::TAU * f * (u * theta.cos() + v * theta.sin()) + phase).sin())
            .sum::<f64>() as f32
    }
}

fn render<R: Rng>(ground: &Texture, season: Option<&Texture>, shapes: &[Shape], size: usize, noise: f32, rng: &mut R) -> Image {
    let mut img = Image::new(size, size);
    let n = Normal::new(0.0f32, noise).expect("noise level");
    for y in 0..size {
        for x in 0..size {
            let t = ground.value(y, x, size) + season.map_or(0.0, |s| s.value(y, x, size));
            let shape = shapes.iter().find(|s| s.contains(y, x));
            for c in 0..CHANNELS {
                let v = match shape {
                    Some(s) => s.color[c],
                    None => ground.base[c] + t * (0.8 + 0.2 * c as f32),
                };
                img.set(c, y, x, v + n.sample(rng));
            }
        }
    }
    img
}

/// Per-channel acquisition gain in `1 +- gain` and bias in `+- bias`.
fn illuminate<R: Rng>(img: &mut Image, gain: f32, bias: f32, rng: &mut R) {
    for c in 0..CHANNELS {
        let g = rng.random_range(1.0 - gain..1.0 + gain);
        let b = rng.random_range(-bias..bias);
        for v in img.plane_mut(c) {
            *v = *v * g + b;
        }
    }
}

/// Sample `index` of the synthetic set generated from `seed`.
pub fn synth_scene(index: usize, size: usize, seed: u64) -> Result<SynthScene> {
    if size == 0 || size % STRIDE != 0 {
        return Err(Error::NotDivisible { height: size, width: size, stride: STRIDE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synth/{index}")));
    let total = (size * size) as f64;
    let zero_change = index % ZERO_CHANGE_EVERY == ZERO_CHANGE_EVERY - 1;
    let (before, after) = loop {
        let n_base = rng.random_range(2..=5);
        let before = place(size, &[], n_base, &mut rng);
        if zero_change {
            break (before.clone(), before);
        }
        let mut found = None;
        for _ in 0..20 {
            let kept: Vec<Shape> = before.iter().copied().filter(|_| !rng.random_bool(0.3)).collect();
            let n_new = rng.random_range(1..=3);
            let added = place(size, &before, n_new, &mut rng);
            let after: Vec<Shape> = kept.into_iter().chain(added).collect();
            let a = footprint(&before, size);
            let b = footprint(&after, size);
            let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / total;
            if (MIN_PREVALENCE..=MAX_PREVALENCE).contains(&changed) {
                found = Some(after);
                break;
            }
        }
        if let Some(after) = found {
            break (before, after);
        }
    };

    let ground = Texture::new(&mut rng, 3, 0.06);
    let season = Texture::new(&mut rng, 2, 0.03);
    let mut image_a = render(&ground, None, &before, size, 0.015, &mut rng);
    let mut image_b = render(&ground, Some(&season), &after, size, 0.015, &mut rng);
    illuminate(&mut image_b, 0.2, 0.08, &mut rng);
    image_a.clamp01();
    image_b.clamp01();

    let a = footprint(&before, size);
    let b = footprint(&after, size);
    let label = Mask::from_vec(size, size, a.iter().zip(&b).map(|(x, y)| (x != y) as u8).collect())?;
    let pair = ImagePair::new(format!("synth_{seed}_{index:05}"), image_a, image_b, Some(label))?;
    Ok(SynthScene { pair, before, after })
}

/// `n` labeled synthetic pairs of `size x size` pixels.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    Dataset::new((0..n).map(|i| synth_scene(i, size, seed).map(|s| s.pair)).collect::<Result<_>>()?)
}

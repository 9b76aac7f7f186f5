//! Weak (geometric) and strong (photometric, CutMix) augmentation of image
//! pairs. Geometry is always shared by both temporal images and the mask.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::model::ImagePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side of the square training crop.
    pub crop_size: usize,
    pub scale_range: [f64; 2],
    pub hflip_prob: f64,
    /// Range of the brightness, contrast and saturation factors.
    pub jitter_range: [f64; 2],
    pub jitter_prob: f64,
    pub blur_sigma: [f64; 2],
    pub blur_prob: f64,
    pub cutmix_prob: f64,
    pub cutmix_area: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 256,
            scale_range: [0.5, 2.0],
            hflip_prob: 0.5,
            jitter_range: [0.6, 1.4],
            jitter_prob: 0.8,
            blur_sigma: [0.1, 2.0],
            blur_prob: 0.5,
            cutmix_prob: 0.5,
            cutmix_area: [0.1, 0.5],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("augment: {m}")));
        if self.crop_size == 0 {
            return bad("crop_size must be positive".into());
        }
        for (name, r, lo) in [
            ("scale_range", self.scale_range, 0.0),
            ("jitter_range", self.jitter_range, 0.0),
            ("blur_sigma", self.blur_sigma, 0.0),
            ("cutmix_area", self.cutmix_area, 0.0),
        ] {
            if !(r[0] > lo && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} {r:?} must be an ordered positive range"));
            }
        }
        if self.cutmix_area[1] > 1.0 {
            return bad("cutmix_area must not exceed 1".into());
        }
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
            ("cutmix_prob", self.cutmix_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Index into `[0, n)` by mirror folding without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Resize, reflect-pad, crop and flip, in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeomTransform {
    pub src: (usize, usize),
    pub resized: (usize, usize),
    /// Top and left padding added to reach the crop size.
    pub pad: (usize, usize),
    pub crop_origin: (usize, usize),
    pub out: (usize, usize),
    pub flip: bool,
}

impl GeomTransform {
    pub fn sample<R: Rng + ?Sized>(src: (usize, usize), cfg: &AugmentConfig, rng: &mut R) -> Self {
        let s = draw(rng, cfg.scale_range);
        let resized = (((src.0 as f64 * s).round() as usize).max(1), ((src.1 as f64 * s).round() as usize).max(1));
        let crop = cfg.crop_size;
        let padded = (resized.0.max(crop), resized.1.max(crop));
        let pad = ((padded.0 - resized.0) / 2, (padded.1 - resized.1) / 2);
        let crop_origin = (rng.random_range(0..=padded.0 - crop), rng.random_range(0..=padded.1 - crop));
        let flip = rng.random_bool(cfg.hflip_prob);
        Self { src, resized, pad, crop_origin, out: (crop, crop), flip }
    }

    pub fn identity(src: (usize, usize)) -> Self {
        Self { src, resized: src, pad: (0, 0), crop_origin: (0, 0), out: src, flip: false }
    }

    /// Position in the resized image that output pixel `(y, x)` reads.
    fn resized_coord(&self, y: usize, x: usize) -> (usize, usize) {
        let x = if self.flip { self.out.1 - 1 - x } else { x };
        let py = (y + self.crop_origin.0) as isize - self.pad.0 as isize;
        let px = (x + self.crop_origin.1) as isize - self.pad.1 as isize;
        (reflect(py, self.resized.0), reflect(px, self.resized.1))
    }

    /// Whether output pixel `(y, x)` falls in the reflected border.
    pub fn in_padding(&self, y: usize, x: usize) -> bool {
        let x = if self.flip { self.out.1 - 1 - x } else { x };
        let py = (y + self.crop_origin.0) as isize - self.pad.0 as isize;
        let px = (x + self.crop_origin.1) as isize - self.pad.1 as isize;
        py < 0 || px < 0 || py >= self.resized.0 as isize || px >= self.resized.1 as isize
    }

    /// Output coordinates of the centre of source pixel `(y, x)`; they lie
    /// outside `[-0.5, out - 0.5)` when the point was cropped away.
    pub fn map_point(&self, y: f64, x: f64) -> (f64, f64) {
        let ry = (y + 0.5) * self.resized.0 as f64 / self.src.0 as f64 - 0.5;
        let rx = (x + 0.5) * self.resized.1 as f64 / self.src.1 as f64 - 0.5;
        let oy = ry + self.pad.0 as f64 - self.crop_origin.0 as f64;
        let mut ox = rx + self.pad.1 as f64 - self.crop_origin.1 as f64;
        if self.flip {
            ox = self.out.1 as f64 - 1.0 - ox;
        }
        (oy, ox)
    }

    /// Bilinear resampling (half-pixel centres) of every channel.
    pub fn apply_image(&self, img: &Image) -> Image {
        let (h, w) = self.src;
        let (fy, fx) = (h as f64 / self.resized.0 as f64, w as f64 / self.resized.1 as f64);
        let mut out = Image::new(self.out.0, self.out.1);
        for y in 0..self.out.0 {
            for x in 0..self.out.1 {
                let (ry, rx) = self.resized_coord(y, x);
                let sy = ((ry as f64 + 0.5) * fy - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((rx as f64 + 0.5) * fx - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                for c in 0..CHANNELS {
                    let top = img.get(c, y0, x0) * (1.0 - tx) + img.get(c, y0, x1) * tx;
                    let bot = img.get(c, y1, x0) * (1.0 - tx) + img.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling on the same half-pixel grid as
    /// `apply_image`: `src = floor((dst + 0.5) * in / out)`.
    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (h, w) = self.src;
        let mut out = Mask::zeros(self.out.0, self.out.1);
        for y in 0..self.out.0 {
            for x in 0..self.out.1 {
                let (ry, rx) = self.resized_coord(y, x);
                let sy = ((2 * ry + 1) * h / (2 * self.resized.0)).min(h - 1);
                let sx = ((2 * rx + 1) * w / (2 * self.resized.1)).min(w - 1);
                out.set(y, x, mask.get(sy, sx));
            }
        }
        out
    }

    pub fn apply_pair(&self, pair: &ImagePair) -> ImagePair {
        ImagePair {
            id: pair.id.clone(),
            image_a: self.apply_image(&pair.image_a),
            image_b: self.apply_image(&pair.image_b),
            label: pair.label.as_ref().map(|l| self.apply_mask(l)),
        }
    }
}

/// Random resize, crop and horizontal flip shared by both images and the
/// label.
pub fn weak_augment<R: Rng + ?Sized>(pair: &ImagePair, cfg: &AugmentConfig, rng: &mut R) -> Result<ImagePair> {
    pair.validate()?;
    Ok(GeomTransform::sample(pair.dims(), cfg, rng).apply_pair(pair))
}

fn gray(img: &Image, p: usize) -> f32 {
    0.299 * img.plane(0)[p] + 0.587 * img.plane(1)[p] + 0.114 * img.plane(2)[p]
}

/// Brightness, contrast and saturation, each written as a blend so that a
/// factor of one leaves values untouched.
pub fn color_jitter(img: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    for v in &mut img.data {
        *v *= brightness;
    }
    img.clamp01();
    let plane = img.height * img.width;
    let mean = (0..plane).map(|p| gray(img, p)).sum::<f32>() / plane as f32;
    for v in &mut img.data {
        *v = *v * contrast + mean * (1.0 - contrast);
    }
    img.clamp01();
    for p in 0..plane {
        let g = gray(img, p);
        for c in 0..CHANNELS {
            let v = &mut img.plane_mut(c)[p];
            *v = *v * saturation + g * (1.0 - saturation);
        }
    }
    img.clamp01();
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and mirrored borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = img.dims();
    let mut tmp = Image::new(h, w);
    let mut out = Image::new(h, w);
    for c in 0..CHANNELS {
        let src = img.plane(c);
        let t = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                t[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * src[y * w + reflect(x as isize + d, w)]).sum();
            }
        }
        let t = tmp.plane(c);
        let o = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                o[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * t[reflect(y as isize + d, h) * w + x]).sum();
            }
        }
    }
    out.clamp01();
    out
}

fn photometric<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut out = img.clone();
    if rng.random_bool(cfg.jitter_prob) {
        let b = draw(rng, cfg.jitter_range) as f32;
        let c = draw(rng, cfg.jitter_range) as f32;
        let s = draw(rng, cfg.jitter_range) as f32;
        color_jitter(&mut out, b, c, s);
    }
    if rng.random_bool(cfg.blur_prob) {
        out = gaussian_blur(&out, draw(rng, cfg.blur_sigma));
    }
    out.clamp01();
    out
}

/// Colour jitter and blur drawn independently for each temporal image.
/// The label, if any, is carried over unchanged.
pub fn strong_augment<R: Rng + ?Sized>(pair: &ImagePair, cfg: &AugmentConfig, rng: &mut R) -> ImagePair {
    let image_a = photometric(&pair.image_a, cfg, rng);
    let image_b = photometric(&pair.image_b, cfg, rng);
    ImagePair { id: pair.id.clone(), image_a, image_b, label: pair.label.clone() }
}

/// One weak view and two strong views derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedViews {
    pub weak: ImagePair,
    pub strong1: ImagePair,
    pub strong2: ImagePair,
    pub cutmix_mask: [Option<Mask>; 2],
    pub donor_id: [Option<String>; 2],
}

pub fn augment_views<R: Rng + ?Sized>(pair: &ImagePair, cfg: &AugmentConfig, rng: &mut R) -> Result<AugmentedViews> {
    let weak = weak_augment(pair, cfg, rng)?;
    let strong1 = strong_augment(&weak, cfg, rng);
    let strong2 = strong_augment(&weak, cfg, rng);
    Ok(AugmentedViews { weak, strong1, strong2, cutmix_mask: [None, None], donor_id: [None, None] })
}

/// Axis-aligned box covering an area fraction drawn from `area`, with
/// aspect ratio log-uniform in `[0.3, 1/0.3]`.
pub fn cutmix_box<R: Rng + ?Sized>(h: usize, w: usize, area: [f64; 2], rng: &mut R) -> Mask {
    let total = (h * w) as f64;
    let (mut bh, mut bw) = (0, 0);
    for _ in 0..64 {
        let a = draw(rng, area) * total;
        let aspect = rng.random_range((0.3f64).ln()..(1.0f64 / 0.3).ln()).exp();
        bh = (a / aspect).sqrt().round() as usize;
        bw = (a * aspect).sqrt().round() as usize;
        if (1..=h).contains(&bh) && (1..=w).contains(&bw) {
            break;
        }
    }
    let (bh, bw) = (bh.clamp(1, h), bw.clamp(1, w));
    let y0 = rng.random_range(0..=h - bh);
    let x0 = rng.random_range(0..=w - bw);
    let mut m = Mask::zeros(h, w);
    for y in y0..y0 + bh {
        m.data[y * w + x0..y * w + x0 + bw].fill(1);
    }
    m
}

/// Result of mixing a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CutMixBatch {
    pub images: Vec<ImagePair>,
    pub pseudo_labels: Vec<Mask>,
    /// Box pasted into each sample, if any.
    pub masks: Vec<Option<Mask>>,
    /// Batch index of each sample's donor.
    pub donors: Vec<Option<usize>>,
}

/// Copies `donor` into `own` where `mask` is set.
pub fn paste<T: Copy>(own: &mut [T], donor: &[T], mask: &Mask, planes: usize) {
    let n = mask.data.len();
    for c in 0..planes {
        for (p, &m) in mask.data.iter().enumerate() {
            if m == 1 {
                own[c * n + p] = donor[c * n + p];
            }
        }
    }
}

/// Random permutation without fixed points.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &d)| i != d) {
            return p;
        }
    }
}

/// With probability `cutmix_prob` per sample, pastes a random box from a
/// donor (drawn by derangement of the batch) into both temporal images and
/// into the pseudo-label.
pub fn cutmix_batch<R: Rng + ?Sized>(
    images: &[ImagePair],
    pseudo_labels: &[Mask],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<CutMixBatch> {
    if images.len() != pseudo_labels.len() {
        return Err(Error::shape(format!("{} images vs {} pseudo-labels", images.len(), pseudo_labels.len())));
    }
    let n = images.len();
    let mut out = CutMixBatch {
        images: images.to_vec(),
        pseudo_labels: pseudo_labels.to_vec(),
        masks: vec![None; n],
        donors: vec![None; n],
    };
    if n < 2 {
        return Ok(out);
    }
    let dims = images[0].dims();
    if images.iter().any(|p| p.dims() != dims) || pseudo_labels.iter().any(|m| m.dims() != dims) {
        return Err(Error::shape("cutmix batch mixes image sizes"));
    }
    let donors = derangement(n, rng);
    for i in 0..n {
        if !rng.random_bool(cfg.cutmix_prob) {
            continue;
        }
        let d = donors[i];
        let mask = cutmix_box(dims.0, dims.1, cfg.cutmix_area, rng);
        paste(&mut out.images[i].image_a.data, &images[d].image_a.data, &mask, CHANNELS);
        paste(&mut out.images[i].image_b.data, &images[d].image_b.data, &mask, CHANNELS);
        paste(&mut out.pseudo_labels[i].data, &pseudo_labels[d].data, &mask, 1);
        out.masks[i] = Some(mask);
        out.donors[i] = Some(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_planar(h, w, (0..CHANNELS * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn random_pair(h: usize, w: usize, seed: u64) -> ImagePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(h, w, &mut rng);
        let b = random_image(h, w, &mut rng);
        let label = Mask::from_vec(h, w, (0..h * w).map(|_| rng.random_bool(0.3) as u8).collect()).unwrap();
        ImagePair::new(format!("s{seed}"), a, b, Some(label)).unwrap()
    }

    fn cfg(crop: usize) -> AugmentConfig {
        AugmentConfig { crop_size: crop, ..Default::default() }
    }

    #[test]
    fn reflect_folds_without_repeating_edges() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn weak_output_has_crop_size_and_binary_label() {
        let pair = random_pair(40, 48, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let out = weak_augment(&pair, &cfg(32), &mut rng).unwrap();
            assert_eq!(out.dims(), (32, 32));
            assert!(out.label.as_ref().unwrap().data.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let pair = random_pair(16, 16, 2);
        let t = GeomTransform { flip: true, ..GeomTransform::identity((16, 16)) };
        let once = t.apply_pair(&pair);
        assert_ne!(once.image_a, pair.image_a);
        let twice = t.apply_pair(&once);
        assert_eq!(twice, pair);
    }

    #[test]
    fn identity_transform_is_exact() {
        let pair = random_pair(12, 20, 3);
        assert_eq!(GeomTransform::identity((12, 20)).apply_pair(&pair), pair);
    }

    /// A single marked pixel lands in the same place in both images and the
    /// label, near the forward-mapped position of its centre.
    #[test]
    fn tracer_pixel_follows_one_transform() {
        let (h, w) = (24, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cfg(24);
        let mut seen = 0;
        for _ in 0..1000 {
            let (ty, tx) = (rng.random_range(0..h), rng.random_range(0..w));
            let mut a = Image::new(h, w);
            let mut b = Image::new(h, w);
            for ch in 0..CHANNELS {
                a.set(ch, ty, tx, 1.0);
            }
            b.set(1, ty, tx, 0.5);
            let mut label = Mask::zeros(h, w);
            label.set(ty, tx, 1);
            let pair = ImagePair::new("t", a, b, Some(label)).unwrap();
            let t = GeomTransform::sample((h, w), &c, &mut rng);
            let out = t.apply_pair(&pair);
            let l = out.label.unwrap();
            let scale = t.resized.0 as f64 / h as f64;
            let mapped = t.map_point(ty as f64, tx as f64);
            for y in 0..t.out.0 {
                for x in 0..t.out.1 {
                    if l.get(y, x) == 0 {
                        continue;
                    }
                    assert!(out.image_a.get(0, y, x) > 0.0 && out.image_b.get(1, y, x) > 0.0);
                    if t.in_padding(y, x) {
                        continue;
                    }
                    let (my, mx) = mapped;
                    let tol = 0.5 * scale + 1.0;
                    assert!((my - y as f64).abs() <= tol && (mx - x as f64).abs() <= tol, "{t:?} ({my},{mx}) vs ({y},{x})");
                    seen += 1;
                }
            }
        }
        assert!(seen > 300);
    }

    #[test]
    fn strong_identity_parameters() {
        let pair = random_pair(16, 16, 4);
        let c = AugmentConfig { jitter_range: [1.0, 1.0], jitter_prob: 1.0, blur_prob: 0.0, ..cfg(16) };
        let out = strong_augment(&pair, &c, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out, pair);
    }

    #[test]
    fn strong_views_differ_and_stay_in_range() {
        let pair = random_pair(16, 16, 5);
        let c = cfg(16);
        let x = strong_augment(&pair, &c, &mut ChaCha8Rng::seed_from_u64(1));
        let y = strong_augment(&pair, &c, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(x.image_a, y.image_a);
        for im in [&x.image_a, &x.image_b, &y.image_a, &y.image_b] {
            assert!(im.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(x.label, pair.label);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Image::new(10, 10);
        img.data.fill(0.4);
        let out = gaussian_blur(&img, 1.7);
        assert!(out.data.iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..8 {
            let mut p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &d)| i != d));
            p.sort();
            assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn cutmix_region_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cfg(16);
        for trial in 0..50 {
            let pairs: Vec<_> = (0..4).map(|i| random_pair(16, 16, trial * 10 + i)).collect();
            let pseudo: Vec<_> = pairs.iter().map(|p| p.label.clone().unwrap()).collect();
            let out = cutmix_batch(&pairs, &pseudo, &c, &mut rng).unwrap();
            for i in 0..4 {
                let Some(mask) = &out.masks[i] else {
                    assert_eq!(out.images[i], pairs[i]);
                    continue;
                };
                let d = out.donors[i].unwrap();
                assert_ne!(d, i);
                let plane = 256;
                for p in 0..plane {
                    let src = if mask.data[p] == 1 { d } else { i };
                    assert_eq!(out.pseudo_labels[i].data[p], pseudo[src].data[p]);
                    for ch in 0..CHANNELS {
                        assert_eq!(out.images[i].image_a.data[ch * plane + p].to_bits(), pairs[src].image_a.data[ch * plane + p].to_bits());
                        assert_eq!(out.images[i].image_b.data[ch * plane + p].to_bits(), pairs[src].image_b.data[ch * plane + p].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn cutmix_on_a_single_sample_is_a_no_op() {
        let pair = random_pair(8, 8, 1);
        let m = pair.label.clone().unwrap();
        let out = cutmix_batch(std::slice::from_ref(&pair), std::slice::from_ref(&m), &cfg(8), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.images[0], pair);
        assert!(out.masks[0].is_none());
    }

    proptest! {
        #[test]
        fn cutmix_box_is_one_rectangle_of_bounded_area(seed in 0u64..5000, h in 16usize..80, w in 16usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = cutmix_box(h, w, [0.1, 0.5], &mut rng);
            let ys: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| m.get(y, x) == 1)).collect();
            let xs: Vec<usize> = (0..w).filter(|&x| (0..h).any(|y| m.get(y, x) == 1)).collect();
            let (bh, bw) = (ys.len(), xs.len());
            prop_assert_eq!(m.count_ones(), bh * bw);
            prop_assert_eq!(ys[bh - 1] - ys[0] + 1, bh);
            prop_assert_eq!(xs[bw - 1] - xs[0] + 1, bw);
            let ratio = (bh * bw) as f64 / (h * w) as f64;
            let slack = (bh + bw + 1) as f64 / (h * w) as f64;
            prop_assert!(ratio >= 0.1 - slack && ratio <= 0.5 + slack, "{}", ratio);
        }

        #[test]
        fn photometric_ops_never_touch_the_label(seed in 0u64..200) {
            let pair = random_pair(8, 8, seed);
            let out = strong_augment(&pair, &cfg(8), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(out.label, pair.label);
        }
    }
}

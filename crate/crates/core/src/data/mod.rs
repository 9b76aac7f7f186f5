//! Datasets on disk (`A/`, `B/`, `label/`), patch tiling, labeled and
//! unlabeled splits, and the synthetic scene generator.

mod split;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use split::{make_split, make_split_with_holdout, read_index_lists, IndexLists, SplitManifest, MANIFEST_SCHEMA_VERSION};
pub use synth::{synth_generate, synth_scene, Shape, ShapeKind, SynthScene, ZERO_CHANGE_EVERY};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, CHANNELS};
use crate::model::ImagePair;

/// An ordered set of uniquely named samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImagePair>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<ImagePair>) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            s.validate()?;
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { samples, index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImagePair> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Samples for `ids`, in order; unknown ids are an error.
    pub fn select(&self, ids: &[String]) -> Result<Vec<ImagePair>> {
        ids.iter()
            .map(|id| self.get(id).cloned().ok_or_else(|| Error::InvalidArgument(format!("unknown sample id {id}"))))
            .collect()
    }
}

/// A file that could not be paired during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub file: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub rejects: Vec<Reject>,
}

/// Where a dataset lives and how it is cut into patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub root: PathBuf,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: String,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

fn default_patch() -> usize {
    256
}

fn default_channels() -> String {
    "rgb".into()
}

impl DatasetDescriptor {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), patch_size: default_patch(), channels: default_channels(), manifest: None }
    }

    pub fn validate(&self, stride: usize) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % stride != 0 {
            return Err(Error::NotDivisible { height: self.patch_size, width: self.patch_size, stride });
        }
        if self.channels != "rgb" {
            return Err(Error::Config(format!("unsupported channel spec {:?}; only \"rgb\" is handled", self.channels)));
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::new(h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..CHANNELS {
            img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(img)
}

/// Single-channel label with `{0, 1}` or `{0, 255}` coding. When any value
/// exceeds 1 the map is thresholded at 128.
pub fn load_label(path: &Path) -> Result<Mask> {
    let l = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = (l.width() as usize, l.height() as usize);
    let raw = l.into_raw();
    let wide = raw.iter().any(|&v| v > 1);
    let data = raw.into_iter().map(|v| if wide { (v >= 128) as u8 } else { v }).collect();
    Mask::from_vec(h, w, data)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Writes a mask with `{0, 255}` coding.
pub fn save_label(mask: &Mask, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.iter().map(|&v| v * 255).collect())
        .ok_or_else(|| Error::shape("label buffer"))?;
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Pairs `A/<name>` with `B/<name>` (and `label/<name>` when a `label/`
/// directory exists), matching on file stem. Unpaired files are reported,
/// not fatal; a size mismatch inside a pair is an error.
pub fn ingest(root: &Path) -> Result<Ingested> {
    let (dir_a, dir_b, dir_l) = (root.join("A"), root.join("B"), root.join("label"));
    for d in [&dir_a, &dir_b] {
        if !d.is_dir() {
            return Err(Error::InvalidArgument(format!("missing directory {}", d.display())));
        }
    }
    let a = list_images(&dir_a)?;
    let b = list_images(&dir_b)?;
    let labels = if dir_l.is_dir() { Some(list_images(&dir_l)?) } else { None };
    let mut rejects = Vec::new();
    let mut samples = Vec::new();
    for (stem, pa) in &a {
        let Some(pb) = b.get(stem) else {
            rejects.push(Reject { file: pa.clone(), reason: "no counterpart in B/".into() });
            continue;
        };
        let label_path = match &labels {
            Some(l) => match l.get(stem) {
                Some(p) => Some(p),
                None => {
                    rejects.push(Reject { file: pa.clone(), reason: "no counterpart in label/".into() });
                    continue;
                }
            },
            None => None,
        };
        let label = label_path.map(|p| load_label(p)).transpose()?;
        samples.push(ImagePair::new(stem.clone(), load_image(pa)?, load_image(pb)?, label)?);
    }
    for (stem, pb) in &b {
        if !a.contains_key(stem) {
            rejects.push(Reject { file: pb.clone(), reason: "no counterpart in A/".into() });
        }
    }
    if let Some(l) = &labels {
        for (stem, pl) in l {
            if !a.contains_key(stem) {
                rejects.push(Reject { file: pl.clone(), reason: "no counterpart in A/".into() });
            }
        }
    }
    Ok(Ingested { dataset: Dataset::new(samples)?, rejects })
}

/// Writes `A/`, `B/` and (for labeled samples) `label/` PNG files.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for d in ["A", "B", "label"] {
        std::fs::create_dir_all(root.join(d))?;
    }
    for s in &ds.samples {
        let name = format!("{}.png", s.id);
        save_image(&s.image_a, &root.join("A").join(&name))?;
        save_image(&s.image_b, &root.join("B").join(&name))?;
        if let Some(l) = &s.label {
            save_label(l, &root.join("label").join(&name))?;
        }
    }
    Ok(())
}

fn pad_center(img: &Image, h: usize, w: usize) -> Image {
    let (ih, iw) = img.dims();
    let (oy, ox) = (h.saturating_sub(ih) / 2, w.saturating_sub(iw) / 2);
    let (sy, sx) = (ih.saturating_sub(h) / 2, iw.saturating_sub(w) / 2);
    let mut out = Image::new(h, w);
    for c in 0..CHANNELS {
        for y in 0..ih.min(h) {
            for x in 0..iw.min(w) {
                out.set(c, oy + y, ox + x, img.get(c, sy + y, sx + x));
            }
        }
    }
    out
}

fn pad_center_mask(m: &Mask, h: usize, w: usize) -> Mask {
    let (oy, ox) = (h.saturating_sub(m.height) / 2, w.saturating_sub(m.width) / 2);
    let (sy, sx) = (m.height.saturating_sub(h) / 2, m.width.saturating_sub(w) / 2);
    let mut out = Mask::zeros(h, w);
    for y in 0..m.height.min(h) {
        for x in 0..m.width.min(w) {
            out.set(oy + y, ox + x, m.get(sy + y, sx + x));
        }
    }
    out
}

/// Non-overlapping row-major tiles named `<id>_<row>_<col>`; remainders
/// smaller than a patch are dropped. An image smaller than one patch in
/// either dimension yields a single zero-padded, centred patch.
pub fn crop_patches(sample: &ImagePair, patch: usize) -> Result<Vec<ImagePair>> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    sample.validate()?;
    let (h, w) = sample.dims();
    if h < patch || w < patch {
        log::warn!("{}: {h}x{w} is smaller than patch {patch}; padding a single centred patch", sample.id);
        return Ok(vec![ImagePair {
            id: format!("{}_0_0", sample.id),
            image_a: pad_center(&sample.image_a, patch, patch),
            image_b: pad_center(&sample.image_b, patch, patch),
            label: sample.label.as_ref().map(|l| pad_center_mask(l, patch, patch)),
        }]);
    }
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for r in 0..h / patch {
        for c in 0..w / patch {
            let (y0, x0) = (r * patch, c * patch);
            out.push(ImagePair {
                id: format!("{}_{r}_{c}", sample.id),
                image_a: sample.image_a.crop(y0, x0, patch, patch),
                image_b: sample.image_b.crop(y0, x0, patch, patch),
                label: sample.label.as_ref().map(|l| l.crop(y0, x0, patch, patch)),
            });
        }
    }
    Ok(out)
}

pub fn patch_dataset(ds: &Dataset, patch: usize) -> Result<Dataset> {
    let mut out = Vec::new();
    for s in &ds.samples {
        out.extend(crop_patches(s, patch)?);
    }
    Dataset::new(out)
}

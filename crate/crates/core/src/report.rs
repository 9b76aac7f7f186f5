//! Error maps, result tables, line plots and run records.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::engine::{ExperimentConfig, Metrics};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];

/// Binary change map of a `[H, W]` probability map at `p > 0.5`.
pub fn binarize<T: Scalar>(probs: &Tensor<T>) -> Result<Mask> {
    let &[h, w] = probs.shape() else {
        return Err(Error::shape(format!("expected [H, W] probabilities, got {:?}", probs.shape())));
    };
    Mask::from_vec(h, w, probs.data().iter().map(|p| (p.as_f64() > 0.5) as u8).collect())
}

/// Colour-coded agreement of a prediction with its label.
pub fn render_error_map(prediction: &Mask, label: &Mask) -> Result<RgbImage> {
    if prediction.dims() != label.dims() {
        return Err(Error::shape(format!("prediction {:?} vs label {:?}", prediction.dims(), label.dims())));
    }
    let (h, w) = label.dims();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb(match (prediction.get(y, x) == 1, label.get(y, x) == 1) {
            (true, true) => TP_COLOR,
            (false, false) => TN_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
        })
    }))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// A small result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.headers.len() {
            return Err(Error::shape(format!("row of {} cells in a {}-column table", row.len(), self.headers.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Left-aligned first column, right-aligned others.
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| self.rows.iter().map(|r| r[c].chars().count()).chain([self.headers[c].chars().count()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let esc = |s: &String| {
            if s.contains([',', '"', '\n']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.clone() }
        };
        let mut out = String::new();
        for r in std::iter::once(&self.headers).chain(&self.rows) {
            out.push_str(&r.iter().map(esc).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_text())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Percentage with two decimals, or `-` when missing.
pub fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// One plotted series.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
    /// Index of a point drawn with a larger marker.
    pub highlight: Option<usize>,
}

/// Raster line plot of `series` on shared axes, with a light grid of ten
/// divisions. Non-finite points are skipped.
pub fn line_plot(series: &[Series], width: u32, height: u32) -> Result<RgbImage> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if pts.is_empty() {
        return Err(Error::Empty("plot series".into()));
    }
    if width < 40 || height < 40 {
        return Err(Error::InvalidArgument(format!("plot of {width}x{height} is too small")));
    }
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(pts.iter().map(|p| p.0).collect());
    let (y0, y1) = span(pts.iter().map(|p| p.1).collect());
    let margin = 20.0;
    let (pw, ph) = (width as f64 - 2.0 * margin, height as f64 - 2.0 * margin);
    let to_px = |(x, y): (f64, f64)| (margin + (x - x0) / (x1 - x0) * pw, margin + (1.0 - (y - y0) / (y1 - y0)) * ph);

    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for i in 0..=10 {
        let f = i as f64 / 10.0;
        let gx = margin + f * pw;
        let gy = margin + f * ph;
        draw_line(&mut img, (gx, margin), (gx, margin + ph), [225, 225, 225]);
        draw_line(&mut img, (margin, gy), (margin + pw, gy), [225, 225, 225]);
    }
    draw_line(&mut img, (margin, margin), (margin, margin + ph), [0, 0, 0]);
    draw_line(&mut img, (margin, margin + ph), (margin + pw, margin + ph), [0, 0, 0]);
    for s in series {
        let px: Vec<Option<(f64, f64)>> =
            s.points.iter().map(|&p| (p.0.is_finite() && p.1.is_finite()).then(|| to_px(p))).collect();
        for w in px.windows(2) {
            if let [Some(a), Some(b)] = w {
                draw_line(&mut img, *a, *b, s.color);
            }
        }
        for (i, p) in px.iter().enumerate() {
            if let Some(p) = p {
                draw_marker(&mut img, *p, if s.highlight == Some(i) { 5 } else { 2 }, s.color);
            }
        }
    }
    Ok(img)
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, color);
    }
}

fn draw_marker(img: &mut RgbImage, c: (f64, f64), r: i64, color: [u8; 3]) {
    let (cx, cy) = (c.0.round() as i64, c.1.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            put(img, cx + dx, cy + dy, color);
        }
    }
}

/// Summary of one training run, written as `run.json` in its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub best_epoch: usize,
    pub best_val: Option<Metrics>,
    pub final_val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub history: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse { what: "run record".into(), message: e.to_string() })?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Parse { what: format!("run record {}", path.display()), message: e.to_string() })
    }
}

/// Directory name of a run: variant plus configuration digest.
pub fn run_dir_name(cfg: &ExperimentConfig) -> String {
    format!("{}-{}", cfg.variant, cfg.hash())
}

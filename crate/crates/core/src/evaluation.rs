//! Image-quality metrics: luma SSIM and mean L1 over folders of PNGs.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{bail_invalid, Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Luma in `[0, 1]`, row-major `H·W`.
pub fn luma(img: &ImageTensor) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let d = img.data();
    (0..h * w)
        .map(|p| {
            LUMA_WEIGHTS
                .iter()
                .enumerate()
                .map(|(c, wt)| wt * (d[c * h * w + p] as f64 + 1.0) * 0.5)
                .sum()
        })
        .collect()
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = g.iter().enumerate().map(|(k, t)| t * x[y * w + ox + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = g.iter().enumerate().map(|(k, t)| t * rows[(oy + k) * ow + ox]).sum();
        }
    }
    out
}

/// Structural similarity of two images on luma with dynamic range 1, averaged over
/// every window position that fits inside the image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if (b.height(), b.width()) != (h, w) {
        bail_invalid!("ssim needs equal sizes, got {h}x{w} and {}x{}", b.height(), b.width());
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail_invalid!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window");
    }
    let (x, y) = (luma(a), luma(b));
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let mxx = filter_valid(&prod(&x, &x), h, w, &g);
    let myy = filter_valid(&prod(&y, &y), h, w, &g);
    let mxy = filter_valid(&prod(&x, &y), h, w, &g);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (sx, sy, sxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sx + sy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Mean absolute difference on the `[-1, 1]` pixel scale.
pub fn mean_l1(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        bail_invalid!("l1 needs equal sizes");
    }
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub name: String,
    pub ssim: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        // Keep the mean inside [min, max] despite rounding.
        Some(Self {
            mean: mean.clamp(min, max),
            std: var.sqrt(),
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub pairs: Vec<PairScore>,
    pub ssim: Option<Aggregate>,
    pub l1: Option<Aggregate>,
    /// Pairs that could not be scored.
    pub errors: Vec<String>,
    /// Reserved; these metrics need pretrained networks and are never computed here.
    pub inception_score: Option<f64>,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
}

impl MetricReport {
    pub fn from_pairs(pairs: Vec<PairScore>, errors: Vec<String>) -> Self {
        let ssim: Vec<f64> = pairs.iter().map(|p| p.ssim).collect();
        let l1: Vec<f64> = pairs.iter().map(|p| p.l1).collect();
        Self {
            count: pairs.len(),
            ssim: Aggregate::of(&ssim),
            l1: Aggregate::of(&l1),
            pairs,
            errors,
            inception_score: None,
            fid: None,
            lpips: None,
        }
    }

    /// Fixed-width text table of per-pair scores followed by the aggregates.
    pub fn table(&self) -> String {
        let mut s = format!("{:<32} {:>10} {:>10}\n", "pair", "ssim", "l1");
        for p in &self.pairs {
            s += &format!("{:<32} {:>10.6} {:>10.6}\n", p.name, p.ssim, p.l1);
        }
        if let (Some(a), Some(b)) = (self.ssim, self.l1) {
            s += &format!("{:<32} {:>10.6} {:>10.6}\n", "mean", a.mean, b.mean);
            s += &format!("{:<32} {:>10.6} {:>10.6}\n", "std", a.std, b.std);
        }
        for e in &self.errors {
            s += &format!("skipped: {e}\n");
        }
        s
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.insert(name);
        }
    }
    Ok(names)
}

fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    ImageTensor::from_rgb8(&img.to_rgb8())
}

/// Scores every PNG in `generated` against the same-named PNG in `targets`.
pub fn evaluate_folder(generated: &Path, targets: &Path) -> Result<MetricReport> {
    let gen = png_names(generated)?;
    let tgt = png_names(targets)?;
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for name in gen.union(&tgt) {
        match (gen.contains(name), tgt.contains(name)) {
            (true, false) => errors.push(format!("{name}: no matching target")),
            (false, true) => errors.push(format!("{name}: no matching generated image")),
            _ => {
                let a = load_png(&generated.join(name))?;
                let b = load_png(&targets.join(name))?;
                match (ssim(&a, &b), mean_l1(&a, &b)) {
                    (Ok(s), Ok(l)) => pairs.push(PairScore {
                        name: name.clone(),
                        ssim: s,
                        l1: l,
                    }),
                    (Err(e), _) | (_, Err(e)) => errors.push(format!("{name}: {e}")),
                }
            }
        }
    }
    Ok(MetricReport::from_pairs(pairs, errors))
}

//! Image, pose and parsing representations, plus the synthetic paired dataset.

mod dataset;
mod heatmap;
mod toy;

pub use dataset::{load_dataset, load_sample, sample_paths, write_dataset, DatasetEntry, SamplePaths};
pub use heatmap::{decompose_attributes, encode_keypoints_to_heatmap, label_map_to_mask_set};
pub use toy::{generate_toy_pair, ToyDataset};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Error, Result};

pub const NUM_JOINTS: usize = 18;
pub const DEFAULT_CLASSES: usize = 8;
pub const MIN_CLASSES: usize = 6;
pub const DEFAULT_HEIGHT: usize = 64;
pub const DEFAULT_WIDTH: usize = 48;
pub const DEFAULT_SIGMA: f32 = 1.5;

/// Canonical attribute classes, indexed by label value.
pub const ATTRIBUTE_NAMES: [&str; DEFAULT_CLASSES] = [
    "background",
    "hair",
    "face",
    "upper_clothes",
    "pants",
    "arms",
    "legs",
    "shoes",
];

pub const UPPER_CLOTHES: usize = 3;
pub const PANTS: usize = 4;

/// Resolves an attribute name to its channel index.
pub fn attribute_index(name: &str) -> Option<usize> {
    ATTRIBUTE_NAMES.iter().position(|n| *n == name)
}

/// A `[3, H, W]` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
    height: usize,
    width: usize,
}

impl ImageTensor {
    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if data.len() != 3 * height * width {
            bail_invalid!("image buffer has {} values, expected 3x{height}x{width}", data.len());
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < -1.0 || **v > 1.0) {
            bail_invalid!("image value {v} outside [-1, 1]");
        }
        Ok(Self { data, height, width })
    }

    pub fn filled(value: f32, height: usize, width: usize) -> Result<Self> {
        Self::new(vec![value; 3 * height * width], height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`; values are clamped into `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => bail_invalid!("expected a rank-3 image tensor, got rank {r}"),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            bail_invalid!("expected 3 color channels, got {c}");
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { term: "image".into() });
        }
        Self::new(data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), h, w)
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
        Self::new(data, h, w)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c: usize| to_u8(self.get(c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl Joint {
    pub const MISSING: Joint = Joint {
        x: 0.0,
        y: 0.0,
        visible: false,
    };
}

/// The 18 body joints of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints {
    pub joints: [Joint; NUM_JOINTS],
}

#[derive(Serialize, Deserialize)]
struct KeypointsFile {
    joints: Vec<[f32; 3]>,
}

impl Keypoints {
    pub fn invisible() -> Self {
        Self {
            joints: [Joint::MISSING; NUM_JOINTS],
        }
    }

    /// Checks the joint coordinates against an `H×W` canvas.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (j, joint) in self.joints.iter().enumerate() {
            if !joint.x.is_finite() || !joint.y.is_finite() {
                bail_invalid!("joint {j} has non-finite coordinates");
            }
            if joint.visible && (joint.x < 0.0 || joint.y < 0.0 || joint.x >= width as f32 || joint.y >= height as f32) {
                bail_invalid!("joint {j} at ({}, {}) outside {height}x{width}", joint.x, joint.y);
            }
        }
        Ok(())
    }

    /// Squared L2 distance between the visible joint coordinates of two poses.
    pub fn distance_sq(&self, other: &Keypoints) -> f32 {
        self.joints
            .iter()
            .zip(other.joints.iter())
            .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = KeypointsFile {
            joints: self
                .joints
                .iter()
                .map(|j| [j.x, j.y, if j.visible { 1.0 } else { 0.0 }])
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: KeypointsFile = serde_json::from_str(text)?;
        if file.joints.len() != NUM_JOINTS {
            bail_invalid!("pose file lists {} joints, expected {NUM_JOINTS}", file.joints.len());
        }
        let mut joints = [Joint::MISSING; NUM_JOINTS];
        for (dst, [x, y, v]) in joints.iter_mut().zip(file.joints) {
            if v != 0.0 && v != 1.0 {
                bail_invalid!("joint visibility must be 0 or 1, got {v}");
            }
            *dst = Joint { x, y, visible: v == 1.0 };
        }
        Ok(Self { joints })
    }
}

/// `[18, H, W]` per-joint Gaussian heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHeatmap {
    data: Vec<f32>,
    height: usize,
    width: usize,
}

impl PoseHeatmap {
    pub(crate) fn from_raw(data: Vec<f32>, height: usize, width: usize) -> Self {
        debug_assert_eq!(data.len(), NUM_JOINTS * height * width);
        Self { data, height, width }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn get(&self, j: usize, y: usize, x: usize) -> f32 {
        self.data[(j * self.height + y) * self.width + x]
    }

    /// Location `(x, y)` of the maximum of channel `j`, or `None` for an all-zero channel.
    pub fn peak(&self, j: usize) -> Option<(usize, usize)> {
        let ch = self.channel(j);
        let (idx, &max) = ch
            .iter()
            .enumerate()
            .fold((0, &f32::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
        (max > 0.0).then_some((idx % self.width, idx / self.width))
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, NUM_JOINTS, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Per-pixel attribute labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLabelMap {
    labels: Vec<u8>,
    height: usize,
    width: usize,
}

impl SemanticLabelMap {
    pub fn new(labels: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            bail_invalid!("label buffer has {} entries, expected {height}x{width}", labels.len());
        }
        Ok(Self { labels, height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn from_gray8(img: &GrayImage) -> Result<Self> {
        Self::new(img.as_raw().clone(), img.height() as usize, img.width() as usize)
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone()).expect("buffer size checked")
    }
}

/// `[K, H, W]` one-hot attribute masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMaskSet {
    data: Vec<f32>,
    classes: usize,
    height: usize,
    width: usize,
}

impl SemanticMaskSet {
    /// Builds a mask set from raw channel data, checking the one-hot partition.
    pub fn new(data: Vec<f32>, classes: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != classes * height * width {
            bail_invalid!("mask buffer has {} values, expected {classes}x{height}x{width}", data.len());
        }
        let n = height * width;
        for p in 0..n {
            let mut sum = 0.0;
            for k in 0..classes {
                let v = data[k * n + p];
                if v != 0.0 && v != 1.0 {
                    bail_invalid!("mask value {v} is not binary");
                }
                sum += v;
            }
            if sum != 1.0 {
                bail_invalid!("pixel {p} has channel sum {sum}, expected 1");
            }
        }
        Ok(Self { data, classes, height, width })
    }

    pub(crate) fn from_raw(data: Vec<f32>, classes: usize, height: usize, width: usize) -> Self {
        Self { data, classes, height, width }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    /// Per-pixel argmax back to labels (lowest index wins ties).
    pub fn argmax(&self) -> SemanticLabelMap {
        let n = self.height * self.width;
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.data[k * n + p] > self.data[best * n + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        SemanticLabelMap {
            labels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.classes, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Re-one-hots per-pixel class scores of shape `[K, H, W]` or `[1, K, H, W]`.
    pub fn from_scores(scores: &Tensor) -> Result<Self> {
        let scores = if scores.rank() == 4 { scores.squeeze(0)? } else { scores.clone() };
        let (k, h, w) = scores.dims3()?;
        let labels: Vec<u8> = scores
            .argmax(0)?
            .flatten_all()?
            .to_vec1::<u32>()?
            .into_iter()
            .map(|l| l as u8)
            .collect();
        label_map_to_mask_set(&SemanticLabelMap::new(labels, h, w)?, k)
    }
}

/// One image with its pose and parse.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub keypoints: Keypoints,
    pub labels: SemanticLabelMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Two images of the same person in different poses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub source: Sample,
    pub target: Sample,
    pub identity_id: u64,
}

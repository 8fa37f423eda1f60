//! Tensor views of samples and seeded, order-stable batching.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_keypoints_to_heatmap, label_map_to_mask_set, Keypoints, Sample, TrainingPair};
use crate::error::{bail_invalid, Result};
use crate::generator::GeneratorInputs;

/// One sample as `[1, ·, H, W]` tensors.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Tensor,
    pub masks: Tensor,
    pub pose: Tensor,
}

impl PreparedSample {
    pub fn new(sample: &Sample, classes: usize, sigma: f32, (h, w): (usize, usize)) -> Result<Self> {
        if (sample.height(), sample.width()) != (h, w) {
            bail_invalid!("sample is {}x{}, model expects {h}x{w}", sample.height(), sample.width());
        }
        Ok(Self {
            image: sample.image.to_tensor(DType::F32)?,
            masks: label_map_to_mask_set(&sample.labels, classes)?.to_tensor(DType::F32)?,
            pose: pose_tensor(&sample.keypoints, sigma, (h, w))?,
        })
    }
}

pub fn pose_tensor(kp: &Keypoints, sigma: f32, (h, w): (usize, usize)) -> Result<Tensor> {
    encode_keypoints_to_heatmap(kp, h, w, sigma)?.to_tensor(DType::F32)
}

/// A batch of (source, target) examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: PreparedSample,
    pub target: PreparedSample,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.image.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generator_inputs(&self, use_parsing: bool) -> GeneratorInputs {
        GeneratorInputs {
            source_image: self.source.image.clone(),
            source_masks: self.source.masks.clone(),
            target_pose: self.target.pose.clone(),
            target_masks: use_parsing.then(|| self.target.masks.clone()),
        }
    }
}

pub struct PreparedDataset {
    samples: Vec<PreparedSample>,
    /// `(source, target)` indices into `samples`.
    examples: Vec<(usize, usize)>,
}

impl PreparedDataset {
    pub fn new(
        pairs: &[TrainingPair],
        classes: usize,
        sigma: f32,
        resolution: (usize, usize),
        both_directions: bool,
    ) -> Result<Self> {
        if pairs.is_empty() {
            bail_invalid!("training needs at least one pair");
        }
        let mut samples = Vec::with_capacity(2 * pairs.len());
        let mut examples = Vec::new();
        for pair in pairs {
            let s = samples.len();
            samples.push(PreparedSample::new(&pair.source, classes, sigma, resolution)?);
            samples.push(PreparedSample::new(&pair.target, classes, sigma, resolution)?);
            examples.push((s, s + 1));
            if both_directions {
                examples.push((s + 1, s));
            }
        }
        Ok(Self { samples, examples })
    }

    /// Adds every sample paired with itself.
    pub fn with_self_pairs(mut self) -> Self {
        self.examples.extend((0..self.samples.len()).map(|i| (i, i)));
        self
    }

    pub fn num_examples(&self) -> usize {
        self.examples.len()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.examples.len().div_ceil(batch_size)
    }

    /// Example indices for one epoch, shuffled by `(seed, epoch)` and chunked.
    pub fn epoch_order(&self, seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let gather = |pick: fn(&(usize, usize)) -> usize, field: fn(&PreparedSample) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<&Tensor> = indices.iter().map(|&i| field(&self.samples[pick(&self.examples[i])])).collect();
            Ok(Tensor::cat(&parts, 0)?)
        };
        let side = |pick: fn(&(usize, usize)) -> usize| -> Result<PreparedSample> {
            Ok(PreparedSample {
                image: gather(pick, |s| &s.image)?,
                masks: gather(pick, |s| &s.masks)?,
                pose: gather(pick, |s| &s.pose)?,
            })
        };
        Ok(Batch {
            source: side(|e| e.0)?,
            target: side(|e| e.1)?,
        })
    }
}

//! Inference from trained checkpoints.

use candle_core::{DType, Tensor};

use super::batch::{pose_tensor, PreparedSample};
use super::checkpoint::Checkpoint;
use super::stages::{check_parsing_compatible, GeneratorModel, ParsingModel};
use crate::correspondence::{softmax_rows, CorrespondenceMatrix};
use crate::data::{label_map_to_mask_set, ImageTensor, Keypoints, Sample, SemanticLabelMap};
use crate::error::{bail_invalid, Error, Result};
use crate::generator::{GeneratorInputs, GeneratorOutput};

/// Where the target parse comes from.
#[derive(Debug, Clone, Copy)]
pub enum TargetParsing<'a> {
    /// Predicted by the parsing network.
    Predicted,
    /// Supplied as a label map.
    Given(&'a SemanticLabelMap),
}

pub struct Synthesizer {
    gen: GeneratorModel,
    parsing: Option<ParsingModel>,
    sigma: f32,
}

impl Synthesizer {
    pub fn from_checkpoints(generator: &Checkpoint, parsing: Option<&Checkpoint>) -> Result<Self> {
        let gen = GeneratorModel::from_checkpoint(generator)?;
        gen.store.set_training(false);
        let parsing = match parsing {
            Some(p) => {
                check_parsing_compatible(p, &generator.config)?;
                let m = ParsingModel::from_checkpoint(p)?;
                m.store.set_training(false);
                Some(m)
            }
            None => None,
        };
        Ok(Self {
            gen,
            parsing,
            sigma: generator.config.heatmap_sigma,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let c = self.gen.generator.config();
        (c.height, c.width)
    }

    pub fn classes(&self) -> usize {
        self.gen.generator.config().classes
    }

    fn prepare(&self, sample: &Sample) -> Result<PreparedSample> {
        PreparedSample::new(sample, self.classes(), self.sigma, self.resolution())
    }

    /// One-hot target parse `[1, K, H, W]`, or `None` when the model ignores parsing.
    fn target_masks(&self, source: &PreparedSample, target_pose: &Tensor, how: TargetParsing) -> Result<Option<Tensor>> {
        if !self.gen.generator.ablations().use_parsing {
            return Ok(None);
        }
        match how {
            TargetParsing::Given(labels) => {
                if (labels.height(), labels.width()) != self.resolution() {
                    bail_invalid!("target label map is {}x{}, model expects {:?}", labels.height(), labels.width(), self.resolution());
                }
                Ok(Some(label_map_to_mask_set(labels, self.classes())?.to_tensor(DType::F32)?))
            }
            TargetParsing::Predicted => {
                let net = self
                    .parsing
                    .as_ref()
                    .ok_or_else(|| Error::config("this generator uses target parsing; supply a parsing checkpoint or target labels"))?;
                let pred = net.net.forward(&source.image, &source.masks, &source.pose, target_pose)?;
                Ok(Some(pred.hard_tensor()?))
            }
        }
    }

    fn inputs(&self, source: &Sample, target_pose: &Keypoints, how: TargetParsing) -> Result<GeneratorInputs> {
        let src = self.prepare(source)?;
        let pose = pose_tensor(target_pose, self.sigma, self.resolution())?;
        let target_masks = self.target_masks(&src, &pose, how)?;
        Ok(GeneratorInputs {
            source_image: src.image,
            source_masks: src.masks,
            target_pose: pose,
            target_masks,
        })
    }

    /// Renders `source` in `target_pose`.
    pub fn pose_transfer(&self, source: &Sample, target_pose: &Keypoints, how: TargetParsing) -> Result<GeneratorOutput> {
        self.gen.generator.forward(&self.inputs(source, target_pose, how)?)
    }

    /// Renders `source` in its own pose with attribute `attribute` taken from `donor`.
    pub fn clothing_transfer(&self, source: &Sample, donor: &Sample, attribute: usize, how: TargetParsing) -> Result<GeneratorOutput> {
        let inputs = self.inputs(source, &source.keypoints, how)?;
        let d = self.prepare(donor)?;
        self.gen.generator.forward_swapped(&inputs, &d.image, &d.masks, attribute)
    }

    /// Correspondence matrix between the target pose and the source person.
    pub fn correspondence(&self, source: &Sample, target_pose: &Keypoints, how: TargetParsing) -> Result<CorrespondenceMatrix> {
        Ok(self.pose_transfer(source, target_pose, how)?.correspondence)
    }

    /// Row-softmaxed correspondence at the model's warp temperature.
    pub fn attention(&self, c: &CorrespondenceMatrix) -> Result<Tensor> {
        softmax_rows(c, self.gen.generator.config().warp.temperature)
    }
}

/// Converts the first image of a generated batch to 8-bit RGB.
pub fn output_image(out: &GeneratorOutput) -> Result<ImageTensor> {
    ImageTensor::from_tensor(&out.image.get(0)?)
}

pub fn infer_pose_transfer(syn: &Synthesizer, source: &Sample, target_pose: &Keypoints) -> Result<ImageTensor> {
    output_image(&syn.pose_transfer(source, target_pose, TargetParsing::Predicted)?)
}

pub fn infer_clothing_transfer(syn: &Synthesizer, source: &Sample, donor: &Sample, attribute: usize) -> Result<ImageTensor> {
    output_image(&syn.clothing_transfer(source, donor, attribute, TargetParsing::Predicted)?)
}

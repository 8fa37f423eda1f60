//! Full synthesis path: pose encoder, two attribute encoders, dense correspondence,
//! warp and renderer.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::correspondence::{correlation_matrix, warp, CorrespondenceMatrix, WarpConfig};
use crate::data::{DEFAULT_CLASSES, DEFAULT_HEIGHT, DEFAULT_WIDTH, MIN_CLASSES, NUM_JOINTS};
use crate::discriminator::DiscriminatorConfig;
use crate::encoders::{swap_attribute, AttributeCodeSet, AttributeEncoder, EncoderConfig, LatentFeature, PoseEncoder};
use crate::error::{bail_invalid, Result};
use crate::losses::PerceptualConfig;
use crate::nn::{Init, Scope};
use crate::parsing::ParsingNetConfig;
use crate::renderer::{Renderer, RendererConfig};

/// Architecture of every network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Spectral normalization on the generator's convolutions. The discriminator always
    /// uses it.
    pub spectral_norm: bool,
    pub encoder: EncoderConfig,
    pub renderer: RendererConfig,
    pub warp: WarpConfig,
    pub discriminator: DiscriminatorConfig,
    pub parsing: ParsingNetConfig,
    pub perceptual: PerceptualConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: DEFAULT_HEIGHT,
            width: DEFAULT_WIDTH,
            classes: DEFAULT_CLASSES,
            spectral_norm: true,
            encoder: EncoderConfig::default(),
            renderer: RendererConfig::default(),
            warp: WarpConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            parsing: ParsingNetConfig::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < MIN_CLASSES || self.classes > 256 {
            bail_invalid!("classes must be in {MIN_CLASSES}..=256, got {}", self.classes);
        }
        if self.parsing.k != self.classes {
            bail_invalid!("parsing.classes ({}) must equal classes ({})", self.parsing.k, self.classes);
        }
        self.encoder.validate()?;
        self.renderer.validate()?;
        self.warp.validate()?;
        self.parsing.validate()?;
        let r = PoseEncoder::REDUCTION;
        if self.height % r != 0 || self.width % r != 0 || self.height == 0 || self.width == 0 {
            bail_invalid!("resolution {}x{} must be a positive multiple of {r}", self.height, self.width);
        }
        if self.encoder.attribute_reduction() != r {
            bail_invalid!("attribute path reduces by {}, pose path by {r}", self.encoder.attribute_reduction());
        }
        if self.renderer.total_upsampling() != r {
            bail_invalid!("renderer upsamples by {}, latent grid needs {r}", self.renderer.total_upsampling());
        }
        if self.discriminator.base_channels == 0 {
            bail_invalid!("discriminator base_channels must be positive");
        }
        Ok(())
    }

    /// `(c, h, w)` of the shared latent grid.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let r = PoseEncoder::REDUCTION;
        (self.encoder.latent_channels, self.height / r, self.width / r)
    }
}

/// Ablation switches; all on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Include the target semantic map in the pose representation.
    pub use_parsing: bool,
    /// Feed the pose feature to the renderer; otherwise a learned constant.
    pub use_pose_feature: bool,
    /// Train with adversarial and feature-matching terms.
    pub use_gan_loss: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_parsing: true,
            use_pose_feature: true,
            use_gan_loss: true,
        }
    }
}

/// Batched generator inputs, all `[N, ·, H, W]`.
#[derive(Debug, Clone)]
pub struct GeneratorInputs {
    pub source_image: Tensor,
    pub source_masks: Tensor,
    pub target_pose: Tensor,
    /// Ground truth during training, predicted at test time; ignored without parsing.
    pub target_masks: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: Tensor,
    pub pose_feature: LatentFeature,
    pub warped: LatentFeature,
    pub correspondence: CorrespondenceMatrix,
}

/// Attribute codes of one person from both attribute encoders.
#[derive(Debug, Clone)]
pub struct PersonCodes {
    pub matching: AttributeCodeSet,
    pub appearance: AttributeCodeSet,
}

pub struct Generator {
    pose: PoseEncoder,
    /// Produces `f_s`, correlated against the pose feature.
    attr_match: AttributeEncoder,
    /// Produces `f̄_s`, the feature that gets warped.
    attr_warp: AttributeEncoder,
    renderer: Renderer,
    constant: Option<Tensor>,
    cfg: ModelConfig,
    ablations: Ablations,
}

impl Generator {
    pub fn new(scope: &Scope, cfg: &ModelConfig, ablations: Ablations) -> Result<Self> {
        cfg.validate()?;
        let sn = cfg.spectral_norm;
        let pose_in = NUM_JOINTS + if ablations.use_parsing { cfg.classes } else { 0 };
        let (c, h, w) = cfg.latent_shape();
        let constant = if ablations.use_pose_feature {
            None
        } else {
            Some(scope.param("const_input", &[1, c, h, w], Init::Normal { std: 1.0 })?.as_tensor().clone())
        };
        Ok(Self {
            pose: PoseEncoder::new(&scope.pp("pose_enc"), pose_in, &cfg.encoder, sn)?,
            attr_match: AttributeEncoder::new(&scope.pp("attr_enc"), cfg.classes, &cfg.encoder, sn)?,
            attr_warp: AttributeEncoder::new(&scope.pp("attr_enc_bar"), cfg.classes, &cfg.encoder, sn)?,
            renderer: Renderer::new(&scope.pp("renderer"), c, &cfg.renderer, sn)?,
            constant,
            cfg: cfg.clone(),
            ablations,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ablations(&self) -> Ablations {
        self.ablations
    }

    fn check(&self, inputs: &GeneratorInputs) -> Result<usize> {
        let (n, _, h, w) = inputs.source_image.dims4()?;
        if (h, w) != (self.cfg.height, self.cfg.width) {
            bail_invalid!("generator built for {}x{}, got {h}x{w}", self.cfg.height, self.cfg.width);
        }
        let k = self.cfg.classes;
        let mut expect = vec![
            ("source image", &inputs.source_image, 3),
            ("source masks", &inputs.source_masks, k),
            ("target pose", &inputs.target_pose, NUM_JOINTS),
        ];
        if self.ablations.use_parsing {
            match &inputs.target_masks {
                Some(t) => expect.push(("target masks", t, k)),
                None => bail_invalid!("the parsing-conditioned generator needs target masks"),
            }
        }
        for (name, t, c) in expect {
            if t.dims() != [n, c, h, w] {
                bail_invalid!("{name} has shape {:?}, expected {:?}", t.dims(), [n, c, h, w]);
            }
        }
        Ok(n)
    }

    pub fn encode_pose(&self, target_pose: &Tensor, target_masks: Option<&Tensor>) -> Result<LatentFeature> {
        match (self.ablations.use_parsing, target_masks) {
            (true, Some(m)) => self.pose.forward(&Tensor::cat(&[target_pose, m], 1)?),
            (true, None) => bail_invalid!("the parsing-conditioned generator needs target masks"),
            (false, _) => self.pose.forward(target_pose),
        }
    }

    pub fn encode_person(&self, image: &Tensor, masks: &Tensor) -> Result<PersonCodes> {
        Ok(PersonCodes {
            matching: self.attr_match.encode_codes(image, masks)?,
            appearance: self.attr_warp.encode_codes(image, masks)?,
        })
    }

    /// Correlates, warps and renders from already-encoded pieces.
    pub fn synthesize(&self, pose_feature: &LatentFeature, codes: &PersonCodes) -> Result<GeneratorOutput> {
        let f_s = self.attr_match.fuse(&codes.matching)?;
        let f_bar = self.attr_warp.fuse(&codes.appearance)?;
        let correspondence = correlation_matrix(pose_feature, &f_s)?;
        let warped = warp(&correspondence, &f_bar, &self.cfg.warp)?;
        let base = match &self.constant {
            Some(c) => c.broadcast_as(pose_feature.tensor().shape())?.contiguous()?,
            None => pose_feature.tensor().clone(),
        };
        let image = self.renderer.render(&base, warped.tensor())?;
        Ok(GeneratorOutput {
            image,
            pose_feature: pose_feature.clone(),
            warped,
            correspondence,
        })
    }

    pub fn forward(&self, inputs: &GeneratorInputs) -> Result<GeneratorOutput> {
        self.check(inputs)?;
        let f_p = self.encode_pose(&inputs.target_pose, inputs.target_masks.as_ref())?;
        let codes = self.encode_person(&inputs.source_image, &inputs.source_masks)?;
        self.synthesize(&f_p, &codes)
    }

    /// Renders `inputs` with attribute `attribute` taken from the donor.
    pub fn forward_swapped(
        &self,
        inputs: &GeneratorInputs,
        donor_image: &Tensor,
        donor_masks: &Tensor,
        attribute: usize,
    ) -> Result<GeneratorOutput> {
        self.check(inputs)?;
        if attribute >= self.cfg.classes {
            bail_invalid!("attribute index {attribute} out of range 0..{}", self.cfg.classes);
        }
        if donor_image.dims() != inputs.source_image.dims() || donor_masks.dims() != inputs.source_masks.dims() {
            bail_invalid!("donor inputs must match the source inputs in shape");
        }
        let f_p = self.encode_pose(&inputs.target_pose, inputs.target_masks.as_ref())?;
        let own = self.encode_person(&inputs.source_image, &inputs.source_masks)?;
        let donor = self.encode_person(donor_image, donor_masks)?;
        let codes = PersonCodes {
            matching: swap_attribute(&own.matching, &donor.matching, attribute)?,
            appearance: swap_attribute(&own.appearance, &donor.appearance, attribute)?,
        };
        self.synthesize(&f_p, &codes)
    }
}

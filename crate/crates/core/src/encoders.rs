//! Pose encoder and decomposed attribute encoder, both landing in the same
//! `[c, H/16, W/16]` latent grid.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Result};
use crate::nn::{instance_norm, leaky_relu, Conv2d, Conv2dConfig, Scope};

/// A `[N, c, h, w]` feature grid in the shared latent domain.
#[derive(Debug, Clone)]
pub struct LatentFeature(Tensor);

impl LatentFeature {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            bail_invalid!("latent features are rank 4 [N, c, h, w], got {:?}", t.dims());
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// `(c, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[1], d[2], d[3])
    }
}

/// Per-attribute texture codes `f_s^i`, before fusion.
#[derive(Debug, Clone)]
pub struct AttributeCodeSet {
    codes: Vec<Tensor>,
}

impl AttributeCodeSet {
    pub fn new(codes: Vec<Tensor>) -> Result<Self> {
        let Some(first) = codes.first() else {
            bail_invalid!("an attribute code set needs at least one code");
        };
        if codes.iter().any(|c| c.dims() != first.dims()) {
            bail_invalid!("attribute codes must share one shape");
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[Tensor] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &Tensor {
        &self.codes[i]
    }
}

/// Returns `a` with its `i`-th code taken from `b`.
pub fn swap_attribute(a: &AttributeCodeSet, b: &AttributeCodeSet, i: usize) -> Result<AttributeCodeSet> {
    if a.len() != b.len() {
        bail_invalid!("code sets hold {} and {} attributes", a.len(), b.len());
    }
    if i >= a.len() {
        bail_invalid!("attribute index {i} out of range 0..{}", a.len());
    }
    if a.code(i).dims() != b.code(i).dims() {
        bail_invalid!("attribute codes differ in shape");
    }
    let mut codes = a.codes.clone();
    codes[i] = b.codes[i].clone();
    Ok(AttributeCodeSet { codes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Shared-domain channel count `c`.
    pub latent_channels: usize,
    /// Per-attribute code width `c_a`.
    pub attribute_channels: usize,
    /// Width of the first pose-encoder layer; doubled at each of the next two.
    pub pose_base_channels: usize,
    /// Width of the first texture-encoder layer.
    pub texture_base_channels: usize,
    pub fusion_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 128,
            attribute_channels: 32,
            pose_base_channels: 32,
            texture_base_channels: 16,
            fusion_stride: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels < 2 {
            bail_invalid!("latent_channels must be at least 2");
        }
        if self.attribute_channels == 0 || self.pose_base_channels == 0 || self.texture_base_channels == 0 {
            bail_invalid!("encoder widths must be positive");
        }
        if !matches!(self.fusion_stride, 1 | 2) {
            bail_invalid!("fusion_stride must be 1 or 2, got {}", self.fusion_stride);
        }
        Ok(())
    }

    /// Total spatial reduction of the attribute path.
    pub fn attribute_reduction(&self) -> usize {
        8 * self.fusion_stride
    }
}

/// Four stride-2 convolutions from the pose representation to `f_p`.
pub struct PoseEncoder {
    convs: Vec<Conv2d>,
}

impl PoseEncoder {
    pub const REDUCTION: usize = 16;

    pub fn new(scope: &Scope, in_channels: usize, cfg: &EncoderConfig, spectral_norm: bool) -> Result<Self> {
        let b = cfg.pose_base_channels;
        let widths = [in_channels, b, 2 * b, 4 * b, cfg.latent_channels];
        let convs = (0..4)
            .map(|i| Conv2d::new(&scope.pp(format!("down{i}")), widths[i], widths[i + 1], Conv2dConfig::k3s2(spectral_norm)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    /// `x` is the channel concatenation of pose heatmaps and (optionally) target masks.
    pub fn forward(&self, x: &Tensor) -> Result<LatentFeature> {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = leaky_relu(&instance_norm(&h)?)?;
            }
        }
        LatentFeature::new(h)
    }

    pub fn architecture(&self) -> Vec<String> {
        describe(&self.convs)
    }
}

/// Texture encoder shared by every attribute: three stride-2 convolutions. It is
/// deliberately normalization-free so that flat part colors survive encoding.
pub struct TextureEncoder {
    convs: Vec<Conv2d>,
}

impl TextureEncoder {
    pub fn new(scope: &Scope, cfg: &EncoderConfig, spectral_norm: bool) -> Result<Self> {
        let b = cfg.texture_base_channels;
        let widths = [3, b, 2 * b, cfg.attribute_channels];
        let convs = (0..3)
            .map(|i| Conv2d::new(&scope.pp(format!("down{i}")), widths[i], widths[i + 1], Conv2dConfig::k3s2(spectral_norm)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        Ok(h)
    }

    pub fn architecture(&self) -> Vec<String> {
        describe(&self.convs)
    }
}

/// Convolutional fusion of the concatenated attribute codes.
pub struct FusionHead {
    down: Conv2d,
    out: Conv2d,
    classes: usize,
}

impl FusionHead {
    pub fn new(scope: &Scope, classes: usize, cfg: &EncoderConfig, spectral_norm: bool) -> Result<Self> {
        let down_cfg = Conv2dConfig {
            stride: cfg.fusion_stride,
            ..Conv2dConfig::k3(spectral_norm)
        };
        Ok(Self {
            down: Conv2d::new(&scope.pp("down"), classes * cfg.attribute_channels, cfg.latent_channels, down_cfg)?,
            out: Conv2d::new(&scope.pp("out"), cfg.latent_channels, cfg.latent_channels, Conv2dConfig::k3(spectral_norm))?,
            classes,
        })
    }

    pub fn forward(&self, codes: &AttributeCodeSet) -> Result<LatentFeature> {
        if codes.len() != self.classes {
            bail_invalid!("fusion expects {} attribute codes, got {}", self.classes, codes.len());
        }
        let x = Tensor::cat(codes.codes(), 1)?;
        let h = leaky_relu(&self.down.forward(&x)?)?;
        LatentFeature::new(self.out.forward(&h)?)
    }

    pub fn architecture(&self) -> Vec<String> {
        describe(&[self.down.clone(), self.out.clone()])
    }
}

/// Mask-decompose, encode each part with the shared texture encoder, then fuse.
pub struct AttributeEncoder {
    texture: TextureEncoder,
    fusion: FusionHead,
    classes: usize,
}

impl AttributeEncoder {
    pub fn new(scope: &Scope, classes: usize, cfg: &EncoderConfig, spectral_norm: bool) -> Result<Self> {
        Ok(Self {
            texture: TextureEncoder::new(&scope.pp("texture"), cfg, spectral_norm)?,
            fusion: FusionHead::new(&scope.pp("fusion"), classes, cfg, spectral_norm)?,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `image` is `[N, 3, H, W]`, `masks` is `[N, K, H, W]`.
    pub fn encode_codes(&self, image: &Tensor, masks: &Tensor) -> Result<AttributeCodeSet> {
        let (n, c, h, w) = image.dims4()?;
        let (mn, k, mh, mw) = masks.dims4()?;
        if c != 3 || mn != n || mh != h || mw != w {
            bail_invalid!("image {:?} and masks {:?} are incompatible", image.dims(), masks.dims());
        }
        if k != self.classes {
            bail_invalid!("encoder built for {} attributes, masks have {k}", self.classes);
        }
        // All K masked copies go through the shared encoder as one batch.
        let parts = image
            .unsqueeze(1)?
            .broadcast_mul(&masks.unsqueeze(2)?)?
            .reshape((n * k, 3, h, w))?;
        let encoded = self.texture.forward(&parts)?;
        let (_, ca, hh, ww) = encoded.dims4()?;
        let encoded = encoded.reshape((n, k, ca, hh, ww))?;
        let codes = (0..k)
            .map(|i| Ok(encoded.narrow(1, i, 1)?.squeeze(1)?))
            .collect::<Result<Vec<_>>>()?;
        AttributeCodeSet::new(codes)
    }

    pub fn fuse(&self, codes: &AttributeCodeSet) -> Result<LatentFeature> {
        self.fusion.forward(codes)
    }

    pub fn encode(&self, image: &Tensor, masks: &Tensor) -> Result<(AttributeCodeSet, LatentFeature)> {
        let codes = self.encode_codes(image, masks)?;
        let fused = self.fuse(&codes)?;
        Ok((codes, fused))
    }

    pub fn architecture(&self) -> Vec<String> {
        let mut a = self.texture.architecture();
        a.extend(self.fusion.architecture());
        a
    }
}

fn describe(convs: &[Conv2d]) -> Vec<String> {
    convs
        .iter()
        .map(|c| {
            let g = c.geometry();
            format!("conv{}x{}/s{} {}->{}", g.kernel, g.kernel, g.stride, c.in_channels(), c.out_channels())
        })
        .collect()
}

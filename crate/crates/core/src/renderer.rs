//! Texture renderer: SPADE-style residual blocks with instance normalization,
//! starting from the pose feature and modulated by the warped source feature.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Result};
use crate::nn::{instance_norm, leaky_relu, resize_nearest, upsample_nearest, Conv2d, Conv2dConfig, Init, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpadeInBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels of the modulation input.
    pub modulation_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub num_blocks: usize,
    pub upsample_factor_per_block: usize,
    /// Output width of each residual block.
    pub block_channels: Vec<usize>,
    /// Hidden width of the γ/β branch.
    pub modulation_hidden: usize,
    /// Start γ and β at exactly zero, making every block an unmodulated residual block.
    pub zero_init_modulation: bool,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            upsample_factor_per_block: 2,
            block_channels: vec![128, 64, 32],
            modulation_hidden: 32,
            zero_init_modulation: false,
        }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            bail_invalid!("renderer needs at least one block");
        }
        if self.upsample_factor_per_block != 2 {
            bail_invalid!("upsample_factor_per_block must be 2");
        }
        if self.block_channels.len() != self.num_blocks {
            bail_invalid!(
                "block_channels lists {} widths for {} blocks",
                self.block_channels.len(),
                self.num_blocks
            );
        }
        if self.block_channels.iter().any(|&c| c == 0) || self.modulation_hidden == 0 {
            bail_invalid!("renderer widths must be positive");
        }
        Ok(())
    }

    /// Spatial growth from the latent grid to the output image, head included.
    pub fn total_upsampling(&self) -> usize {
        self.upsample_factor_per_block.pow(self.num_blocks as u32 + 1)
    }
}

/// Spatially-adaptive instance normalization: `(1 + γ(m)) ⊙ IN(x) + β(m)`.
pub struct SpadeIn {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
    channels: usize,
    modulation_channels: usize,
}

impl SpadeIn {
    pub fn new(scope: &Scope, channels: usize, modulation_channels: usize, hidden: usize, zero_init: bool) -> Result<Self> {
        let head = if zero_init {
            Conv2dConfig::k3(false).with_init(Init::Zeros)
        } else {
            Conv2dConfig::k3(false).with_init(Init::Normal { std: 0.02 })
        };
        Ok(Self {
            shared: Conv2d::new(&scope.pp("shared"), modulation_channels, hidden, Conv2dConfig::k3(false))?,
            gamma: Conv2d::new(&scope.pp("gamma"), hidden, channels, head)?,
            beta: Conv2d::new(&scope.pp("beta"), hidden, channels, head)?,
            channels,
            modulation_channels,
        })
    }

    pub fn forward(&self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.channels {
            bail_invalid!("modulated tensor has {c} channels, block expects {}", self.channels);
        }
        if m.dim(1)? != self.modulation_channels {
            bail_invalid!(
                "modulation input has {} channels, block expects {}",
                m.dim(1)?,
                self.modulation_channels
            );
        }
        let m = resize_nearest(m, (h, w))?;
        let hidden = leaky_relu(&self.shared.forward(&m)?)?;
        let gamma = self.gamma.forward(&hidden)?;
        let beta = self.beta.forward(&hidden)?;
        Ok(((gamma + 1.0)? * instance_norm(x)?)?.add(&beta)?)
    }
}

/// Free-function form of [`SpadeIn::forward`].
pub fn spade_in_modulate(block: &SpadeIn, x: &Tensor, m: &Tensor) -> Result<Tensor> {
    block.forward(x, m)
}

/// Residual block whose normalizations are all modulated by the same input.
pub struct SpadeInResBlock {
    norm_0: SpadeIn,
    conv_0: Conv2d,
    norm_1: SpadeIn,
    conv_1: Conv2d,
    shortcut: Option<(SpadeIn, Conv2d)>,
    cfg: SpadeInBlockConfig,
}

impl SpadeInResBlock {
    pub fn new(scope: &Scope, cfg: SpadeInBlockConfig, hidden: usize, zero_init: bool, spectral_norm: bool) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.out_channels == 0 || cfg.modulation_channels == 0 {
            bail_invalid!("block channel counts must be positive: {cfg:?}");
        }
        let mid = cfg.in_channels.min(cfg.out_channels);
        let m = cfg.modulation_channels;
        let shortcut = if cfg.in_channels != cfg.out_channels {
            let conv = Conv2dConfig {
                bias: false,
                ..Conv2dConfig::k1(spectral_norm)
            };
            Some((
                SpadeIn::new(&scope.pp("norm_s"), cfg.in_channels, m, hidden, zero_init)?,
                Conv2d::new(&scope.pp("conv_s"), cfg.in_channels, cfg.out_channels, conv)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm_0: SpadeIn::new(&scope.pp("norm_0"), cfg.in_channels, m, hidden, zero_init)?,
            conv_0: Conv2d::new(&scope.pp("conv_0"), cfg.in_channels, mid, Conv2dConfig::k3(spectral_norm))?,
            norm_1: SpadeIn::new(&scope.pp("norm_1"), mid, m, hidden, zero_init)?,
            conv_1: Conv2d::new(&scope.pp("conv_1"), mid, cfg.out_channels, Conv2dConfig::k3(spectral_norm))?,
            shortcut,
            cfg,
        })
    }

    pub fn config(&self) -> SpadeInBlockConfig {
        self.cfg
    }

    pub fn forward(&self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let skip = match &self.shortcut {
            Some((norm, conv)) => conv.forward(&norm.forward(x, m)?)?,
            None => x.clone(),
        };
        let dx = self.conv_0.forward(&leaky_relu(&self.norm_0.forward(x, m)?)?)?;
        let dx = self.conv_1.forward(&leaky_relu(&self.norm_1.forward(&dx, m)?)?)?;
        Ok((skip + dx)?)
    }
}

pub struct Renderer {
    blocks: Vec<SpadeInResBlock>,
    head_0: Conv2d,
    head_1: Conv2d,
    cfg: RendererConfig,
    latent_channels: usize,
}

impl Renderer {
    pub fn new(scope: &Scope, latent_channels: usize, cfg: &RendererConfig, spectral_norm: bool) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut in_channels = latent_channels;
        for (i, &out_channels) in cfg.block_channels.iter().enumerate() {
            let block_cfg = SpadeInBlockConfig {
                in_channels,
                out_channels,
                modulation_channels: latent_channels,
            };
            blocks.push(SpadeInResBlock::new(
                &scope.pp(format!("block{i}")),
                block_cfg,
                cfg.modulation_hidden,
                cfg.zero_init_modulation,
                spectral_norm,
            )?);
            in_channels = out_channels;
        }
        Ok(Self {
            blocks,
            head_0: Conv2d::new(&scope.pp("head_0"), in_channels, in_channels, Conv2dConfig::k3(spectral_norm))?,
            head_1: Conv2d::new(&scope.pp("head_1"), in_channels, 3, Conv2dConfig::k3(spectral_norm))?,
            cfg: cfg.clone(),
            latent_channels,
        })
    }

    pub fn config(&self) -> &RendererConfig {
        &self.cfg
    }

    /// Decodes `[N, 3, H, W]` in `(-1, 1)` from the pose feature `f_p`, with every block
    /// modulated by `f_warped`.
    pub fn render(&self, f_p: &Tensor, f_warped: &Tensor) -> Result<Tensor> {
        if f_p.dims() != f_warped.dims() {
            bail_invalid!("pose feature {:?} and warped feature {:?} differ", f_p.dims(), f_warped.dims());
        }
        if f_p.dim(1)? != self.latent_channels {
            bail_invalid!("renderer expects {} latent channels, got {}", self.latent_channels, f_p.dim(1)?);
        }
        let factor = self.cfg.upsample_factor_per_block;
        let mut h = f_p.clone();
        for block in &self.blocks {
            h = upsample_nearest(&block.forward(&h, f_warped)?, factor)?;
        }
        let h = upsample_nearest(&h, factor)?;
        let h = leaky_relu(&self.head_0.forward(&h)?)?;
        Ok(self.head_1.forward(&h)?.tanh()?)
    }
}

//! U-Net that predicts the target-pose semantic map from the source image, source parse
//! and both pose heatmaps.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{SemanticMaskSet, DEFAULT_CLASSES, NUM_JOINTS};
use crate::error::{bail_invalid, Result};
use crate::nn::{instance_norm, leaky_relu, softmax_channels, upsample_nearest, Conv2d, Conv2dConfig, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParsingNetConfig {
    pub base_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
    #[serde(rename = "classes")]
    pub k: usize,
    pub spectral_norm: bool,
}

impl Default for ParsingNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            k: DEFAULT_CLASSES,
            spectral_norm: true,
        }
    }
}

impl ParsingNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            bail_invalid!("parsing depth must be at least 2, got {}", self.depth);
        }
        if self.base_channels < 8 {
            bail_invalid!("parsing base_channels must be at least 8, got {}", self.base_channels);
        }
        if self.k < 2 {
            bail_invalid!("parsing needs at least two classes");
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        3 + self.k + 2 * NUM_JOINTS
    }
}

#[derive(Debug, Clone)]
pub struct ParsingPrediction {
    /// `[N, K, H, W]`.
    pub logits: Tensor,
    /// Channel softmax of `logits`.
    pub probabilities: Tensor,
}

impl ParsingPrediction {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.rank() != 4 {
            bail_invalid!("parsing logits are [N, K, H, W], got {:?}", logits.dims());
        }
        let probabilities = softmax_channels(&logits)?;
        Ok(Self { logits, probabilities })
    }

    /// Per-sample hard maps: argmax over classes, re-one-hotted.
    pub fn hard_masks(&self) -> Result<Vec<SemanticMaskSet>> {
        let n = self.logits.dim(0)?;
        (0..n)
            .map(|i| SemanticMaskSet::from_scores(&self.probabilities.get(i)?))
            .collect()
    }

    /// Hard maps as an `[N, K, H, W]` tensor.
    pub fn hard_tensor(&self) -> Result<Tensor> {
        let masks = self
            .hard_masks()?
            .iter()
            .map(|m| m.to_tensor(self.logits.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&masks, 0)?.to_device(self.logits.device())?)
    }
}

/// Mean absolute difference between probabilities and one-hot targets over every
/// `K·H·W` entry.
pub fn parsing_loss(pred: &ParsingPrediction, target: &Tensor) -> Result<Tensor> {
    if pred.probabilities.dims() != target.dims() {
        bail_invalid!(
            "prediction {:?} and target {:?} differ in shape",
            pred.probabilities.dims(),
            target.dims()
        );
    }
    Ok((&pred.probabilities - target)?.abs()?.mean_all()?)
}

struct Stage {
    conv: Conv2d,
}

impl Stage {
    fn new(scope: &Scope, in_c: usize, out_c: usize, stride: usize, sn: bool) -> Result<Self> {
        let cfg = Conv2dConfig {
            stride,
            ..Conv2dConfig::k3(sn)
        };
        Ok(Self {
            conv: Conv2d::new(scope, in_c, out_c, cfg)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        leaky_relu(&instance_norm(&self.conv.forward(x)?)?)
    }
}

pub struct ParsingNet {
    stem: Stage,
    down: Vec<Stage>,
    up: Vec<Stage>,
    head: Conv2d,
    cfg: ParsingNetConfig,
}

impl ParsingNet {
    pub fn new(scope: &Scope, cfg: &ParsingNetConfig) -> Result<Self> {
        cfg.validate()?;
        let sn = cfg.spectral_norm;
        let width = |level: usize| cfg.base_channels << level;
        let stem = Stage::new(&scope.pp("stem"), cfg.in_channels(), width(0), 1, sn)?;
        let down = (0..cfg.depth)
            .map(|l| Stage::new(&scope.pp(format!("down{l}")), width(l), width(l + 1), 2, sn))
            .collect::<Result<Vec<_>>>()?;
        // up[l] takes level l+1 upsampled, concatenated with the level-l skip.
        let up = (0..cfg.depth)
            .map(|l| Stage::new(&scope.pp(format!("up{l}")), width(l + 1) + width(l), width(l), 1, sn))
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(&scope.pp("head"), width(0), cfg.k, Conv2dConfig::k3(sn))?;
        Ok(Self {
            stem,
            down,
            up,
            head,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &ParsingNetConfig {
        &self.cfg
    }

    /// All inputs are batched `[N, ·, H, W]` tensors.
    pub fn forward(&self, image: &Tensor, masks: &Tensor, pose_s: &Tensor, pose_t: &Tensor) -> Result<ParsingPrediction> {
        let (n, _, h, w) = image.dims4()?;
        for (name, t, c) in [
            ("image", image, 3),
            ("source masks", masks, self.cfg.k),
            ("source pose", pose_s, NUM_JOINTS),
            ("target pose", pose_t, NUM_JOINTS),
        ] {
            if t.dims() != [n, c, h, w] {
                bail_invalid!("{name} has shape {:?}, expected {:?}", t.dims(), [n, c, h, w]);
            }
        }
        let f = 1 << self.cfg.depth;
        if h % f != 0 || w % f != 0 {
            bail_invalid!("parsing input {h}x{w} must be divisible by {f}");
        }
        let x = Tensor::cat(&[image, masks, pose_s, pose_t], 1)?;
        let mut skips = vec![self.stem.forward(&x)?];
        for stage in &self.down {
            let next = stage.forward(skips.last().unwrap())?;
            skips.push(next);
        }
        let mut x = skips.pop().unwrap();
        for (l, stage) in self.up.iter().enumerate().rev() {
            x = stage.forward(&Tensor::cat(&[&upsample_nearest(&x, 2)?, &skips[l]], 1)?)?;
        }
        ParsingPrediction::from_logits(self.head.forward(&x)?)
    }
}

/// Free-function form of [`ParsingNet::forward`].
pub fn predict_target_parsing(
    net: &ParsingNet,
    image: &Tensor,
    masks: &Tensor,
    pose_s: &Tensor,
    pose_t: &Tensor,
) -> Result<ParsingPrediction> {
    net.forward(image, masks, pose_s, pose_t)
}

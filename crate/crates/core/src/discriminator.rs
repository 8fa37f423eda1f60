//! Patch discriminator with three spectrally normalized down-sampling layers.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Result};
use crate::nn::{leaky_relu, Conv2d, Conv2dConfig, Scope};

pub const NUM_FEATURE_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Activations after each down-sampling layer.
    pub features: Vec<Tensor>,
    /// Patch logits `[N, 1, h, w]`.
    pub score: Tensor,
}

impl DiscriminatorOutput {
    pub fn detach(&self) -> Self {
        Self {
            features: self.features.iter().map(Tensor::detach).collect(),
            score: self.score.detach(),
        }
    }
}

pub struct Discriminator {
    down: Vec<Conv2d>,
    out: Conv2d,
    height: usize,
    width: usize,
}

impl Discriminator {
    pub fn new(scope: &Scope, cfg: &DiscriminatorConfig, height: usize, width: usize) -> Result<Self> {
        if cfg.base_channels == 0 {
            bail_invalid!("discriminator base_channels must be positive");
        }
        if height % 8 != 0 || width % 8 != 0 {
            bail_invalid!("discriminator input {height}x{width} must be divisible by 8");
        }
        let b = cfg.base_channels;
        let widths = [3, b, 2 * b, 4 * b];
        let down = (0..NUM_FEATURE_LAYERS)
            .map(|i| Conv2d::new(&scope.pp(format!("down{i}")), widths[i], widths[i + 1], Conv2dConfig::k4s2(true)))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(&scope.pp("out"), 4 * b, 1, Conv2dConfig::k3(true))?;
        Ok(Self { down, out, height, width })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.down.iter().chain(std::iter::once(&self.out))
    }

    pub fn forward(&self, image: &Tensor) -> Result<DiscriminatorOutput> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != self.height || w != self.width {
            bail_invalid!(
                "discriminator built for [3, {}, {}], got {:?}",
                self.height,
                self.width,
                &image.dims()[1..]
            );
        }
        let mut features = Vec::with_capacity(NUM_FEATURE_LAYERS);
        let mut x = image.clone();
        for conv in &self.down {
            x = leaky_relu(&conv.forward(&x)?)?;
            features.push(x.clone());
        }
        let score = self.out.forward(&x)?;
        Ok(DiscriminatorOutput { features, score })
    }
}

/// Free-function form of [`Discriminator::forward`].
pub fn discriminate(d: &Discriminator, image: &Tensor) -> Result<DiscriminatorOutput> {
    d.forward(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    /// Largest singular value by many power iterations in plain f64.
    pub(crate) fn top_singular_value(w: &Tensor) -> f64 {
        let rows = w.dim(0).unwrap();
        let m: Vec<f64> = w.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        let cols = m.len() / rows;
        let mut v = vec![1.0f64; cols];
        let mut sigma = 0.0;
        for _ in 0..500 {
            let u: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum()).collect();
            let nv: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| m[r * cols + c] * u[r]).sum()).collect();
            let norm = nv.iter().map(|a| a * a).sum::<f64>().sqrt();
            sigma = norm.sqrt();
            v = nv.iter().map(|a| a / norm).collect();
        }
        sigma
    }

    #[test]
    fn feature_shapes_and_self_distance() -> Result<()> {
        let store = ParamStore::new(0, DType::F32);
        let d = Discriminator::new(&store.root(), &DiscriminatorConfig::default(), 64, 48)?;
        let img = Tensor::rand(-1f32, 1.0, (2, 3, 64, 48), &Device::Cpu)?;
        let out = discriminate(&d, &img)?;
        let sizes: Vec<_> = out.features.iter().map(|f| (f.dim(2).unwrap(), f.dim(3).unwrap())).collect();
        assert_eq!(sizes, vec![(32, 24), (16, 12), (8, 6)]);
        assert_eq!(out.score.dims(), &[2, 1, 8, 6]);
        let again = d.forward(&img)?;
        for (a, b) in out.features.iter().zip(&again.features) {
            assert_eq!((a - b)?.abs()?.sum_all()?.to_scalar::<f32>()?, 0.0);
        }
        assert!(d.forward(&Tensor::zeros((1, 3, 32, 48), DType::F32, &Device::Cpu)?).is_err());
        Ok(())
    }

    #[test]
    fn effective_weights_have_unit_spectral_norm() -> Result<()> {
        let store = ParamStore::new(9, DType::F32);
        let d = Discriminator::new(&store.root(), &DiscriminatorConfig { base_channels: 16 }, 64, 48)?;
        store.set_training(true);
        let img = Tensor::rand(-1f32, 1.0, (1, 3, 64, 48), &Device::Cpu)?;
        for _ in 0..3 {
            d.forward(&img)?;
        }
        for conv in d.convs() {
            let s = top_singular_value(&conv.effective_weight()?);
            assert!((s - 1.0).abs() < 0.05, "sigma {s}");
        }
        Ok(())
    }
}

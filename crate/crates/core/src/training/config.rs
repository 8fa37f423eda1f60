use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Ablations, ModelConfig};
use crate::losses::{AdversarialForm, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Learning rates stay constant up to this epoch, then decay linearly to zero.
    pub decay_start_epoch: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Learning rate of the parsing stage.
    pub lr_parsing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Clip the generator's global gradient norm to this value.
    pub grad_clip: Option<f64>,
    /// Train on each pair in both directions (source to target and back).
    pub both_directions: bool,
    /// Also train the parsing stage on each image paired with itself.
    pub parsing_self_pairs: bool,
    pub heatmap_sigma: f32,
    pub adversarial: AdversarialForm,
    pub ablations: Ablations,
    pub losses: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            decay_start_epoch: 15,
            batch_size: 4,
            lr_g: 2e-4,
            lr_d: 3e-4,
            lr_parsing: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            max_steps: None,
            grad_clip: None,
            both_directions: true,
            parsing_self_pairs: true,
            heatmap_sigma: crate::data::DEFAULT_SIGMA,
            adversarial: AdversarialForm::default(),
            ablations: Ablations::default(),
            losses: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.epochs == 0 || self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return bad(format!(
                "need 0 < decay_start_epoch ({}) <= epochs ({})",
                self.decay_start_epoch, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_parsing", self.lr_parsing)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(self.heatmap_sigma > 0.0) {
            return bad("heatmap_sigma must be positive".into());
        }
        self.losses.validate().map_err(|e| Error::config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    /// Loss weights with the adversarial and feature-matching terms removed when the
    /// GAN ablation is active.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.losses;
        if !self.ablations.use_gan_loss {
            w.lambda_adv = 0.0;
            w.lambda_fea = 0.0;
        }
        w
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.model.height, self.model.width)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Applies `key.path=value` overrides. Values are read as TOML literals, falling back
    /// to bare strings; unknown keys are configuration errors.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            set_path(&mut root, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("empty override key `{key}`")))?;
    let mut table = root;
    for part in parts {
        table = match table.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        };
    }
    // Optional fields are absent from the serialized form; the typed round trip rejects
    // names that do not exist.
    if let Some(toml::Value::Table(_)) = table.get(last) {
        return Err(Error::config(format!("`{key}` is a section, not a value")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() -> Result<()> {
        let cfg = TrainConfig::default();
        cfg.validate()?;
        let text = cfg.to_toml_string()?;
        assert_eq!(TrainConfig::from_toml_str(&text)?, cfg);
        assert_eq!(TrainConfig::from_toml_str("")?, cfg);
        Ok(())
    }

    #[test]
    fn partial_file_keeps_defaults() -> Result<()> {
        let cfg = TrainConfig::from_toml_str("epochs = 4\ndecay_start_epoch = 2\n[model.encoder]\nlatent_channels = 64\n")?;
        assert_eq!(cfg.epochs, 4);
        assert_eq!(cfg.model.encoder.latent_channels, 64);
        assert_eq!(cfg.model.encoder.attribute_channels, 32);
        Ok(())
    }

    #[test]
    fn overrides() -> Result<()> {
        let cfg = TrainConfig::default().with_overrides(&[
            "lr_g=1e-3",
            "ablations.use_gan_loss=false",
            "max_steps=10",
            "model.perceptual.weights=/tmp/w.safetensors",
            "adversarial=non-saturating",
        ])?;
        assert_eq!(cfg.lr_g, 1e-3);
        assert!(!cfg.ablations.use_gan_loss);
        assert_eq!(cfg.max_steps, Some(10));
        assert_eq!(cfg.model.perceptual.weights.as_deref(), Some("/tmp/w.safetensors"));
        assert_eq!(cfg.adversarial, AdversarialForm::NonSaturating);
        assert_eq!(cfg.effective_weights().lambda_fea, 0.0);
        for bad in ["nope=1", "model.nope=1", "model=3", "lr_g", "epochs=0", "lr_g=\"fast\""] {
            assert!(matches!(TrainConfig::default().with_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
        }
        Ok(())
    }

    #[test]
    fn invalid_files_are_config_errors() {
        for text in ["epochs = 10\ndecay_start_epoch = 11", "lr_d = -1.0", "bogus = 1", "[model]\nclasses = 5"] {
            assert!(matches!(TrainConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}

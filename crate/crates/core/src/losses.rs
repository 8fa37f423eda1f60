//! Objective terms for generator and discriminator training, and the frozen feature
//! extractor used by the perceptual, contextual and correspondence terms.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorOutput;
use crate::error::{bail_invalid, Error, Result};
use crate::nn::{avg_pool2, conv2d, scalar, sigmoid, Init, ParamStore, PatchGeometry};

/// Floor applied inside every logarithm of a probability.
pub const LOG_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_fea: f64,
    pub lambda_rec: f64,
    pub lambda_per: f64,
    pub lambda_con: f64,
    pub lambda_cor: f64,
    /// Per-layer feature-matching weights.
    pub alpha: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_fea: 10.0,
            lambda_rec: 5.0,
            lambda_per: 10.0,
            lambda_con: 1.0,
            lambda_cor: 10.0,
            alpha: [1.0; 3],
        }
    }
}

impl LossWeights {
    fn lambdas(&self) -> [f64; 6] {
        [
            self.lambda_adv,
            self.lambda_fea,
            self.lambda_rec,
            self.lambda_per,
            self.lambda_con,
            self.lambda_cor,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all: Vec<f64> = self.lambdas().into_iter().chain(self.alpha).collect();
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            bail_invalid!("loss weights must be finite and non-negative");
        }
        if self.lambdas().iter().all(|&w| w == 0.0) {
            bail_invalid!("at least one loss weight must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// The generator minimizes `E[log(1 - D(G))]`.
    #[default]
    Saturating,
    /// The generator minimizes `-E[log D(G)]`.
    NonSaturating,
}

fn finite_or(term: &str, loss: Tensor) -> Result<Tensor> {
    if scalar(&loss)?.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence { term: term.to_string() })
    }
}

fn mean_log_clamped(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(LOG_CLAMP)?.log()?.mean_all()?)
}

pub fn adversarial_loss_g(fake_score: &Tensor, form: AdversarialForm) -> Result<Tensor> {
    let loss = match form {
        AdversarialForm::Saturating => mean_log_clamped(&sigmoid(&fake_score.neg()?)?)?,
        AdversarialForm::NonSaturating => mean_log_clamped(&sigmoid(fake_score)?)?.neg()?,
    };
    finite_or("adv", loss)
}

/// `-E[log D(real)] - E[log(1 - D(fake))]`.
pub fn adversarial_loss_d(real_score: &Tensor, fake_score: &Tensor) -> Result<Tensor> {
    let real = mean_log_clamped(&sigmoid(real_score)?)?;
    let fake = mean_log_clamped(&sigmoid(&fake_score.neg()?)?)?;
    finite_or("adv_d", (real + fake)?.neg()?)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        bail_invalid!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims());
    }
    Ok(())
}

pub fn mean_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "L1 distance")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `Σ_i α_i · mean|D_i(fake) - D_i(real)|`.
pub fn feature_matching_loss(fake: &DiscriminatorOutput, real: &DiscriminatorOutput, alpha: &[f64]) -> Result<Tensor> {
    if fake.features.len() != real.features.len() || fake.features.len() != alpha.len() {
        bail_invalid!(
            "feature matching over {} and {} layers with {} weights",
            fake.features.len(),
            real.features.len(),
            alpha.len()
        );
    }
    let mut total = Tensor::zeros((), fake.score.dtype(), fake.score.device())?;
    for ((f, r), &a) in fake.features.iter().zip(&real.features).zip(alpha) {
        if a != 0.0 {
            total = (total + (mean_l1(f, r)? * a)?)?;
        }
    }
    finite_or("fea", total)
}

pub fn reconstruction_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    finite_or("rec", mean_l1(generated, target)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    pub seed: u64,
    /// Widths of the four convolution stages.
    pub channels: Vec<usize>,
    /// Optional safetensors file with `conv{i}.weight` / `conv{i}.bias` to use instead of
    /// the seeded weights.
    pub weights: Option<String>,
    pub perceptual_layer: String,
    pub contextual_layer: String,
    pub correspondence_layer: String,
    pub contextual_bandwidth: f64,
    pub contextual_eps: f64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            channels: vec![16, 32, 64, 128],
            weights: None,
            perceptual_layer: "relu2".into(),
            contextual_layer: "relu3".into(),
            correspondence_layer: "relu4".into(),
            contextual_bandwidth: 0.5,
            contextual_eps: 1e-5,
        }
    }
}

/// Fixed convolutional feature stack. Layer `relu1` keeps the input resolution and each
/// later layer halves it. Its weights are plain tensors, so no optimizer can touch them.
pub struct PerceptualExtractor {
    stages: Vec<(Tensor, Tensor, PatchGeometry)>,
    /// Fixed 1x1 projection to the latent width, built lazily per width.
    projection_seed: u64,
    projections: std::sync::Mutex<HashMap<(usize, usize), Tensor>>,
    dtype: DType,
}

const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

fn layer_index(name: &str) -> Result<usize> {
    match name {
        "input" => Ok(0),
        "relu1" => Ok(1),
        "relu2" => Ok(2),
        "relu3" => Ok(3),
        "relu4" => Ok(4),
        other => bail_invalid!("unknown feature layer `{other}` (expected input or relu1..relu4)"),
    }
}

impl PerceptualExtractor {
    pub fn new(cfg: &PerceptualConfig, dtype: DType) -> Result<Self> {
        for layer in [&cfg.perceptual_layer, &cfg.contextual_layer, &cfg.correspondence_layer] {
            layer_index(layer)?;
        }
        if !(cfg.contextual_bandwidth > 0.0) || !(cfg.contextual_eps > 0.0) {
            bail_invalid!("contextual bandwidth and epsilon must be positive");
        }
        let weights = match &cfg.weights {
            Some(path) => load_weights(Path::new(path), dtype)?,
            None => seeded_weights(cfg, dtype)?,
        };
        let stages = weights
            .into_iter()
            .zip(STAGE_STRIDES)
            .map(|((w, b), stride)| {
                let g = PatchGeometry {
                    kernel: w.dim(2)?,
                    stride,
                    padding: w.dim(2)? / 2,
                };
                let (o, i, k, _) = w.dims4()?;
                Ok((w.reshape((o, i * k * k))?, b, g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            projection_seed: cfg.seed ^ 0x9e37_79b9,
            projections: Default::default(),
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn channels(&self, layer: &str) -> Result<usize> {
        Ok(match layer_index(layer)? {
            0 => 3,
            i => self.stages[i - 1].0.dim(0)?,
        })
    }

    /// Activations of `[N, 3, H, W]` images at each requested layer.
    pub fn features(&self, image: &Tensor, layers: &[&str]) -> Result<Vec<Tensor>> {
        let idx = layers.iter().map(|l| layer_index(l)).collect::<Result<Vec<_>>>()?;
        let deepest = idx.iter().copied().max().unwrap_or(0);
        let mut acts = vec![image.clone()];
        for (w, b, g) in &self.stages[..deepest] {
            let x = conv2d(acts.last().unwrap(), w, Some(b), *g)?.relu()?;
            acts.push(x);
        }
        Ok(idx.into_iter().map(|i| acts[i].clone()).collect())
    }

    pub fn layer(&self, image: &Tensor, layer: &str) -> Result<Tensor> {
        Ok(self.features(image, &[layer])?.remove(0))
    }

    /// Brings layer features of shape `[N, C_l, H_l, W_l]` to the latent shape
    /// `[N, c, h, w]`: 2x2 average pooling until the grid matches, then the fixed 1x1
    /// projection.
    pub fn project_to_latent(&self, feat: &Tensor, (c, h, w): (usize, usize, usize)) -> Result<Tensor> {
        let mut x = feat.clone();
        loop {
            let (_, _, fh, fw) = x.dims4()?;
            if (fh, fw) == (h, w) {
                break;
            }
            if fh < h || fw < w || fh % 2 != 0 || fw % 2 != 0 {
                bail_invalid!("cannot pool a {fh}x{fw} feature grid down to {h}x{w}");
            }
            x = avg_pool2(&x)?;
        }
        let (n, cl, _, _) = x.dims4()?;
        let p = self.projection(cl, c, x.device())?;
        let flat = x.reshape((n, cl, h * w))?;
        Ok(p.broadcast_matmul(&flat)?.reshape((n, c, h, w))?)
    }

    fn projection(&self, from: usize, to: usize, device: &Device) -> Result<Tensor> {
        let mut cache = self.projections.lock().unwrap();
        if let Some(p) = cache.get(&(from, to)) {
            return Ok(p.clone());
        }
        let store = ParamStore::new(self.projection_seed, self.dtype);
        let p = store
            .root()
            .param("projection", &[to, from], Init::Normal { std: (1.0 / from as f64).sqrt() })?
            .as_tensor()
            .detach()
            .to_device(device)?;
        cache.insert((from, to), p.clone());
        Ok(p)
    }
}

fn seeded_weights(cfg: &PerceptualConfig, dtype: DType) -> Result<Vec<(Tensor, Tensor)>> {
    if cfg.channels.len() != 4 || cfg.channels.contains(&0) {
        bail_invalid!("perceptual extractor needs four positive stage widths");
    }
    let store = ParamStore::new(cfg.seed, dtype);
    let mut in_c = 3;
    let mut out = Vec::new();
    for (i, &c) in cfg.channels.iter().enumerate() {
        let s = store.root().pp(format!("conv{i}"));
        let w = s.param("weight", &[c, in_c, 3, 3], Init::Kaiming { fan_in: in_c * 9 })?;
        let b = s.param("bias", &[c], Init::Zeros)?;
        out.push((w.as_tensor().detach(), b.as_tensor().detach()));
        in_c = c;
    }
    Ok(out)
}

fn load_weights(path: &Path, dtype: DType) -> Result<Vec<(Tensor, Tensor)>> {
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::invalid(format!("cannot read feature weights {}: {e}", path.display())))?;
    let mut in_c = 3;
    let mut out = Vec::new();
    for i in 0..4 {
        let get = |name: String| {
            tensors
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("{} lacks `{name}`", path.display())))
        };
        let w = get(format!("conv{i}.weight"))?.to_dtype(dtype)?;
        let b = get(format!("conv{i}.bias"))?.to_dtype(dtype)?;
        let (o, ic, k, k2) = w.dims4()?;
        if ic != in_c || k != k2 || k % 2 == 0 || b.dims() != [o] {
            bail_invalid!("feature weights conv{i} have inconsistent shape {:?}", w.dims());
        }
        out.push((w, b));
        in_c = o;
    }
    Ok(out)
}

/// Mean L1 between extractor activations of the two images at `layer`.
pub fn perceptual_loss(generated: &Tensor, target: &Tensor, phi: &PerceptualExtractor, layer: &str) -> Result<Tensor> {
    check_same(generated, target, "perceptual loss")?;
    let g = phi.layer(generated, layer)?;
    let t = phi.layer(&target.detach(), layer)?;
    finite_or("per", mean_l1(&g, &t)?)
}

/// Contextual loss between two `[N, C, H, W]` (or `[N, C, P]`) feature sets, averaged
/// over the batch. Both sets are centered on the mean of `y`.
pub fn contextual_loss(x: &Tensor, y: &Tensor, bandwidth: f64, eps: f64) -> Result<Tensor> {
    let flat = |t: &Tensor| -> Result<Tensor> {
        let d = t.dims();
        if d.len() < 3 {
            bail_invalid!("contextual loss needs [N, C, ...] features, got {d:?}");
        }
        Ok(t.reshape((d[0], d[1], ()))?)
    };
    let (x, y) = (flat(x)?, flat(y)?);
    let (n, c, px) = x.dims3()?;
    let (ny, cy, py) = y.dims3()?;
    if n != ny || c != cy {
        bail_invalid!("contextual loss feature sets disagree: {:?} vs {:?}", x.dims(), y.dims());
    }
    if n == 0 || px == 0 || py == 0 || c == 0 {
        bail_invalid!("contextual loss needs non-empty feature sets");
    }
    let mu = y.mean_keepdim(2)?;
    let unit = |t: &Tensor| -> Result<Tensor> {
        let t = t.broadcast_sub(&mu)?;
        let norm = t.sqr()?.sum_keepdim(1)?.maximum(1e-16)?.sqrt()?;
        Ok(t.broadcast_div(&norm)?)
    };
    let (xn, yn) = (unit(&x)?, unit(&y)?);
    // d[i, j]: x position i against y position j.
    let dist = (1.0 - xn.transpose(1, 2)?.contiguous()?.matmul(&yn)?)?;
    let rel = dist.broadcast_div(&(dist.min_keepdim(2)? + eps)?)?;
    let w = ((1.0 - rel)? / bandwidth)?.exp()?;
    let cx = w.broadcast_div(&w.sum_keepdim(2)?)?;
    let score = cx.max(1)?.mean(D::Minus1)?;
    finite_or("con", score.maximum(LOG_CLAMP)?.log()?.neg()?.mean_all()?)
}

/// Mean L1 between the warped feature and the target's projected representation.
pub fn correspondence_loss(f_warped: &Tensor, target_repr: &Tensor) -> Result<Tensor> {
    finite_or("cor", mean_l1(f_warped, target_repr)?)
}

/// The six generator-side terms of the joint objective.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub adv: Tensor,
    pub fea: Tensor,
    pub rec: Tensor,
    pub per: Tensor,
    pub con: Tensor,
    pub cor: Tensor,
}

impl LossTerms {
    pub const NAMES: [&'static str; 6] = ["adv", "fea", "rec", "per", "con", "cor"];

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.adv, &self.fea, &self.rec, &self.per, &self.con, &self.cor]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    /// Recomputes the weighted sum from the stored terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        LossTerms::NAMES
            .iter()
            .zip(w.lambdas())
            .map(|(name, l)| l * self.terms.get(*name).copied().unwrap_or(0.0))
            .sum()
    }
}

/// Weighted objective to differentiate, plus its per-term report. Terms with a zero
/// weight are reported but left out of the graph.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let mut total: Option<Tensor> = None;
    let mut report = BTreeMap::new();
    let mut sum = 0.0;
    for ((name, t), lambda) in LossTerms::NAMES.iter().zip(terms.tensors()).zip(w.lambdas()) {
        let v = scalar(t)?;
        if !v.is_finite() {
            return Err(Error::Divergence { term: name.to_string() });
        }
        report.insert(name.to_string(), v);
        if lambda != 0.0 {
            sum += lambda * v;
            let weighted = (t * lambda)?;
            total = Some(match total {
                Some(acc) => (acc + weighted)?,
                None => weighted,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::zeros((), terms.rec.dtype(), terms.rec.device())?,
    };
    Ok((total, LossReport { total: sum, terms: report }))
}

//! The two training stages: the parsing network alone, then generator and
//! discriminator together.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::batch::{Batch, PreparedDataset};
use super::checkpoint::{Checkpoint, EpochMetrics, Stage};
use super::schedule::lr_at;
use super::TrainConfig;
use crate::data::TrainingPair;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, contextual_loss, correspondence_loss, feature_matching_loss, mean_l1,
    reconstruction_loss, total_loss, LossTerms, PerceptualExtractor,
};
use crate::nn::{all_finite, scalar, Adam, AdamConfig, ParamStore};
use crate::parsing::{parsing_loss, ParsingNet};

/// One JSON-lines record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    #[serde(flatten)]
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepMetrics>,
    /// Files written under the output directory, in order.
    pub written: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Directory for epoch checkpoints, the final checkpoint and the metrics log.
    pub out_dir: Option<&'a Path>,
    /// Continue from this checkpoint of the same stage.
    pub resume: Option<&'a Checkpoint>,
}

fn adam_cfg(cfg: &TrainConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: 1e-8,
    }
}

fn store_section(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.tensors().into_iter().collect()
}

fn opt_section(opt: &Adam, prefix: &str, steps: &mut BTreeMap<String, u64>) -> Vec<(String, Tensor)> {
    let (tensors, s) = opt.state();
    steps.extend(s.into_iter().map(|(k, v)| (format!("{prefix}/{k}"), v)));
    tensors.into_iter().collect()
}

fn restore_opt(opt: &mut Adam, ck: &Checkpoint, prefix: &str) -> Result<()> {
    let steps: BTreeMap<String, u64> = ck
        .optimizer_steps
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&format!("{prefix}/")).map(|n| (n.to_string(), *v)))
        .collect();
    opt.load_state(&ck.section(prefix), &steps)
}

/// Scales every gradient of `vars` so their global norm is at most `max_norm`.
fn clip_gradients(grads: &mut GradStore, vars: &[(String, candle_core::Var)], max_norm: f64) -> Result<()> {
    let mut sq = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, v) in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * s)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(())
}

struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn open(path: Option<PathBuf>, append: bool) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self(Some(BufWriter::new(file))))
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n").map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

fn epoch_means(epoch: usize, step: usize, records: &[StepMetrics]) -> EpochMetrics {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        for (k, v) in &r.losses {
            *sums.entry(k.clone()).or_default() += v;
        }
    }
    let n = records.len().max(1) as f64;
    EpochMetrics {
        epoch,
        step,
        losses: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
    }
}

/// Drives the shared epoch/step bookkeeping for both stages.
fn run_loop<T: StageTrainer>(
    trainer: &mut T,
    data: &PreparedDataset,
    cfg: &TrainConfig,
    opts: RunOptions,
) -> Result<TrainOutput> {
    let name = trainer.name();
    let steps_per_epoch = data.steps_per_epoch(cfg.batch_size);
    let total_steps = cfg.max_steps.map_or(cfg.epochs * steps_per_epoch, |m| m.min(cfg.epochs * steps_per_epoch));
    let (mut step, mut history) = match opts.resume {
        Some(ck) => (ck.step, ck.history.clone()),
        None => (0, Vec::new()),
    };
    let mut log = MetricsLog::open(opts.out_dir.map(|d| d.join(format!("{name}_metrics.jsonl"))), opts.resume.is_some())?;
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut written = Vec::new();
    let mut steps = Vec::new();
    while step < total_steps {
        let epoch = step / steps_per_epoch;
        let order = data.epoch_order(cfg.seed, epoch, cfg.batch_size);
        let mut epoch_records = Vec::new();
        for chunk in &order[step % steps_per_epoch..] {
            if step >= total_steps {
                break;
            }
            let epoch_f = step as f64 / steps_per_epoch as f64;
            let lr_g = lr_at(trainer.base_lr(cfg), epoch_f, cfg.decay_start_epoch, cfg.epochs);
            let lr_d = lr_at(cfg.lr_d, epoch_f, cfg.decay_start_epoch, cfg.epochs);
            let batch = data.batch(chunk)?;
            let losses = trainer.step(&batch, lr_g, lr_d)?;
            step += 1;
            let record = StepMetrics {
                step,
                epoch: epoch_f,
                lr_g,
                lr_d,
                losses,
            };
            log::debug!("{name} step {step}: {:?}", record.losses);
            log.write(&record)?;
            epoch_records.push(record.clone());
            steps.push(record);
        }
        let completed = step % steps_per_epoch == 0;
        if !epoch_records.is_empty() {
            let means = epoch_means(epoch + 1, step, &epoch_records);
            log::info!("{name} epoch {} (step {step}): {:?}", epoch + 1, means.losses);
            history.push(means);
        }
        log.flush()?;
        if completed {
            if let Some(dir) = opts.out_dir {
                let path = dir.join(format!("{name}_epoch_{:03}.safetensors", epoch + 1));
                trainer.checkpoint(cfg, epoch + 1, step, &history).save(&path)?;
                written.push(path);
            }
        }
    }
    let checkpoint = trainer.checkpoint(cfg, step / steps_per_epoch, step, &history);
    if let Some(dir) = opts.out_dir {
        let path = dir.join(format!("{name}_final.safetensors"));
        checkpoint.save(&path)?;
        written.push(path);
    }
    Ok(TrainOutput {
        checkpoint,
        steps,
        written,
    })
}

trait StageTrainer {
    fn name(&self) -> &'static str;
    fn base_lr(&self, cfg: &TrainConfig) -> f64;
    fn step(&mut self, batch: &Batch, lr_g: f64, lr_d: f64) -> Result<BTreeMap<String, f64>>;
    fn checkpoint(&self, cfg: &TrainConfig, epoch: usize, step: usize, history: &[EpochMetrics]) -> Checkpoint;
}

/// Parsing network with its parameters.
pub struct ParsingModel {
    pub store: ParamStore,
    pub net: ParsingNet,
}

impl ParsingModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let store = ParamStore::new(cfg.seed, DType::F32);
        let mut pcfg = cfg.model.parsing;
        pcfg.k = cfg.model.classes;
        let net = ParsingNet::new(&store.root(), &pcfg)?;
        Ok(Self { store, net })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Parsing)?;
        let model = Self::new(&ck.config)?;
        model.store.load(&ck.section("parsing"))?;
        Ok(model)
    }
}

pub struct ParsingTrainer {
    pub model: ParsingModel,
    opt: Adam,
}

impl ParsingTrainer {
    pub fn new(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<Self> {
        let model = match resume {
            Some(ck) => ParsingModel::from_checkpoint(ck)?,
            None => ParsingModel::new(cfg)?,
        };
        let mut opt = Adam::new(model.store.vars(), adam_cfg(cfg, cfg.lr_parsing))?;
        if let Some(ck) = resume {
            restore_opt(&mut opt, ck, "opt_parsing")?;
        }
        Ok(Self { model, opt })
    }
}

impl StageTrainer for ParsingTrainer {
    fn name(&self) -> &'static str {
        "parsing"
    }

    fn base_lr(&self, cfg: &TrainConfig) -> f64 {
        cfg.lr_parsing
    }

    fn step(&mut self, batch: &Batch, lr: f64, _: f64) -> Result<BTreeMap<String, f64>> {
        self.model.store.set_training(true);
        let pred = self
            .model
            .net
            .forward(&batch.source.image, &batch.source.masks, &batch.source.pose, &batch.target.pose)?;
        let loss = parsing_loss(&pred, &batch.target.masks)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Divergence { term: "parsing".into() });
        }
        let grads = loss.backward()?;
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        Ok(BTreeMap::from([("parsing".to_string(), v)]))
    }

    fn checkpoint(&self, cfg: &TrainConfig, epoch: usize, step: usize, history: &[EpochMetrics]) -> Checkpoint {
        let mut ck = Checkpoint {
            stage: Stage::Parsing,
            epoch,
            step,
            config: cfg.clone(),
            tensors: BTreeMap::new(),
            optimizer_steps: BTreeMap::new(),
            history: history.to_vec(),
        };
        ck.insert_section("parsing", store_section(&self.model.store));
        let opt = opt_section(&self.opt, "opt_parsing", &mut ck.optimizer_steps);
        ck.insert_section("opt_parsing", opt);
        ck
    }
}

/// Trains the parsing network alone on `pairs`.
pub fn train_parsing(pairs: &[TrainingPair], cfg: &TrainConfig, opts: RunOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    if let Some(ck) = opts.resume {
        ck.expect_stage(Stage::Parsing)?;
    }
    let mut data = prepare(pairs, cfg)?;
    if cfg.parsing_self_pairs {
        data = data.with_self_pairs();
    }
    let mut trainer = ParsingTrainer::new(cfg, opts.resume)?;
    run_loop(&mut trainer, &data, cfg, opts)
}

fn prepare(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<PreparedDataset> {
    PreparedDataset::new(
        pairs,
        cfg.model.classes,
        cfg.heatmap_sigma,
        cfg.resolution(),
        cfg.both_directions,
    )
}

/// Generator with its parameters.
pub struct GeneratorModel {
    pub store: ParamStore,
    pub generator: Generator,
}

impl GeneratorModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let store = ParamStore::new(cfg.seed.wrapping_add(1), DType::F32);
        let generator = Generator::new(&store.root(), &cfg.model, cfg.ablations)?;
        Ok(Self { store, generator })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_stage(Stage::Generator)?;
        let model = Self::new(&ck.config)?;
        model.store.load(&ck.section("gen"))?;
        Ok(model)
    }
}

pub struct GanTrainer {
    pub gen: GeneratorModel,
    pub disc_store: ParamStore,
    pub disc: Discriminator,
    pub phi: PerceptualExtractor,
    opt_g: Adam,
    opt_d: Adam,
    cfg: TrainConfig,
}

impl GanTrainer {
    pub fn new(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<Self> {
        let gen = match resume {
            Some(ck) => GeneratorModel::from_checkpoint(ck)?,
            None => GeneratorModel::new(cfg)?,
        };
        let disc_store = ParamStore::new(cfg.seed.wrapping_add(2), DType::F32);
        let disc = Discriminator::new(&disc_store.root(), &cfg.model.discriminator, cfg.model.height, cfg.model.width)?;
        let mut opt_g = Adam::new(gen.store.vars(), adam_cfg(cfg, cfg.lr_g))?;
        let mut opt_d = Adam::new(disc_store.vars(), adam_cfg(cfg, cfg.lr_d))?;
        if let Some(ck) = resume {
            disc_store.load(&ck.section("disc"))?;
            restore_opt(&mut opt_g, ck, "opt_g")?;
            restore_opt(&mut opt_d, ck, "opt_d")?;
        }
        Ok(Self {
            gen,
            disc_store,
            disc,
            phi: PerceptualExtractor::new(&cfg.model.perceptual, DType::F32)?,
            opt_g,
            opt_d,
            cfg: cfg.clone(),
        })
    }

    /// Builds the generator-side loss terms for one forward pass.
    fn terms(&self, batch: &Batch, image: &Tensor, warped: &Tensor) -> Result<LossTerms> {
        let cfg = &self.cfg;
        let pc = &cfg.model.perceptual;
        let target = &batch.target.image;
        let zero = Tensor::zeros((), DType::F32, image.device())?;
        let (adv, fea) = if cfg.ablations.use_gan_loss {
            let fake = self.disc.forward(image)?;
            let real = self.disc.forward(target)?.detach();
            (
                adversarial_loss_g(&fake.score, cfg.adversarial)?,
                feature_matching_loss(&fake, &real, &cfg.losses.alpha)?,
            )
        } else {
            (zero.clone(), zero.clone())
        };
        let layers = [pc.perceptual_layer.as_str(), pc.contextual_layer.as_str(), pc.correspondence_layer.as_str()];
        let t = self.phi.features(&target.detach(), &layers)?;
        let g = self.phi.features(image, &layers[..2])?;
        let repr = self.phi.project_to_latent(&t[2], cfg.model.latent_shape())?;
        Ok(LossTerms {
            adv,
            fea,
            rec: reconstruction_loss(image, target)?,
            per: mean_l1(&g[0], &t[0])?,
            con: contextual_loss(&g[1], &t[1], pc.contextual_bandwidth, pc.contextual_eps)?,
            cor: correspondence_loss(warped, &repr)?,
        })
    }
}

impl StageTrainer for GanTrainer {
    fn name(&self) -> &'static str {
        "generator"
    }

    fn base_lr(&self, cfg: &TrainConfig) -> f64 {
        cfg.lr_g
    }

    fn step(&mut self, batch: &Batch, lr_g: f64, lr_d: f64) -> Result<BTreeMap<String, f64>> {
        let use_gan = self.cfg.ablations.use_gan_loss;
        self.gen.store.set_training(true);
        let out = self.gen.generator.forward(&batch.generator_inputs(self.cfg.ablations.use_parsing))?;
        if !all_finite(&out.image)? {
            return Err(Error::Divergence { term: "generated image".into() });
        }
        let mut d_loss = 0.0;
        if use_gan {
            self.disc_store.set_training(true);
            let real = self.disc.forward(&batch.target.image)?;
            let fake = self.disc.forward(&out.image.detach())?;
            let loss = adversarial_loss_d(&real.score, &fake.score)?;
            d_loss = scalar(&loss)?;
            self.opt_d.set_learning_rate(lr_d);
            self.opt_d.step(&loss.backward()?)?;
        }
        self.disc_store.set_training(false);

        let terms = self.terms(batch, &out.image, out.warped.tensor())?;
        let weights = self.cfg.effective_weights();
        let (total, report) = total_loss(&terms, &weights)?;
        let graph_total = scalar(&total)?;
        if (graph_total - report.total).abs() > 1e-4 * report.total.abs().max(1.0)
            || (report.weighted_sum(&weights) - report.total).abs() > 1e-6
        {
            return Err(Error::Divergence { term: "total".into() });
        }
        let mut grads = total.backward()?;
        if let Some(max_norm) = self.cfg.grad_clip {
            clip_gradients(&mut grads, &self.gen.store.vars(), max_norm)?;
        }
        self.opt_g.set_learning_rate(lr_g);
        self.opt_g.step(&grads)?;

        let mut losses = report.terms;
        losses.insert("total".into(), report.total);
        losses.insert("d_loss".into(), d_loss);
        Ok(losses)
    }

    fn checkpoint(&self, cfg: &TrainConfig, epoch: usize, step: usize, history: &[EpochMetrics]) -> Checkpoint {
        let mut ck = Checkpoint {
            stage: Stage::Generator,
            epoch,
            step,
            config: cfg.clone(),
            tensors: BTreeMap::new(),
            optimizer_steps: BTreeMap::new(),
            history: history.to_vec(),
        };
        ck.insert_section("gen", store_section(&self.gen.store));
        ck.insert_section("disc", store_section(&self.disc_store));
        let g = opt_section(&self.opt_g, "opt_g", &mut ck.optimizer_steps);
        ck.insert_section("opt_g", g);
        let d = opt_section(&self.opt_d, "opt_d", &mut ck.optimizer_steps);
        ck.insert_section("opt_d", d);
        ck
    }
}

/// Checks that a parsing checkpoint can serve a generator trained with `cfg`.
pub fn check_parsing_compatible(parsing: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    parsing.expect_stage(Stage::Parsing)?;
    let p = &parsing.config.model;
    if p.classes != cfg.model.classes || (p.height, p.width) != (cfg.model.height, cfg.model.width) {
        return Err(Error::config(format!(
            "parsing checkpoint is for {} classes at {}x{}, generator uses {} at {}x{}",
            p.classes, p.height, p.width, cfg.model.classes, cfg.model.height, cfg.model.width
        )));
    }
    Ok(())
}

/// Trains generator and discriminator with ground-truth target parses.
pub fn train_generator(
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    parsing: Option<&Checkpoint>,
    opts: RunOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if let Some(p) = parsing {
        check_parsing_compatible(p, cfg)?;
    }
    if let Some(ck) = opts.resume {
        ck.expect_stage(Stage::Generator)?;
        if ck.config.model != cfg.model || ck.config.ablations != cfg.ablations {
            return Err(Error::config("resume checkpoint was trained with a different architecture"));
        }
    }
    let data = prepare(pairs, cfg)?;
    let mut trainer = GanTrainer::new(cfg, opts.resume)?;
    run_loop(&mut trainer, &data, cfg, opts)
}

/// Runs `steps` generator-stage steps over `pairs` without any file output, returning
/// the trainer for inspection.
pub fn gan_trainer_for_steps(pairs: &[TrainingPair], cfg: &TrainConfig, steps: usize) -> Result<(GanTrainer, Vec<StepMetrics>)> {
    cfg.validate()?;
    let data = prepare(pairs, cfg)?;
    let mut trainer = GanTrainer::new(cfg, None)?;
    let limited = TrainConfig {
        max_steps: Some(steps),
        ..cfg.clone()
    };
    let out = run_loop(&mut trainer, &data, &limited, RunOptions::default())?;
    Ok((trainer, out.steps))
}

//! Staged training: DAE only, GAN with a frozen DAE, then joint training with the
//! identity loss. Includes the n-critic schedule, learning-rate decay, loss logging
//! and a single-file checkpoint format.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdbgan_autograd::{Adam, AdamState, Graph, Module, Param, Tensor};

use crate::dae::{dae_objective, Dae, DaeConfig};
use crate::data::{Batch, Dataset, EpochPlan, LabelMode};
use crate::error::{invalid, Error, Result};
use crate::gan::{
    cls_loss, d_adversarial, g_adversarial, objective_d, objective_g, reconstruction_losses, warp_texture,
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, GeneratorLoss, ImageVar, LossWeights,
    TextureVar,
};
use crate::identity::{identity_loss, ConvClassifier, Extractor, ExtractorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    DaeOnly,
    GanFrozenDae,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::DaeOnly => "dae_only",
            Stage::GanFrozenDae => "gan_frozen_dae",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dae_only" | "dae" => Ok(Stage::DaeOnly),
            "gan_frozen_dae" | "gan" => Ok(Stage::GanFrozenDae),
            "joint" => Ok(Stage::Joint),
            _ => Err(invalid("stage", format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub n_critic: usize,
    pub flip_prob: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub use_dae: bool,
    pub use_identity_loss: bool,
    #[serde(default)]
    pub generator_loss: GeneratorLoss,
    /// Keep the DAE fixed during the joint stage.
    #[serde(default)]
    pub freeze_dae_in_joint: bool,
    /// Cap on batches per epoch (desk-scale runs); `None` uses the full epoch.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

impl TrainConfig {
    /// Defaults for `stage`: DAE 5 epochs at 2e-4, GAN 100 + 100 at 1e-4, joint 29 + 29 at 1e-4.
    pub fn paper(stage: Stage) -> Self {
        let (c, d, lr) = match stage {
            Stage::DaeOnly => (5, 0, 2e-4),
            Stage::GanFrozenDae => (100, 100, 1e-4),
            Stage::Joint => (29, 29, 1e-4),
        };
        Self {
            stage,
            epochs_constant: c,
            epochs_decay: d,
            lr,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 100,
            n_critic: 5,
            flip_prob: 0.5,
            weights: LossWeights::default(),
            seed: 0,
            use_dae: true,
            use_identity_loss: true,
            generator_loss: GeneratorLoss::NonSaturating,
            freeze_dae_in_joint: false,
            max_batches_per_epoch: None,
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_critic == 0 {
            return Err(invalid("train config", "n_critic must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("train config", "lr must be > 0"));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid("train config", "Adam betas must lie in (0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("train config", "batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid("train config", "flip_prob outside [0, 1]"));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(invalid("train config", "max_batches_per_epoch must be >= 1"));
        }
        self.weights.validate()
    }

    /// Identity-loss weight actually applied in this stage.
    pub fn effective_lambda_ip(&self) -> f64 {
        if self.stage == Stage::Joint && self.use_identity_loss {
            self.weights.lambda_ip
        } else {
            0.0
        }
    }
}

/// Constant for `epochs_constant` epochs, then linear decay reaching 0 at the end
/// of the last epoch. Fractional epochs give the within-epoch rate.
pub fn lr_at(config: &TrainConfig, epoch: f64) -> Result<f64> {
    let total = config.epochs() as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(invalid("epoch", format!("{epoch} outside [0, {total}]")));
    }
    let c = config.epochs_constant as f64;
    if epoch < c || config.epochs_decay == 0 {
        return Ok(config.lr);
    }
    Ok(config.lr * (1.0 - (epoch - c) / config.epochs_decay as f64))
}

/// Rate used during integer epoch `epoch` (`0 <= epoch < epochs`).
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs() {
        return Err(invalid(
            "epoch",
            format!("{epoch} outside 0..{} for this stage", config.epochs()),
        ));
    }
    lr_at(config, epoch as f64)
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub label_dim: usize,
    pub label_mode: LabelMode,
    #[serde(default)]
    pub dae: DaeConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    pub seed: u64,
    /// Attribute or class names, in label order; empty when unnamed.
    #[serde(default)]
    pub vocabulary: Vec<String>,
}

impl ModelConfig {
    pub fn new(image_size: usize, label_dim: usize, label_mode: LabelMode, seed: u64) -> Self {
        Self {
            image_size,
            label_dim,
            label_mode,
            dae: DaeConfig {
                image_size,
                ..Default::default()
            },
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            seed,
            vocabulary: Vec::new(),
        }
    }
}

/// All networks of the pipeline, trained in `f32`.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dae: Dae<f32>,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub extractor: Option<Extractor>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.dae.image_size != config.image_size {
            return Err(invalid("model config", "dae.image_size must equal image_size"));
        }
        if !config.vocabulary.is_empty() && config.vocabulary.len() != config.label_dim {
            return Err(invalid("model config", "vocabulary length must equal label_dim"));
        }
        let s = config.seed;
        Ok(Self {
            dae: Dae::new(config.dae.clone(), s.wrapping_mul(4) + 1)?,
            generator: Generator::new(&config.generator, config.label_dim, s.wrapping_mul(4) + 2)?,
            discriminator: Discriminator::new(
                &config.discriminator,
                config.image_size,
                config.label_dim,
                s.wrapping_mul(4) + 3,
            )?,
            extractor: None,
            config,
        })
    }

    /// Every named parameter, including the extractor's.
    pub fn named_params(&self) -> Vec<&Param<f32>> {
        let mut p = self.dae.params();
        p.extend(self.generator.params());
        p.extend(self.discriminator.params());
        if let Some(net) = self.extractor.as_ref().and_then(|e| e.network().ok()) {
            p.extend(net.params());
        }
        p
    }

    fn named_params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut p = self.dae.params_mut();
        p.extend(self.generator.params_mut());
        p.extend(self.discriminator.params_mut());
        if let Some(net) = self.extractor.as_mut().and_then(|e| e.network_mut()) {
            p.extend(net.params_mut());
        }
        p
    }

    /// `(edited image, edited texture)` for `images` and per-sample `targets`.
    pub fn transfer(&self, images: &Tensor<f32>, targets: &Tensor<f32>, use_dae: bool) -> Result<(Tensor<f32>, Tensor<f32>)> {
        crate::gan::transfer_attributes(use_dae.then_some(&self.dae), &self.generator, images, targets)
    }
}

// ---------------------------------------------------------------------------
// Loss log

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub stage: Stage,
    pub term: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSpan {
    pub stage: Stage,
    pub epoch: usize,
    pub first_step: u64,
    pub last_step: u64,
}

/// Per-step loss terms plus the step range of every completed epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
    pub epochs: Vec<EpochSpan>,
}

impl LossLog {
    pub fn push(&mut self, step: u64, stage: Stage, term: &str, value: f64) {
        self.records.push(LossRecord {
            step,
            stage,
            term: term.to_string(),
            value,
        });
    }

    pub fn contains(&self, term: &str) -> bool {
        self.records.iter().any(|r| r.term == term)
    }

    /// `(step, value)` of every record of `term`, in order.
    pub fn series(&self, term: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.term == term)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// Mean of `term` within each recorded epoch that has at least one value.
    pub fn epoch_means(&self, term: &str) -> Vec<(Stage, usize, f64)> {
        let series = self.series(term);
        self.epochs
            .iter()
            .filter_map(|e| {
                let vals: Vec<f64> = series
                    .iter()
                    .filter(|(s, _)| (e.first_step..=e.last_step).contains(s))
                    .map(|&(_, v)| v)
                    .collect();
                (!vals.is_empty()).then(|| (e.stage, e.epoch, vals.iter().sum::<f64>() / vals.len() as f64))
            })
            .collect()
    }

    /// Writes `step,stage,term,value`; epoch spans go to `<path>.epochs.csv`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "stage", "term", "value"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.stage.as_str().to_string(),
                r.term.clone(),
                format!("{:e}", r.value),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(epochs_path(path))?;
        w.write_record(["stage", "epoch", "first_step", "last_step"])?;
        for e in &self.epochs {
            w.write_record([
                e.stage.as_str().to_string(),
                e.epoch.to_string(),
                e.first_step.to_string(),
                e.last_step.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let perr = |line: usize, msg: String| Error::Parse {
            path: name.clone(),
            line,
            msg,
        };
        let mut log = LossLog::default();
        let mut rd = csv::Reader::from_path(path)?;
        for (i, row) in rd.records().enumerate() {
            let row = row?;
            if row.len() != 4 {
                return Err(perr(i + 2, "expected step,stage,term,value".into()));
            }
            log.records.push(LossRecord {
                step: row[0].parse().map_err(|_| perr(i + 2, format!("bad step `{}`", &row[0])))?,
                stage: Stage::parse(&row[1])?,
                term: row[2].to_string(),
                value: row[3].parse().map_err(|_| perr(i + 2, format!("bad value `{}`", &row[3])))?,
            });
        }
        let ep = epochs_path(path);
        if ep.exists() {
            let mut rd = csv::Reader::from_path(&ep)?;
            for row in rd.records() {
                let row = row?;
                let num = |i: usize| -> Result<u64> {
                    row[i].parse().map_err(|_| invalid("epoch csv", format!("bad number `{}`", &row[i])))
                };
                log.epochs.push(EpochSpan {
                    stage: Stage::parse(&row[0])?,
                    epoch: num(1)? as usize,
                    first_step: num(2)?,
                    last_step: num(3)?,
                });
            }
        }
        Ok(log)
    }
}

fn epochs_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".epochs.csv");
    s.into()
}

// ---------------------------------------------------------------------------
// Trainer

/// Position of a run within its plan.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage_index: usize,
    pub epoch: usize,
    pub batch: usize,
    pub global_step: u64,
    /// Training-step calls within the current stage.
    pub stage_calls: u64,
    pub d_updates: u64,
    pub g_updates: u64,
    pub dae_updates: u64,
    /// First global step of the current epoch.
    pub epoch_first_step: u64,
}

/// Values of every term logged by one call.
pub type StepTerms = Vec<(&'static str, f64)>;

pub struct Trainer {
    pub model: Model,
    pub plan: Vec<TrainConfig>,
    pub progress: Progress,
    pub log: LossLog,
    opt_dae: Adam<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    epoch_plan: Option<((usize, usize), EpochPlan)>,
}

impl Trainer {
    pub fn new(model: Model, plan: Vec<TrainConfig>) -> Result<Self> {
        if plan.is_empty() {
            return Err(Error::EmptySpec("training plan has no stages".into()));
        }
        for w in plan.windows(2) {
            if w[1].stage < w[0].stage {
                return Err(invalid(
                    "training plan",
                    "stages must be ordered dae_only -> gan_frozen_dae -> joint",
                ));
            }
        }
        for c in &plan {
            c.validate()?;
        }
        let first = &plan[0];
        let rng = ChaCha8Rng::seed_from_u64(first.seed ^ 0x5eed);
        let mk = |c: &TrainConfig| Adam::new(c.lr, c.adam_beta1, c.adam_beta2);
        Ok(Self {
            opt_dae: mk(first),
            opt_g: mk(first),
            opt_d: mk(first),
            model,
            plan,
            progress: Progress::default(),
            log: LossLog::default(),
            rng,
            epoch_plan: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.progress.stage_index >= self.plan.len()
    }

    pub fn config(&self) -> Option<&TrainConfig> {
        self.plan.get(self.progress.stage_index)
    }

    fn reset_optimizers(&mut self) {
        if let Some(c) = self.config() {
            let mk = || Adam::new(c.lr, c.adam_beta1, c.adam_beta2);
            let (a, b, d) = (mk(), mk(), mk());
            self.opt_dae = a;
            self.opt_g = b;
            self.opt_d = d;
        }
    }

    /// Stages that do nothing for this configuration (a DAE stage without a DAE).
    fn skip_idle_stages(&mut self) {
        while let Some(c) = self.config() {
            if c.stage == Stage::DaeOnly && !c.use_dae || c.epochs() == 0 {
                self.progress.stage_index += 1;
                self.progress.epoch = 0;
                self.progress.batch = 0;
                self.progress.stage_calls = 0;
                self.reset_optimizers();
            } else {
                break;
            }
        }
    }

    /// One training step on `batch` under the current stage configuration.
    pub fn training_step(&mut self, batch: &Batch) -> Result<StepTerms> {
        let cfg = self
            .config()
            .cloned()
            .ok_or_else(|| invalid("trainer", "training plan already finished"))?;
        let lr = lr_at_epoch(&cfg, self.progress.epoch)?;
        for o in [&mut self.opt_dae, &mut self.opt_g, &mut self.opt_d] {
            o.lr = lr;
        }
        let step = self.progress.global_step;
        let mut terms = Vec::new();
        match cfg.stage {
            Stage::DaeOnly => terms.extend(self.dae_step(batch, &cfg)),
            Stage::GanFrozenDae | Stage::Joint => {
                terms.extend(self.d_step(batch, &cfg));
                self.progress.stage_calls += 1;
                if self.progress.stage_calls.is_multiple_of(cfg.n_critic as u64) {
                    terms.extend(self.g_step(batch, &cfg)?);
                }
            }
        }
        for &(t, v) in &terms {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: t.to_string(),
                    step,
                });
            }
            self.log.push(step, cfg.stage, t, v);
        }
        self.progress.global_step += 1;
        Ok(terms)
    }

    fn dae_step(&mut self, batch: &Batch, cfg: &TrainConfig) -> StepTerms {
        let mut g = Graph::new();
        let x = g.input(batch.images.clone());
        let out = self.model.dae.forward(&mut g, x);
        let l = dae_objective(&mut g, &out, x, &cfg.weights);
        let vals = l.values(&g);
        let grads = g.backward(l.total);
        self.opt_dae.step(self.model.dae.params_mut(), &grads);
        self.progress.dae_updates += 1;
        vals
    }

    fn targets(&mut self, labels: &Tensor<f32>) -> Tensor<f32> {
        let n = labels.dim(0);
        let k = labels.dim(1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);
        Tensor::from_fn(&[n, k], |i| labels.data()[perm[i / k] * k + i % k])
    }

    fn d_step(&mut self, batch: &Batch, cfg: &TrainConfig) -> StepTerms {
        let c_trg = self.targets(&batch.labels);
        let m = &self.model;
        let mut g = Graph::new();
        g.freeze(m.dae.params());
        g.freeze(m.generator.params());
        let x = g.input(batch.images.clone());
        let real = ImageVar::observed(x);
        let fake = if cfg.use_dae {
            let out = m.dae.forward(&mut g, x);
            let t = m.generator.forward(&mut g, TextureVar::from_dae(out.texture), &c_trg);
            warp_texture(&mut g, t, out.grid)
        } else {
            let t = m.generator.forward(&mut g, TextureVar::from_raw_image(real), &c_trg);
            ImageVar::unwarped(t)
        };
        let fake = ImageVar::observed(g.detach(fake.var()));
        let dr = m.discriminator.forward(&mut g, real);
        let df = m.discriminator.forward(&mut g, fake);
        let adv = d_adversarial(&mut g, dr.src, df.src);
        let cls_r = cls_loss(&mut g, dr.cls, &batch.labels, m.config.label_mode);
        let total = objective_d(&mut g, adv, cls_r, cfg.weights.lambda_cls);
        let v = |x| g.value(x).item() as f64;
        let vals = vec![("D_adv", v(adv)), ("L_cls_r", v(cls_r)), ("L_D", v(total))];
        let grads = g.backward(total);
        self.opt_d.step(self.model.discriminator.params_mut(), &grads);
        self.progress.d_updates += 1;
        vals
    }

    fn g_step(&mut self, batch: &Batch, cfg: &TrainConfig) -> Result<StepTerms> {
        let c_trg = self.targets(&batch.labels);
        let c_org = &batch.labels;
        let train_dae = cfg.stage == Stage::Joint && cfg.use_dae && !cfg.freeze_dae_in_joint;
        let lambda_ip = cfg.effective_lambda_ip();
        let m = &self.model;
        let ext = if lambda_ip > 0.0 {
            Some(
                m.extractor
                    .as_ref()
                    .ok_or_else(|| invalid("trainer", "identity loss requested but no extractor attached"))?
                    .network()?,
            )
        } else {
            None
        };
        let mut g = Graph::new();
        g.freeze(m.discriminator.params());
        if !train_dae {
            g.freeze(m.dae.params());
        }
        let x = g.input(batch.images.clone());
        let real = ImageVar::observed(x);
        let (t, grid, dae_out) = if cfg.use_dae {
            let out = m.dae.forward(&mut g, x);
            (TextureVar::from_dae(out.texture), Some(out.grid), Some(out))
        } else {
            (TextureVar::from_raw_image(real), None, None)
        };
        let to_image = |g: &mut Graph<f32>, t: TextureVar| match grid {
            Some(grid) => warp_texture(g, t, grid),
            None => ImageVar::unwarped(t),
        };
        let fake_t = m.generator.forward(&mut g, t, &c_trg);
        let fake_x = to_image(&mut g, fake_t);
        let df = m.discriminator.forward(&mut g, fake_x);
        let adv = g_adversarial(&mut g, df.src, cfg.generator_loss);
        let cls_f = cls_loss(&mut g, df.cls, &c_trg, m.config.label_mode);
        let cyc_t = m.generator.forward(&mut g, fake_t, c_org);
        let self_t = m.generator.forward(&mut g, t, c_org);
        let x_rec = to_image(&mut g, self_t);
        let (rec_t, rec_i, rec) = reconstruction_losses(&mut g, t.var(), cyc_t.var(), x, x_rec.var());
        let ip = ext.map(|net| identity_loss(&mut g, t.var(), fake_t.var(), net));
        let weights = LossWeights {
            lambda_ip,
            ..cfg.weights.clone()
        };
        let l_g = objective_g(&mut g, adv, cls_f, rec, ip, &weights);
        let v = |g: &Graph<f32>, x| g.value(x).item() as f64;
        let mut vals = vec![
            ("G_adv", v(&g, adv)),
            ("L_cls_f", v(&g, cls_f)),
            ("L_rec_t", v(&g, rec_t)),
            ("L_rec_i", v(&g, rec_i)),
            ("L_rec", v(&g, rec)),
        ];
        if let Some(ip) = ip {
            vals.push(("L_ip", v(&g, ip)));
        }
        vals.push(("L_G", v(&g, l_g)));
        let total = match (train_dae, dae_out) {
            (true, Some(out)) => {
                let l = dae_objective(&mut g, &out, x, &cfg.weights);
                vals.extend(l.values(&g));
                g.add(l_g, l.total)
            }
            _ => l_g,
        };
        let grads = g.backward(total);
        self.opt_g.step(self.model.generator.params_mut(), &grads);
        self.progress.g_updates += 1;
        if train_dae {
            self.opt_dae.step(self.model.dae.params_mut(), &grads);
            self.progress.dae_updates += 1;
        }
        Ok(vals)
    }

    fn current_epoch_plan(&mut self, data: &Dataset) -> Result<&EpochPlan> {
        let key = (self.progress.stage_index, self.progress.epoch);
        if self.epoch_plan.as_ref().map(|(k, _)| *k) != Some(key) {
            let cfg = self.config().unwrap();
            let seed = cfg.seed.wrapping_add(1_000_003 * self.progress.stage_index as u64);
            let plan = EpochPlan::new(data, cfg.batch_size, seed, self.progress.epoch as u64, cfg.flip_prob)?;
            self.epoch_plan = Some((key, plan));
        }
        Ok(&self.epoch_plan.as_ref().unwrap().1)
    }

    /// Runs the next scheduled step. Returns `None` once the plan is finished.
    pub fn step(&mut self, data: &Dataset) -> Result<Option<StepTerms>> {
        self.skip_idle_stages();
        if self.is_done() {
            return Ok(None);
        }
        if self.progress.batch == 0 {
            self.progress.epoch_first_step = self.progress.global_step;
        }
        let cfg = self.config().unwrap().clone();
        let index = self.progress.batch;
        let plan = self.current_epoch_plan(data)?;
        let per_epoch = cfg
            .max_batches_per_epoch
            .map_or(plan.num_batches(), |m| m.min(plan.num_batches()));
        let batch = plan.batch(data, index).expect("batch index within epoch");
        let terms = self.training_step(&batch)?;

        self.progress.batch += 1;
        if self.progress.batch >= per_epoch {
            self.log.epochs.push(EpochSpan {
                stage: cfg.stage,
                epoch: self.progress.epoch,
                first_step: self.progress.epoch_first_step,
                last_step: self.progress.global_step - 1,
            });
            self.progress.batch = 0;
            self.progress.epoch += 1;
            if self.progress.epoch >= cfg.epochs() {
                self.progress.stage_index += 1;
                self.progress.epoch = 0;
                self.progress.stage_calls = 0;
                self.reset_optimizers();
            }
        }
        Ok(Some(terms))
    }

    /// Runs to the end of the plan, calling `on_epoch` after each completed epoch.
    pub fn run(&mut self, data: &Dataset, mut on_epoch: impl FnMut(&Trainer, &EpochSpan)) -> Result<()> {
        let mut seen = self.log.epochs.len();
        while self.step(data)?.is_some() {
            if self.log.epochs.len() > seen {
                seen = self.log.epochs.len();
                let span = self.log.epochs[seen - 1].clone();
                on_epoch(self, &span);
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Checkpointing

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blobs = Vec::new();
        for p in self.model.named_params() {
            blobs.push(Blob::from_tensor(p.name(), &p.value));
        }
        for (name, opt) in [("dae", &self.opt_dae), ("gen", &self.opt_g), ("dis", &self.opt_d)] {
            for (i, (m, v)) in opt.state.m.iter().zip(&opt.state.v).enumerate() {
                blobs.push(Blob::from_tensor(&format!("opt.{name}.m.{i}"), m));
                blobs.push(Blob::from_tensor(&format!("opt.{name}.v.{i}"), v));
            }
        }
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            plan: self.plan.clone(),
            progress: self.progress.clone(),
            rng: RngState::of(&self.rng),
            extractor: self.model.extractor.as_ref().and_then(|e| {
                e.network().ok().map(|n| ExtractorMeta {
                    config: e.config.clone(),
                    classes: n.classes,
                })
            }),
            optimizer_steps: [self.opt_dae.state.step, self.opt_g.state.step, self.opt_d.state.step],
        };
        let file = CheckpointFile {
            meta: serde_json::to_string(&meta).map_err(|e| ckpt_err(path, e.to_string()))?,
            blobs,
        };
        file.write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = CheckpointFile::read(path)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&file.meta).map_err(|e| ckpt_err(path, format!("bad metadata: {e}")))?;
        let mut model = Model::new(meta.model.clone())?;
        if let Some(ext) = &meta.extractor {
            let net = ConvClassifier::new("ext", ext.config.network.clone(), ext.classes, 0)?;
            model.extractor = Some(Extractor::from_network(ext.config.clone(), net));
        }
        file.restore_params(path, model.named_params_mut())?;
        let mut t = Trainer::new(model, meta.plan.clone())?;
        t.progress = meta.progress.clone();
        t.rng = meta.rng.restore();
        t.reset_optimizers();
        let lookup: BTreeMap<&str, &Blob> = file.blobs.iter().map(|b| (b.name.as_str(), b)).collect();
        let steps = meta.optimizer_steps;
        for ((name, opt), step) in [("dae", &mut t.opt_dae), ("gen", &mut t.opt_g), ("dis", &mut t.opt_d)]
            .into_iter()
            .zip(steps)
        {
            let mut state = AdamState {
                step,
                m: Vec::new(),
                v: Vec::new(),
            };
            let mut i = 0;
            while let (Some(m), Some(v)) = (
                lookup.get(format!("opt.{name}.m.{i}").as_str()),
                lookup.get(format!("opt.{name}.v.{i}").as_str()),
            ) {
                state.m.push(m.to_tensor());
                state.v.push(v.to_tensor());
                i += 1;
            }
            opt.state = state;
        }
        Ok(t)
    }
}

/// Runs every stage of `plan` from a fresh trainer.
pub fn run_training(model: Model, plan: Vec<TrainConfig>, data: &Dataset) -> Result<Trainer> {
    let mut t = Trainer::new(model, plan)?;
    t.run(data, |_, _| {})?;
    Ok(t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ExtractorMeta {
    config: ExtractorConfig,
    classes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    plan: Vec<TrainConfig>,
    progress: Progress,
    rng: RngState,
    extractor: Option<ExtractorMeta>,
    optimizer_steps: [u64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos.parse().unwrap_or(0));
        r
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file

const MAGIC: &[u8; 8] = b"TDBGANCK";
pub const FORMAT_VERSION: u32 = 1;

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// A named `f32` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    pub fn from_tensor(name: &str, t: &Tensor<f32>) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&self.shape, self.data.clone()).expect("blob shape matches data")
    }
}

/// `magic | u32 version | u64 len + JSON metadata | u32 count | blobs | u32 crc32`,
/// where each blob is `u32 len + name | u32 rank | u64 dims | f32 data`, all
/// little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub meta: String,
    pub blobs: Vec<Blob>,
}

impl CheckpointFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        b.extend_from_slice(self.meta.as_bytes());
        b.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for blob in &self.blobs {
            b.extend_from_slice(&(blob.name.len() as u32).to_le_bytes());
            b.extend_from_slice(blob.name.as_bytes());
            b.extend_from_slice(&(blob.shape.len() as u32).to_le_bytes());
            for &d in &blob.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &blob.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: &str| ckpt_err(path, m);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(err("checksum mismatch (truncated or corrupted)"));
        }
        let mut r = Cursor { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| err("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(err(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let meta_len = r.u64().ok_or_else(|| err("truncated header"))? as usize;
        let meta = String::from_utf8(r.take(meta_len).ok_or_else(|| err("truncated metadata"))?.to_vec())
            .map_err(|_| err("metadata is not UTF-8"))?;
        let count = r.u32().ok_or_else(|| err("truncated blob count"))?;
        let mut blobs = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| err("truncated blob"))? as usize;
            let name = String::from_utf8(r.take(name_len).ok_or_else(|| err("truncated blob"))?.to_vec())
                .map_err(|_| err("blob name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(|| err("truncated blob"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("truncated blob"))?;
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n).ok_or_else(|| err("truncated blob data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push(Blob { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(err("trailing bytes after blobs"));
        }
        Ok(Self { meta, blobs })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes, path)
    }

    /// Copies blobs into parameters by name. Fails without modifying anything if a
    /// parameter is missing or has the wrong shape.
    pub fn restore_params(&self, path: &Path, params: Vec<&mut Param<f32>>) -> Result<()> {
        let lookup: BTreeMap<&str, &Blob> = self.blobs.iter().map(|b| (b.name.as_str(), b)).collect();
        for p in &params {
            match lookup.get(p.name()) {
                None => return Err(ckpt_err(path, format!("missing parameter `{}`", p.name()))),
                Some(b) if b.shape != p.value.shape() => {
                    return Err(ckpt_err(
                        path,
                        format!("parameter `{}` has shape {:?}, expected {:?}", p.name(), b.shape, p.value.shape()),
                    ))
                }
                _ => {}
            }
        }
        for p in params {
            p.value = lookup[p.name()].to_tensor();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

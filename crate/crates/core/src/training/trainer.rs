//! The alternating adversarial training loop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::Checkpoint;
use super::loss::{discriminator_loss, gdl_value, generator_loss_terms, soft_dice};
use crate::crf::{Crf, CrfConfig};
use crate::data::{labels_to_channels, zscore, Case};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, NUM_CLASSES};
use crate::nn::Bound;
use crate::volgrad::{
    derive_seed, rng_from_seed, softmax_channels, Element, Graph, Rng, Tensor, Var,
};

const INIT_STREAM: u64 = 0x1;
const SPLIT_STREAM: u64 = 0x2;
const EPOCH_STREAM: u64 = 0x1_0000;

pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the overlap term in the generator objective.
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k_disc_steps: usize,
    pub seed: u64,
    pub gdl_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            epochs: 200,
            k_disc_steps: 1,
            seed: 0,
            gdl_eps: super::loss::DEFAULT_GDL_EPS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(
                "train.alpha",
                "must be finite and non-negative",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(key, format!("{b} must lie in (0, 1)")));
            }
        }
        for (key, v) in [
            ("train.batch_size", self.batch_size),
            ("train.epochs", self.epochs),
            ("train.k_disc_steps", self.k_disc_steps),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.gdl_eps > 0.0 && self.gdl_eps.is_finite()) {
            return Err(Error::config("train.gdl_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Generator, critic and CRF trained together.
#[derive(Debug, Clone)]
pub struct Models<T: Element = f32> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub crf: Crf<T>,
}

/// Handles of one differentiable generator + CRF pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub generator: Bound,
    pub crf: Bound,
    pub image: Var,
    pub unary: Var,
    pub beliefs: Var,
}

/// Loss values and parameter gradients of one generator objective.
#[derive(Debug, Clone)]
pub struct GeneratorPass<T: Element> {
    pub loss_g: f64,
    pub adversarial: f64,
    /// Computed outside the graph when `alpha == 0`.
    pub gdl: f64,
    pub generator_grads: Vec<Tensor<T>>,
    pub crf_grads: Vec<Tensor<T>>,
}

impl<T: Element> Models<T> {
    pub fn new(
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        crf: CrfConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_from_seed(derive_seed(seed, INIT_STREAM));
        Ok(Self {
            generator: Generator::new(generator, &mut rng)?,
            discriminator: Discriminator::new(discriminator, &mut rng)?,
            crf: Crf::new(crf, NUM_CLASSES)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let generator = self.generator.params.bind(g, true);
        let crf = self.crf.params.bind(g, true);
        let x = g.constant(image.clone());
        let unary = self.generator.forward(g, &generator, x, true, rng)?;
        let beliefs = self.crf.forward(g, &crf, unary, Some(image))?;
        Ok(ForwardPass {
            generator,
            crf,
            image: x,
            unary,
            beliefs,
        })
    }

    /// Adds the critic (frozen) and the generator objective to `g` and
    /// back-propagates it.
    pub fn generator_objective(
        &self,
        g: &mut Graph<T>,
        pass: &ForwardPass,
        target: &Tensor<T>,
        alpha: f64,
        gdl_eps: f64,
    ) -> Result<GeneratorPass<T>> {
        let critic = self.discriminator.params.bind(g, false);
        let d_fake = self
            .discriminator
            .forward(g, &critic, pass.image, pass.beliefs)?;
        let y = g.constant(target.clone());
        let terms = generator_loss_terms(g, d_fake, y, pass.beliefs, alpha, gdl_eps)?;
        let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64_lossy();
        let gdl = match terms.gdl {
            Some(v) => scalar(g, v),
            None => gdl_value(target, g.value(pass.beliefs), gdl_eps)?,
        };
        let grads = g.backward(terms.total)?;
        Ok(GeneratorPass {
            loss_g: scalar(g, terms.total),
            adversarial: scalar(g, terms.adversarial),
            gdl,
            generator_grads: self.generator.params.collect_grads(&grads, &pass.generator),
            crf_grads: self.crf.params.collect_grads(&grads, &pass.crf),
        })
    }

    /// Label distribution `[N, 4, ...]` in evaluation mode, refined by the
    /// CRF unless `use_crf` is false.
    pub fn segment(&self, image: &Tensor<T>, use_crf: bool) -> Result<Tensor<T>> {
        let unary = self.generator.predict(image)?;
        if use_crf {
            self.crf.infer(&unary, Some(image))
        } else {
            softmax_channels(&unary)
        }
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint<T>) {
        ck.push_store("generator", &self.generator.params);
        ck.push_store("discriminator", &self.discriminator.params);
        ck.push_store("crf", &self.crf.params);
    }

    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        ck.restore_store("generator", &mut self.generator.params)?;
        ck.restore_store("discriminator", &mut self.discriminator.params)?;
        ck.restore_store("crf", &mut self.crf.params)
    }
}

/// A standardized case ready for the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Element = f32> {
    pub id: String,
    /// `[1, 4, D, H, W]` z-scored modalities.
    pub image: Tensor<T>,
    /// `[1, 4, D, H, W]` one-hot labels.
    pub target: Tensor<T>,
}

impl<T: Element> Sample<T> {
    pub fn from_case(case: &Case) -> Result<Self> {
        Ok(Self {
            id: case.volume.id.clone(),
            image: zscore(&case.volume).to_tensor(),
            target: labels_to_channels(&case.labels)?,
        })
    }
}

/// Concatenates `[1, C, ...]` tensors along the batch axis.
pub fn stack<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("empty batch"))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    shape[0] *= parts.len();
    Tensor::from_vec(&shape, data)
}

/// Fixed-seed split of `n` case indices into training and validation sets.
/// Voxel count per class over one-hot targets `[N, 4, D, H, W]`.
pub fn class_frequencies<T: Element>(targets: &[&Tensor<T>]) -> Result<[f64; NUM_CLASSES]> {
    let mut counts = [0.0; NUM_CLASSES];
    for t in targets {
        if t.rank() != 5 || t.shape()[1] != NUM_CLASSES {
            return Err(Error::shape(
                "class frequencies",
                t.shape(),
                &[1, NUM_CLASSES, 16, 16, 16],
            ));
        }
        for n in 0..t.shape()[0] {
            for (c, count) in counts.iter_mut().enumerate() {
                *count += t
                    .channel(n, c)
                    .iter()
                    .map(|v| v.to_f64_lossy())
                    .sum::<f64>();
            }
        }
    }
    Ok(counts)
}

pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, SPLIT_STREAM)));
    let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).min(n.saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub gdl: f64,
    /// Not written to CSV; equals `loss_g − alpha·gdl`.
    pub adversarial: f64,
    pub dice_train: f64,
    /// `None` when there is no validation set.
    pub dice_val: Option<f64>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_g,loss_d,gdl,dice_train,dice_val,seconds";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn rows(&self) -> &[TrainLogRow] {
        &self.rows
    }

    pub fn push(&mut self, row: TrainLogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::contract(format!(
                    "log epoch {} does not follow {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let val = r.dice_val.map(|v| format!("{v:.9}")).unwrap_or_default();
            writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{:.9},{},{:.3}",
                r.epoch, r.loss_g, r.loss_d, r.gdl, r.dice_train, val, r.seconds
            )
            .expect("string write");
        }
        s
    }

    /// Parses a log written by [`TrainLog::to_csv`]. The adversarial column
    /// is not stored and comes back as NaN.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOG_HEADER) {
            return Err(Error::contract(format!(
                "training log must start with `{LOG_HEADER}`"
            )));
        }
        let mut log = TrainLog::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::contract(format!("training log line {}: {what}", n + 2));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let num = |i: usize| {
                fields[i]
                    .parse::<f64>()
                    .map_err(|_| bad(&format!("bad number {:?}", fields[i])))
            };
            log.push(TrainLogRow {
                epoch: fields[0].parse().map_err(|_| bad("bad epoch"))?,
                loss_g: num(1)?,
                loss_d: num(2)?,
                gdl: num(3)?,
                adversarial: f64::NAN,
                dice_train: num(4)?,
                dice_val: if fields[5].is_empty() {
                    None
                } else {
                    Some(num(5)?)
                },
                seconds: num(6)?,
            })?;
        }
        Ok(log)
    }
}

/// Update applied during one training iteration, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Discriminator,
    Generator,
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub row: TrainLogRow,
    /// Validation soft-Dice improved on every earlier epoch.
    pub improved: bool,
}

pub struct Trainer<T: Element = f32> {
    pub config: TrainConfig,
    pub models: Models<T>,
    adam_generator: AdamState<T>,
    adam_crf: AdamState<T>,
    adam_discriminator: AdamState<T>,
    samples: Vec<Sample<T>>,
    train: Vec<usize>,
    val: Vec<usize>,
    pub log: TrainLog,
    /// Completed epochs.
    pub epoch: usize,
    pub best_dice_val: f64,
    /// Wall-clock seconds are logged as 0 when false.
    pub record_time: bool,
    /// When set, every update is appended here.
    pub steps: Option<Vec<Step>>,
    config_hash: u64,
}

impl<T: Element> Trainer<T> {
    /// Builds a trainer over `samples`. The generator head bias is set to
    /// the class prior of the training split.
    pub fn new(
        mut models: Models<T>,
        samples: Vec<Sample<T>>,
        config: TrainConfig,
        config_hash: u64,
    ) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::contract("training needs at least one case"));
        }
        let (train, val) = split_indices(samples.len(), config.seed);
        let targets: Vec<&Tensor<T>> = train.iter().map(|&i| &samples[i].target).collect();
        models
            .generator
            .set_class_prior(&class_frequencies(&targets)?)?;
        Ok(Self {
            adam_generator: AdamState::new(&models.generator.params),
            adam_crf: AdamState::new(&models.crf.params),
            adam_discriminator: AdamState::new(&models.discriminator.params),
            models,
            samples,
            train,
            val,
            config,
            log: TrainLog::default(),
            epoch: 0,
            best_dice_val: f64::NEG_INFINITY,
            record_time: true,
            steps: None,
            config_hash,
        })
    }

    pub fn train_ids(&self) -> Vec<&str> {
        self.train
            .iter()
            .map(|&i| self.samples[i].id.as_str())
            .collect()
    }

    pub fn val_ids(&self) -> Vec<&str> {
        self.val
            .iter()
            .map(|&i| self.samples[i].id.as_str())
            .collect()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let images: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let targets: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.samples[i].target).collect();
        Ok((stack(&images)?, stack(&targets)?))
    }

    fn record(&mut self, step: Step) {
        if let Some(s) = self.steps.as_mut() {
            s.push(step);
        }
    }

    fn discriminator_step(
        &mut self,
        image: &Tensor<T>,
        target: &Tensor<T>,
        fake: &Tensor<T>,
        epoch: usize,
    ) -> Result<f64> {
        let d = &self.models.discriminator;
        let mut g = Graph::new();
        let bound = d.params.bind(&mut g, true);
        let x = g.constant(image.clone());
        let y = g.constant(target.clone());
        let yhat = g.constant(fake.clone());
        let d_real = d.forward(&mut g, &bound, x, y)?;
        let d_fake = d.forward(&mut g, &bound, x, yhat)?;
        let loss = discriminator_loss(&mut g, d_real, d_fake)?;
        let value = g.value(loss).data()[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Numeric {
                term: "loss_d",
                epoch,
            });
        }
        let grads = g.backward(loss)?;
        let grads = d.params.collect_grads(&grads, &bound);
        let adam = self.config.adam();
        adam_step(
            &mut self.models.discriminator.params,
            &grads,
            &mut self.adam_discriminator,
            &adam,
        )?;
        self.record(Step::Discriminator);
        Ok(value)
    }

    /// One outer iteration on `batch`: `k_disc_steps` critic updates, the
    /// first on this batch's beliefs and the rest on freshly drawn batches,
    /// then one generator + CRF update.
    fn iteration(&mut self, batch: &[usize], rng: &mut Rng, epoch: usize) -> Result<[f64; 5]> {
        let (image, target) = self.batch(batch)?;
        let mut g = Graph::new();
        let pass = self.models.forward(&mut g, &image, rng)?;
        let beliefs = g.value(pass.beliefs).clone();
        let mut loss_d = self.discriminator_step(&image, &target, &beliefs, epoch)?;
        for _ in 1..self.config.k_disc_steps {
            let extra: Vec<usize> = (0..batch.len())
                .map(|_| self.train[rng.random_range(0..self.train.len())])
                .collect();
            let (x, y) = self.batch(&extra)?;
            let mut side = Graph::new();
            let fake = self.models.forward(&mut side, &x, rng)?;
            let fake = side.value(fake.beliefs).clone();
            loss_d += self.discriminator_step(&x, &y, &fake, epoch)?;
        }
        loss_d /= self.config.k_disc_steps as f64;

        let cfg = &self.config;
        let out =
            self.models
                .generator_objective(&mut g, &pass, &target, cfg.alpha, cfg.gdl_eps)?;
        for (term, v) in [
            ("adversarial term", out.adversarial),
            ("gdl", out.gdl),
            ("loss_g", out.loss_g),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric { term, epoch });
            }
        }
        let adam = self.config.adam();
        adam_step(
            &mut self.models.generator.params,
            &out.generator_grads,
            &mut self.adam_generator,
            &adam,
        )?;
        adam_step(
            &mut self.models.crf.params,
            &out.crf_grads,
            &mut self.adam_crf,
            &adam,
        )?;
        self.record(Step::Generator);
        let dice = soft_dice(&target, &beliefs)?;
        Ok([out.loss_g, loss_d, out.gdl, out.adversarial, dice])
    }

    pub fn validation_dice(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for &i in &self.val {
            let s = &self.samples[i];
            total += soft_dice(&s.target, &self.models.segment(&s.image, true)?)?;
        }
        Ok(Some(total / self.val.len() as f64))
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut rng = rng_from_seed(derive_seed(self.config.seed, EPOCH_STREAM + epoch as u64));
        let mut order = self.train.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let batches: Vec<Vec<usize>> = order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        for batch in &batches {
            let v = self.iteration(batch, &mut rng, epoch)?;
            for (s, x) in sums.iter_mut().zip(v) {
                *s += x;
            }
        }
        let n = batches.len() as f64;
        let [loss_g, loss_d, gdl, adversarial, dice_train] = sums.map(|s| s / n);
        let dice_val = self.validation_dice()?;
        let improved = dice_val.is_some_and(|v| v > self.best_dice_val);
        if let Some(v) = dice_val.filter(|_| improved) {
            self.best_dice_val = v;
        }
        let row = TrainLogRow {
            epoch,
            loss_g,
            loss_d,
            gdl,
            adversarial,
            dice_train,
            dice_val,
            seconds: if self.record_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.log.push(row.clone())?;
        self.epoch = epoch;
        Ok(EpochReport { row, improved })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(self.config_hash);
        self.models.write_checkpoint(&mut ck);
        for (name, state) in [
            ("generator", &self.adam_generator),
            ("crf", &self.adam_crf),
            ("discriminator", &self.adam_discriminator),
        ] {
            for (k, (m, v)) in state.first.iter().zip(&state.second).enumerate() {
                ck.push(format!("adam.{name}.first/{k}"), m.clone());
                ck.push(format!("adam.{name}.second/{k}"), v.clone());
            }
            ck.push_scalar(format!("adam.{name}.step"), state.step as f64);
        }
        ck.push_scalar("trainer.epoch", self.epoch as f64);
        ck.push_scalar("trainer.best_dice_val", self.best_dice_val);
        ck
    }

    /// Restores models, optimizer moments and the epoch counter; the next
    /// epoch then replays exactly as in the uninterrupted run.
    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        if ck.config_hash != self.config_hash {
            return Err(Error::config(
                "config_hash",
                format!(
                    "checkpoint {:016x} does not match {:016x}",
                    ck.config_hash, self.config_hash
                ),
            ));
        }
        self.models.restore(ck)?;
        for (name, state) in [
            ("generator", &mut self.adam_generator),
            ("crf", &mut self.adam_crf),
            ("discriminator", &mut self.adam_discriminator),
        ] {
            for k in 0..state.first.len() {
                for (kind, slot) in [
                    ("first", &mut state.first[k]),
                    ("second", &mut state.second[k]),
                ] {
                    let t = ck.get(&format!("adam.{name}.{kind}/{k}"))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::shape("checkpoint restore", slot.shape(), t.shape()));
                    }
                    *slot = t.clone();
                }
            }
            state.step = ck.scalar(&format!("adam.{name}.step"))? as u64;
        }
        self.epoch = ck.scalar("trainer.epoch")? as usize;
        self.best_dice_val = ck.scalar("trainer.best_dice_val")?;
        Ok(())
    }
}

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.vgck";
pub const FINAL_CHECKPOINT: &str = "final.vgck";

/// Runs the remaining epochs. With `out`, rewrites the log after every
/// epoch, saves the best-validation checkpoint and a final one.
pub fn train<T: Element>(trainer: &mut Trainer<T>, out: Option<&Path>) -> Result<()> {
    while trainer.epoch < trainer.config.epochs {
        let report = trainer.run_epoch()?;
        if let Some(dir) = out {
            let log_path = dir.join(LOG_FILE);
            std::fs::write(&log_path, trainer.log.to_csv()).map_err(|e| Error::io(&log_path, e))?;
            if report.improved
                || (report.row.dice_val.is_none() && trainer.epoch == trainer.config.epochs)
            {
                trainer.checkpoint().save(dir.join(BEST_CHECKPOINT))?;
            }
        }
    }
    if let Some(dir) = out {
        trainer.checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(())
}

//! Minibatch Adam training on per-channel samples with validation-based selection.
//!
//! Every channel of every clip is an independent training sample. After each
//! epoch the model is scored on validation clips with channel-averaged
//! posteriors, and the best epoch (earliest on ties) is kept.
//!
//! Shuffling and dropout draw from streams keyed by `(seed, epoch)`, so a run
//! resumed from a checkpoint replays exactly what the uninterrupted run would.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Tensor};
use crate::dataset::Dataset;
use crate::error::{bail, Result};
use crate::eval::{macro_f1, ConfusionMatrix};
use crate::features::GlobalNormStats;
use crate::fusion::{argmax, PredictionRecord};
use crate::model::{self, SamGcnn};

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{config_digest, config_text, Checkpoint};

pub const LOG_HEADER: &str = "epoch,train_loss,train_acc,val_acc";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Accuracy,
    MacroF1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-channel samples per minibatch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of the test split held out for model selection.
    pub validation_fraction: f64,
    pub seed: u64,
    pub adam: AdamParams,
    pub selection: Selection,
    /// Multiply the learning rate by `lr_decay_factor` every this many epochs; 0 disables.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256 * 4,
            epochs: 300,
            validation_fraction: 0.05,
            seed: 0,
            adam: AdamParams::default(),
            selection: Selection::Accuracy,
            lr_decay_every: 0,
            lr_decay_factor: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate {} must be finite and non-negative", self.learning_rate);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bail!(Config, "validation fraction {} outside (0, 1)", self.validation_fraction);
        }
        let AdamParams { beta1, beta2, epsilon } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            bail!(Config, "adam parameters out of range");
        }
        if !(self.lr_decay_factor > 0.0) {
            bail!(Config, "lr decay factor must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        let k = (epoch.saturating_sub(1) / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay_factor.powi(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Per-sample accuracy of the training-mode forward passes.
    pub train_acc: f64,
    /// `NaN` without validation clips.
    pub val_acc: f64,
    pub val_macro_f1: f64,
    pub step_losses: Vec<f64>,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.epoch, self.train_loss, self.train_acc, self.val_acc)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Stratified, seeded split of `labels` into (validation, remainder) indices.
///
/// Each class contributes `round(fraction * count)` clips, at least one.
pub fn validation_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(Config, "validation fraction {} outside (0, 1)", fraction);
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let k = ((fraction * members.len() as f64).round() as usize).max(1);
        val.extend_from_slice(&members[..k]);
    }
    val.sort_unstable();
    let rest = (0..labels.len()).filter(|i| val.binary_search(i).is_err()).collect();
    Ok((val, rest))
}

/// Clip-level predictions with channel-averaged posteriors.
pub fn predict_dataset(model: &SamGcnn, data: &Dataset) -> Result<Vec<PredictionRecord>> {
    data.clips.iter().map(|c| Ok(PredictionRecord::new(model.score_clip(c)?))).collect()
}

/// Confusion matrix of `model` on the labeled clips of `data`.
pub fn evaluate(model: &SamGcnn, data: &Dataset) -> Result<ConfusionMatrix> {
    let labels = data.labels(model.num_classes())?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (rec, label) in predict_dataset(model, data)?.iter().zip(labels) {
        cm.record(label, rec.predicted)?;
    }
    Ok(cm)
}

fn round_to_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + stream);
    rng
}

/// Owns the model and optimizer for the duration of a run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: SamGcnn,
    adam: AdamState,
    epoch: usize,
    train: &'a Dataset,
    val: &'a Dataset,
    train_labels: Vec<usize>,
    norm: Option<GlobalNormStats>,
    best: Option<Checkpoint>,
    log: Vec<EpochLog>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: SamGcnn, cfg: TrainConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        let adam = AdamState::new(&model.params);
        Self::build(model, adam, 0, cfg, train, val, None)
    }

    /// Continues from `ckpt`, which becomes the initial best candidate.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        let mut t = Self::build(ckpt.model.clone(), ckpt.adam.clone(), ckpt.epoch, cfg, train, val, ckpt.norm.clone())?;
        t.best = Some(ckpt);
        Ok(t)
    }

    fn build(
        mut model: SamGcnn,
        adam: AdamState,
        epoch: usize,
        cfg: TrainConfig,
        train: &'a Dataset,
        val: &'a Dataset,
        norm: Option<GlobalNormStats>,
    ) -> Result<Self> {
        cfg.validate()?;
        model.config.validate()?;
        if train.is_empty() {
            bail!(Data, "training set is empty");
        }
        let [bins, frames] = model.config.input_shape();
        for d in [train, val] {
            if d.bins != bins || d.frames != frames {
                bail!(Shape, "features are {}x{} but the model expects {}x{}", d.bins, d.frames, bins, frames);
            }
        }
        let train_labels = train.labels(model.num_classes())?;
        val.labels(model.num_classes())?;
        model.params.tensors_mut().iter_mut().for_each(|t| round_to_f32(t.data_mut()));
        Ok(Self { cfg, model, adam, epoch, train, val, train_labels, norm, best: None, log: Vec::new() })
    }

    /// Normalization statistics recorded in every checkpoint.
    pub fn with_norm(mut self, norm: GlobalNormStats) -> Self {
        self.norm = Some(norm);
        self
    }

    pub fn model(&self) -> &SamGcnn {
        &self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn checkpoint(&self, val_acc: f64) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            val_acc,
            seed: self.cfg.seed,
            norm: self.norm.clone(),
            validation_clips: self.val.clips.iter().map(|c| c.clip_id.clone()).collect(),
        }
    }

    /// Forward, backward and update on one minibatch; returns the mean loss and correct count.
    pub fn step(&mut self, samples: &[(usize, usize)], lr: f64, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
        let (g, t) = self.train.batch(samples)?;
        let labels: Vec<usize> = samples.iter().map(|&(c, _)| self.train_labels[c]).collect();
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape);
        let (gv, tv) = (tape.constant(g), tape.constant(t));
        let out = model::forward(&self.model.config, &mut tape, &p, &mut self.model.bn, gv, tv, Mode::Train, rng)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            bail!(Numeric, "loss became {} in epoch {}", value, self.epoch + 1);
        }
        let c = self.model.num_classes();
        let logits = tape.value(out.logits).data();
        let correct = labels.iter().enumerate().filter(|&(i, &l)| argmax(&logits[i * c..(i + 1) * c]) == l).count();
        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> =
            p.vars().iter().zip(self.model.params.tensors()).map(|(v, t)| grads.get_or_zeros(*v, t)).collect();
        drop(tape);
        adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam, lr, &self.cfg.adam)?;
        for t in self.model.params.tensors_mut().iter_mut().chain(&mut self.adam.m).chain(&mut self.adam.v) {
            round_to_f32(t.data_mut());
        }
        let names: Vec<String> = self.model.bn.names().map(str::to_string).collect();
        for name in names {
            let s = self.model.bn.get_mut(&name)?;
            round_to_f32(&mut s.running_mean);
            round_to_f32(&mut s.running_var);
        }
        Ok((value, correct))
    }

    /// Trains one epoch and scores the validation clips.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch + 1;
        let mut samples = self.train.samples();
        samples.shuffle(&mut epoch_rng(self.cfg.seed, epoch, 0));
        let mut dropout_rng = epoch_rng(self.cfg.seed, epoch, 1);
        let lr = self.cfg.lr_at(epoch);
        let mut step_losses = Vec::new();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in samples.chunks(self.cfg.batch_size) {
            let (loss, ok) = self.step(batch, lr, &mut dropout_rng)?;
            step_losses.push(loss);
            loss_sum += loss * batch.len() as f64;
            correct += ok;
        }
        self.epoch = epoch;
        let (val_acc, val_macro_f1) = if self.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let cm = evaluate(&self.model, self.val)?;
            (cm.accuracy(), macro_f1(&cm).macro_f1)
        };
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / samples.len() as f64,
            train_acc: correct as f64 / samples.len() as f64,
            val_acc,
            val_macro_f1,
            step_losses,
        };
        let score = |acc: f64, f1: f64| match self.cfg.selection {
            Selection::Accuracy => acc,
            Selection::MacroF1 => f1,
        };
        let current = score(log.val_acc, log.val_macro_f1);
        let improved = match &self.best {
            None => true,
            // without validation data the latest epoch wins
            Some(_) if current.is_nan() => true,
            Some(b) => current > self.best_score(b),
        };
        if improved {
            self.best = Some(self.checkpoint(log.val_acc));
        }
        self.log.push(log.clone());
        Ok(log)
    }

    fn best_score(&self, best: &Checkpoint) -> f64 {
        match self.cfg.selection {
            Selection::Accuracy => best.val_acc,
            Selection::MacroF1 => {
                self.log.iter().find(|l| l.epoch == best.epoch).map_or(f64::NEG_INFINITY, |l| l.val_macro_f1)
            }
        }
    }

    /// Runs until `cfg.epochs` epochs are complete, calling `on_epoch` after each.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log);
        }
        let last_acc = self.log.last().map_or(f64::NAN, |l| l.val_acc);
        let last = self.checkpoint(last_acc);
        let best = self.best.clone().unwrap_or_else(|| last.clone());
        Ok(TrainOutcome { best, last, log: self.log })
    }
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(model: SamGcnn, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone(), train, val)?.run(|_| {})
}

//! Joint optimization of backbone, head and projection under
//! `ce + λ·dist`, with seeded per-epoch shuffling, evaluation and
//! resumable state.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use optim::{cosine_lr, sgd_step};

use crate::autodiff::Graph;
use crate::cache::EmbeddingCache;
use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::losses::{distance_loss, total_objective, AlignmentConfig};
use crate::models::{init_params, ModelBundle, ModelConfig};
use crate::seeding;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// `None` removes the alignment path entirely (plain cross-entropy).
    pub alignment: Option<AlignmentConfig>,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.05,
            min_lr: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 1,
            alignment: Some(AlignmentConfig::default()),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.base_lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return bad(format!("min_lr {} must lie in [0, base_lr]", self.min_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(a) = &self.alignment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        cosine_lr(epoch, self.epochs, self.base_lr, self.min_lr)
    }

    /// The λ in effect; a disabled path counts as zero.
    pub fn lambda(&self) -> f64 {
        self.alignment.map_or(0.0, |a| a.lambda)
    }

    /// Same run with the distance term switched off.
    pub fn baseline(&self) -> Self {
        Self { alignment: None, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub ce_loss: f64,
    pub dist_loss: f64,
    pub total_loss: f64,
    pub train_top1: f64,
    /// `None` on epochs skipped by `eval_every`.
    pub val_top1: Option<f64>,
}

impl EpochRecord {
    fn bits(&self) -> [u64; 7] {
        [
            self.epoch as u64,
            self.lr.to_bits(),
            self.ce_loss.to_bits(),
            self.dist_loss.to_bits(),
            self.total_loss.to_bits(),
            self.train_top1.to_bits(),
            self.val_top1.map_or(u64::MAX, f64::to_bits),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_val_top1: f64,
    pub wall_time: Duration,
}

pub const REPORT_HEADER: &str = "epoch,lr,ce_loss,dist_loss,total_loss,train_top1,val_top1";

impl TrainReport {
    /// Bitwise equality of every record and the final accuracy; wall time
    /// is ignored.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.final_val_top1.to_bits() == other.final_val_top1.to_bits()
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| a.bits() == b.bits())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let val = r.val_top1.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.epoch, r.lr, r.ce_loss, r.dist_loss, r.total_loss, r.train_top1, val
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything needed to continue training: parameters, momentum buffers
/// and the index of the next epoch to run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelBundle,
    pub velocity: Vec<Vec<f64>>,
    pub next_epoch: usize,
}

impl TrainState {
    pub fn new(model: ModelBundle) -> Self {
        let velocity = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { model, velocity, next_epoch: 0 }
    }
}

/// Argmax (lowest index wins ties) accuracy of row-major `logits`.
pub fn top1_from_logits(logits: &[f64], classes: usize, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Usage("accuracy of an empty set".into()));
    }
    if logits.len() != labels.len() * classes {
        return Err(Error::dim("top1", format!("{} logits for {} labels × {classes}", logits.len(), labels.len())));
    }
    let correct = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy of `model` on a dataset.
pub fn evaluate(model: &ModelBundle, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let per = data.image_len();
    let mut logits = Vec::with_capacity(data.len() * model.config().num_classes);
    for chunk in data.images().chunks(EVAL_CHUNK * per) {
        logits.extend(model.logits(chunk)?);
    }
    top1_from_logits(&logits, model.config().num_classes, data.labels())
}

/// A configured training run over fixed train/validation splits.
///
/// Construction performs every pre-flight check: coverage of all dataset
/// ids by the cache, matching embedding width, and input standardization
/// fitted on the training split.
pub struct Trainer {
    config: TrainConfig,
    train: Dataset,
    val: Dataset,
    /// `train.len() × k`, widened from the cache.
    text: Vec<f64>,
    k: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: &Dataset, val: &Dataset, cache: &EmbeddingCache) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Validation("train and validation splits must be non-empty".into()));
        }
        if train.shape() != val.shape() {
            return Err(Error::Validation("train and validation image shapes differ".into()));
        }
        for id in train.ids().iter().chain(val.ids()) {
            if cache.row_index(id).is_none() {
                return Err(Error::MissingEmbedding(id.clone()));
            }
        }
        let k = cache.k();
        let mut text = Vec::with_capacity(train.len() * k);
        for id in train.ids() {
            text.extend(cache.lookup(id)?.iter().map(|&v| f64::from(v)));
        }
        let stats = ChannelStats::fit(train);
        Ok(Self {
            config,
            train: stats.apply(train),
            val: stats.apply(val),
            text,
            k,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Standardized validation split.
    pub fn val(&self) -> &Dataset {
        &self.val
    }

    fn check_model(&self, model: &ModelBundle) -> Result<()> {
        let cfg = model.config();
        if cfg.k != self.k {
            return Err(Error::Config(format!("model k={} but cache k={}", cfg.k, self.k)));
        }
        if cfg.input_shape != self.train.shape() {
            return Err(Error::Config(format!(
                "model expects inputs {:?}, dataset has {:?}",
                cfg.input_shape,
                self.train.shape()
            )));
        }
        if cfg.num_classes < self.train.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, dataset has {}",
                cfg.num_classes,
                self.train.num_classes()
            )));
        }
        Ok(())
    }

    /// Trains `model` in place for all configured epochs.
    pub fn fit(&self, model: &mut ModelBundle) -> Result<TrainReport> {
        let mut state = TrainState::new(model.clone());
        let report = self.fit_from(&mut state, None)?;
        *model = state.model;
        Ok(report)
    }

    /// Runs epochs `state.next_epoch .. min(until, epochs)` and returns
    /// their records.
    pub fn fit_from(&self, state: &mut TrainState, until: Option<usize>) -> Result<TrainReport> {
        self.check_model(&state.model)?;
        let start = Instant::now();
        let end = until.unwrap_or(self.config.epochs).min(self.config.epochs);
        let mut records = Vec::new();
        for epoch in state.next_epoch..end {
            records.push(self.run_epoch(state, epoch)?);
            state.next_epoch = epoch + 1;
        }
        let final_val_top1 = match records.last().and_then(|r| r.val_top1) {
            Some(v) => v,
            None => evaluate(&state.model, &self.val)?,
        };
        Ok(TrainReport {
            epochs: records,
            final_val_top1,
            wall_time: start.elapsed(),
        })
    }

    fn run_epoch(&self, state: &mut TrainState, epoch: usize) -> Result<EpochRecord> {
        let cfg = &self.config;
        let lr = cfg.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seeding::rng(cfg.seed, "epoch-shuffle", epoch as u64));
        let alignment = cfg.alignment.filter(|a| a.lambda > 0.0);

        let (mut ce_sum, mut dist_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        let per = self.train.image_len();
        let classes = state.model.config().num_classes;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let b = batch.len();
            let mut pixels = Vec::with_capacity(b * per);
            let mut labels = Vec::with_capacity(b);
            for &i in batch {
                pixels.extend_from_slice(self.train.image(i));
                labels.push(self.train.labels()[i]);
            }

            let model = &state.model;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let x = model.input(&mut g, b, pixels)?;
            let features = model.forward_features(&mut g, &bound, x)?;
            let logits = model.classify(&mut g, &bound, features)?;
            let ce = g.softmax_cross_entropy(logits, &labels)?;
            let (objective, dist_value) = match alignment {
                Some(a) => {
                    let mut text = Vec::with_capacity(b * self.k);
                    for &i in batch {
                        text.extend_from_slice(&self.text[i * self.k..(i + 1) * self.k]);
                    }
                    let dist = distance_loss(&mut g, &text, features, bound.projection(), a.tau, a.normalize_projection)?;
                    let total = total_objective(&mut g, ce, dist, a.lambda)?;
                    (total, g.value(dist).item())
                }
                None => (ce, 0.0),
            };
            let total_value = g.value(objective).item();
            if !total_value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {total_value} at epoch {}, batch {batch_idx}",
                    epoch + 1
                )));
            }
            g.backward(objective)?;

            correct += g
                .value(logits)
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            ce_sum += g.value(ce).item() * b as f64;
            dist_sum += dist_value * b as f64;
            total_sum += total_value * b as f64;

            let grads: Vec<Vec<f64>> = bound
                .vars()
                .iter()
                .map(|&v| g.grad(v).expect("parameters are trainable leaves").to_vec())
                .collect();
            drop(g);
            for ((param, grad), vel) in state.model.params_mut().iter_mut().zip(&grads).zip(&mut state.velocity) {
                if alignment.is_none() && param.name == "projection" {
                    continue;
                }
                let wd = if param.decays() { cfg.weight_decay } else { 0.0 };
                sgd_step(param.value.data_mut(), grad, vel, lr, cfg.momentum, wd);
            }
        }
        if !state.model.all_finite() {
            return Err(Error::Numerical(format!("parameters diverged during epoch {}", epoch + 1)));
        }

        let n = self.train.len() as f64;
        let is_eval = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val_top1 = if is_eval { Some(evaluate(&state.model, &self.val)?) } else { None };
        Ok(EpochRecord {
            epoch: epoch + 1,
            lr,
            ce_loss: ce_sum / n,
            dist_loss: dist_sum / n,
            total_loss: total_sum / n,
            train_top1: correct as f64 / n,
            val_top1,
        })
    }
}

/// Initializes a model with `init_seed = config.seed` and trains it.
pub fn run_trial(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    cache: &EmbeddingCache,
) -> Result<TrainReport> {
    let trainer = Trainer::new(config.clone(), train, val, cache)?;
    let mut model = init_params(&ModelConfig { init_seed: config.seed, ..model_config.clone() })?;
    trainer.fit(&mut model)
}

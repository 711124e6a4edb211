//! AdamW optimization with a per-step cosine schedule, training and
//! evaluation loops, history CSV and checkpoint helpers.

mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, cosine_lr, AdamW};

use crate::data::{batches, sequential, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::network::{checkpoint, CliffordNet, Module};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub warmup_epochs: usize,
    /// `None` trains on the raw images.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            base_lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            batch_size: 128,
            eval_batch_size: 256,
            seed: 0,
            grad_clip: Some(5.0),
            warmup_epochs: 0,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.base_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::Config(format!(
                "need base_lr > min_lr >= 0, got {} and {}",
                self.base_lr, self.min_lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.warmup_epochs != 0 {
            return Err(Error::Config("warm-up is not supported; warmup_epochs must be 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of every batch, grouped by epoch.
    pub batch_losses: Vec<Vec<f64>>,
}

pub const CSV_HEADER: &str = "epoch,lr,train_loss,eval_top1,wall_seconds";

impl History {
    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The CSV without the wall-clock column, which is the part that must be
    /// reproducible across runs.
    pub fn to_csv_untimed(&self) -> String {
        self.render(false)
    }

    fn render(&self, timed: bool) -> String {
        let mut out = String::new();
        if timed {
            out.push_str(CSV_HEADER);
        } else {
            out.push_str("epoch,lr,train_loss,eval_top1");
        }
        out.push('\n');
        for r in &self.epochs {
            let _ = write!(out, "{},{:e},{:.9},{:.6}", r.epoch, r.lr, r.train_loss, r.eval_top1);
            if timed {
                let _ = write!(out, ",{:.3}", r.wall_seconds);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Median batch loss of epoch `epoch` (1-based).
    pub fn median_loss(&self, epoch: usize) -> Option<f64> {
        let mut v = self.batch_losses.get(epoch.checked_sub(1)?)?.clone();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }
}

/// Fraction of rows whose arg-max equals the label. Ties resolve to the
/// lowest index.
pub fn top1<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let c = logits.channels();
    let hits = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == label
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Top-1 accuracy in eval mode (running batch-norm statistics, no drop-path).
pub fn evaluate(model: &mut CliffordNet<f32>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let mut hits = 0.0;
    for batch in sequential(dataset, batch_size) {
        let logits = model.predict(batch.images)?;
        hits += top1(&logits, &batch.labels) * batch.labels.len() as f64;
    }
    Ok(hits / dataset.len().max(1) as f64)
}

/// One optimizer step on a batch; returns the batch loss. `g` is reset and
/// reused so its buffers carry over between steps.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    g: &mut Graph<f32>,
    model: &mut CliffordNet<f32>,
    optimizer: &mut AdamW<f32>,
    images: Tensor<f32>,
    labels: &[usize],
    lr: f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    g.reset();
    let x = g.constant(images);
    let logits = model.forward(g, x, true, rng)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Data(format!("non-finite training loss {value}")));
    }
    g.backward(loss)?;
    model.zero_grad();
    model.pull_grads(g);
    let mut params = model.params_mut();
    if let Some(clip) = config.grad_clip {
        clip_grad_norm(&mut params, clip);
    }
    optimizer.step(&mut params, lr, config.weight_decay)?;
    Ok(value)
}

/// Trains for `config.epochs`, evaluating on `eval` after every epoch.
/// `on_epoch` sees each record as soon as it is complete.
pub fn train(
    model: &mut CliffordNet<f32>,
    train_set: &Dataset,
    eval_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    if train_set.class_count() > model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            train_set.class_count(),
            model.config.num_classes
        )));
    }
    let per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut optimizer = AdamW::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x6472_6f70);
    let mut history = History::default();
    let start = Instant::now();
    let mut step = 0;
    let mut graph = Graph::new();
    for epoch in 0..config.epochs {
        let epoch_lr = cosine_lr(step, total_steps, config.base_lr, config.min_lr);
        let mut it = batches(train_set, config.batch_size, config.seed, epoch);
        if let Some(aug) = &config.augment {
            let mut aug = aug.clone();
            aug.seed ^= config.seed;
            it = it.augmented(aug);
        }
        let mut losses = Vec::with_capacity(per_epoch);
        let mut weighted = 0.0;
        for batch in it {
            let lr = cosine_lr(step, total_steps, config.base_lr, config.min_lr);
            let loss = train_step(&mut graph, model, &mut optimizer, batch.images, &batch.labels, lr, config, &mut rng)?;
            weighted += loss * batch.labels.len() as f64;
            losses.push(loss);
            step += 1;
        }
        let eval_top1 = evaluate(model, eval_set, config.eval_batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: epoch_lr,
            train_loss: weighted / train_set.len() as f64,
            eval_top1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
        history.batch_losses.push(losses);
    }
    Ok(history)
}

pub fn save_checkpoint(model: &CliffordNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    checkpoint::save(model, path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CliffordNet<f32>> {
    checkpoint::load(path)
}

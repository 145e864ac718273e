//! Training: DiceCE loss, AdamW, cosine schedule, synthetic data, loop.

mod loss;
mod optim;
mod synth;

pub use loss::{dice_ce_loss, one_hot, DICE_EPS};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use synth::{batch_images, synth_volumes, VolumeSample, FOREGROUND_BAND};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::metrics::{mdsc, LabelVolume};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub cosine: bool,
    pub seed: u64,
    /// Also checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 2,
            epochs: 10,
            max_steps: None,
            cosine: true,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Optimizer steps for `samples` training volumes.
    pub fn total_steps(&self, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size);
        let steps = per_epoch * self.epochs;
        self.max_steps.map_or(steps, |m| m.min(steps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Foreground mean Dice of the batch predictions before the update.
    pub train_mdsc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss,train_mdsc\n");
        for s in &self.steps {
            writeln!(out, "{},{},{:e},{},{}", s.step, s.epoch, s.lr, s.loss, s.train_mdsc).expect("string write");
        }
        out
    }
}

/// Argmax over the class axis of `[B, C, D, H, W]` logits.
pub fn predict_labels(logits: &Tensor) -> Result<Vec<LabelVolume>> {
    let s = logits.shape();
    if s.len() != 5 {
        return Err(Error::shape("predict_labels", s, &[5]));
    }
    let (b, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    (0..b)
        .map(|bi| {
            let labels = (0..v)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if logits.data()[(bi * c + k) * v + i] > logits.data()[(bi * c + best) * v + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelVolume::new([s[2], s[3], s[4]], labels)
        })
        .collect()
}

/// Predicted label maps for `samples`, evaluated without recording a tape.
pub fn predict(net: &Network, store: &ParamStore, samples: &[&VolumeSample]) -> Result<Vec<LabelVolume>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let tape = Tape::inference();
        let x = tape.constant(batch_images(&[s])?);
        out.extend(predict_labels(&net.forward(&tape, store, x)?.value())?);
    }
    Ok(out)
}

/// Mean foreground Dice over `samples`.
pub fn evaluate_mdsc(net: &Network, store: &ParamStore, samples: &[&VolumeSample]) -> Result<f64> {
    let preds = predict(net, store, samples)?;
    let classes = net.cfg.classes;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += mdsc(p, &s.label, classes, false)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Loss of `net` on a batch, recorded on `tape`.
pub fn batch_loss<'t>(
    tape: &'t Tape,
    net: &Network,
    store: &ParamStore,
    batch: &[&VolumeSample],
) -> Result<(Var<'t>, Var<'t>)> {
    let x = tape.constant(batch_images(batch)?);
    let logits = net.forward(tape, store, x)?;
    let labels: Vec<&LabelVolume> = batch.iter().map(|s| &s.label).collect();
    Ok((dice_ce_loss(logits, &labels)?, logits))
}

/// Names of parameters whose gradient is missing or exactly zero.
pub fn dead_parameters(store: &ParamStore, grads: &Gradients) -> Vec<String> {
    store
        .ids()
        .filter(|&id| grads.param(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)))
        .map(|id| store.name(id).to_string())
        .collect()
}

/// Where and how often [`train_loop`] writes checkpoints.
pub struct CheckpointPlan<'a> {
    pub path: &'a Path,
    pub every: Option<usize>,
}

/// Trains `net` on `data`, returning one record per optimizer step.
///
/// Batches are drawn from a per-epoch shuffle seeded by `cfg.seed`. A
/// non-finite loss aborts with [`Error::Diverged`]. When `checkpoint` is
/// given, a checkpoint is written at the end (and every `every` steps).
pub fn train_loop(
    net: &Network,
    store: &mut ParamStore,
    data: &[VolumeSample],
    cfg: &TrainConfig,
    checkpoint: Option<CheckpointPlan<'_>>,
    mut observe: impl FnMut(&StepRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let total = cfg.total_steps(data.len());
    let mut opt = AdamW::new(
        store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&VolumeSample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = if cfg.cosine { cosine_lr(step, total, cfg.lr) } else { cfg.lr };
            let tape = Tape::with_seed(cfg.seed.wrapping_add(step as u64));
            let (loss, logits) = match batch_loss(&tape, net, store, &batch) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            };
            let loss_value = loss.value().item()?;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { step });
            }
            let preds = predict_labels(&logits.value())?;
            let train_mdsc = preds
                .iter()
                .zip(&batch)
                .map(|(p, s)| mdsc(p, &s.label, net.cfg.classes, false))
                .sum::<Result<f64>>()?
                / batch.len() as f64;
            let grads = match tape.backward(loss) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            };
            opt.step(store, &grads, lr);
            let record = StepRecord {
                step,
                epoch,
                lr,
                loss: loss_value,
                train_mdsc,
            };
            observe(&record);
            history.steps.push(record);
            step += 1;
            if let Some(plan) = &checkpoint {
                if plan.every.is_some_and(|n| n > 0 && step % n == 0 && step < total) {
                    save_checkpoint(plan.path, &net.cfg, step, store)?;
                }
            }
        }
    }
    if let Some(plan) = &checkpoint {
        save_checkpoint(plan.path, &net.cfg, step, store)?;
    }
    Ok(history)
}

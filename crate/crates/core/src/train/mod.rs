//! Mini-batch training with Adam, a step learning-rate schedule and
//! early stopping on validation accuracy, plus the two pre-training
//! strategies.

mod adam;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};

use crate::dataset::{Partition, SplitPlan};
use crate::dsp::WindowSet;
use crate::error::{Error, Result};
use crate::model::{batch_input, logits_tape, predict, ModelConfig, ModelParams, Mode, ParamSubset};
use crate::numcore::{ops, Tape};
use crate::rng::stream;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PretrainedOnIndividuals,
    PretrainedOnAll,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::PretrainedOnIndividuals => "individuals",
            Strategy::PretrainedOnAll => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halving_epochs: Vec<usize>,
    pub patience: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            batch_size: 32,
            lr0: 1e-3,
            lr_halving_epochs: vec![40, 80],
            patience: 40,
            seed: 0,
            strategy: Strategy::PretrainedOnAll,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("train.batch_size must be ≥ 1".to_string());
        }
        if self.max_epochs == 0 {
            problems.push("train.max_epochs must be ≥ 1".to_string());
        }
        if self.patience > self.max_epochs {
            problems.push(format!(
                "train.patience = {} exceeds max_epochs = {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            problems.push(format!("train.lr0 = {} must be positive", self.lr0));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Learning rate for 1-based `epoch`: halved once for every halving
    /// epoch at or before it.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_halving_epochs.iter().filter(|&&t| t <= epoch).count();
        self.lr0 * 0.5f64.powi(halvings as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc,val_acc,lr\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:.6},{:.4},{:.4},{:e}",
                e.epoch, e.loss, e.train_acc, e.val_acc, e.lr
            )
            .unwrap();
        }
        out
    }
}

/// Window-level accuracy of `params` on `set`.
pub fn accuracy(params: &ModelParams, set: &WindowSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("accuracy over an empty window set".into()));
    }
    let predicted = predict(params, set, EVAL_BATCH)?;
    let correct = predicted
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p == set.label(i))
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Trains the tensors of `params` that require gradients and returns the
/// parameters of the epoch with the best validation accuracy.
pub fn train(
    mut params: ModelParams,
    train_set: &WindowSet,
    val_set: &WindowSet,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty partitions (train {}, validation {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let model = params.config;
    if train_set.window_samples() != model.window_samples {
        return Err(Error::Shape(format!(
            "windows have {} samples, model expects {}",
            train_set.window_samples(),
            model.window_samples
        )));
    }
    let mut shuffle = stream(cfg.seed, "train/shuffle");
    let mut dropout = stream(cfg.seed, "train/dropout");
    let mut state = AdamState::new(params.tensors());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog {
        best_val_acc: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best = params.clone();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.label(i)).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(
                vec![batch.len(), model.window_samples, model.patch_dim()],
                batch_input(train_set, batch),
            )?;
            let logits = logits_tape(&mut tape, &bound, &model, x, &mut Mode::Train(&mut dropout))?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {value} at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += value * batch.len() as f64;
            correct += tape
                .value(logits)
                .chunks_exact(model.n_classes)
                .zip(&labels)
                .filter(|(row, &l)| ops::argmax(row) == l)
                .count();
            let grads = tape.backward(loss)?;
            let per_tensor: Vec<Option<&[f64]>> = bound.vars.iter().map(|&v| grads.get(v)).collect();
            adam_step(params.tensors_mut(), &per_tensor, &mut state, lr);
        }
        if !params.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite at epoch {epoch}")));
        }
        let val_acc = accuracy(&params, val_set)?;
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            lr,
        });
        log.stopped_epoch = epoch;
        if val_acc > log.best_val_acc {
            log.best_val_acc = val_acc;
            log.best_epoch = epoch;
            best.clone_from(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

/// A pre-trained model; `subject` is `None` for the pooled model.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub subject: Option<u32>,
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Pre-trains according to `cfg.strategy` on Day-1 windows, given per
/// subject. Every run starts from the same initialization and seed streams,
/// so a single-subject pool and its individual run are the same run.
pub fn pretrain(
    subjects: &[(u32, WindowSet)],
    plan: &SplitPlan,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<Pretrained>> {
    cfg.validate()?;
    let part = |set: &WindowSet, which: Partition| set.filter(|p| plan.partition_of(p) == Some(which));
    let run = |train_set: WindowSet, val_set: WindowSet| {
        let mut params = ModelParams::init(*model, cfg.seed)?;
        params.set_trainable(ParamSubset::All);
        train(params, &train_set, &val_set, cfg)
    };
    match cfg.strategy {
        Strategy::PretrainedOnAll => {
            let trains: Vec<WindowSet> = subjects.iter().map(|(_, s)| part(s, Partition::Train)).collect();
            let vals: Vec<WindowSet> = subjects.iter().map(|(_, s)| part(s, Partition::Val)).collect();
            let (params, log) = run(
                WindowSet::concat(&trains.iter().collect::<Vec<_>>())?,
                WindowSet::concat(&vals.iter().collect::<Vec<_>>())?,
            )?;
            Ok(vec![Pretrained {
                subject: None,
                params,
                log,
            }])
        }
        Strategy::PretrainedOnIndividuals => subjects
            .par_iter()
            .map(|(s, set)| {
                let (params, log) = run(part(set, Partition::Train), part(set, Partition::Val))?;
                Ok(Pretrained {
                    subject: Some(*s),
                    params,
                    log,
                })
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests;

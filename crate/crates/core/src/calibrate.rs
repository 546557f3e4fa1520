//! Few-shot cross-day calibration: only the patch projection is retrained on
//! a handful of Day-2 repetitions, everything else stays frozen.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{calibration_folds, Day, SplitPlan};
use crate::dsp::WindowSet;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamSubset};
use crate::numcore::Tensor;
use crate::rng::derive_seed;
use crate::train::{accuracy, train, Strategy, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPlan {
    pub reps_per_fold: usize,
    pub folds: Vec<BTreeSet<u8>>,
    pub trainable_subset: ParamSubset,
    pub train_cfg: TrainConfig,
    /// Re-draw the projection before calibrating instead of fine-tuning it.
    pub reinitialize: bool,
}

impl CalibrationPlan {
    /// Folds enumerated from the split plan's calibration repetitions.
    pub fn new(reps_per_fold: usize, split: &SplitPlan, train_cfg: TrainConfig) -> Result<Self> {
        if reps_per_fold > 2 {
            return Err(Error::InvalidArgument(format!(
                "reps_per_fold must be 0, 1 or 2, got {reps_per_fold}"
            )));
        }
        let folds = if reps_per_fold == 0 {
            Vec::new()
        } else {
            calibration_folds(&split.calib_reps, reps_per_fold)?
        };
        Ok(CalibrationPlan {
            reps_per_fold,
            folds,
            trainable_subset: ParamSubset::ProjectionOnly,
            train_cfg,
            reinitialize: false,
        })
    }
}

/// Splits `params` by `subset` into trainable and frozen tensor names,
/// and marks gradients accordingly.
pub fn freeze_partition(params: &mut ModelParams, subset: ParamSubset) -> (Vec<String>, Vec<String>) {
    params.set_trainable(subset);
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    for (name, t) in params.named() {
        if t.requires_grad() {
            trainable.push(name.to_string());
        } else {
            frozen.push(name.to_string());
        }
    }
    (trainable, frozen)
}

/// SHA-256 over the names and exact bits of every tensor outside `subset`.
pub fn frozen_digest(params: &ModelParams, subset: ParamSubset) -> String {
    let mut h = Sha256::new();
    for (i, (name, t)) in params.named().enumerate() {
        if params.in_subset(i, subset) {
            continue;
        }
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub reps: BTreeSet<u8>,
    pub accuracy: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Calibrated parameters per fold, in fold order; empty in 0-rep mode.
    pub params: Vec<ModelParams>,
    pub logs: Vec<TrainLog>,
}

fn redraw_projection(params: &mut ModelParams, seed: u64) -> Result<()> {
    let fresh = ModelParams::init(params.config, seed)?;
    for name in ["embed.weight", "embed.bias"] {
        let src: &Tensor = fresh.get(name).expect("projection exists");
        params
            .get_mut(name)
            .expect("projection exists")
            .data_mut()
            .copy_from_slice(src.data());
    }
    Ok(())
}

/// Calibrates `pretrained` on each fold's Day-2 repetitions and scores the
/// Day-2 test repetitions. `day2` holds one subject's Day-2 windows. Each
/// fold starts from the same pretrained parameters; early stopping watches
/// accuracy on the fold's own calibration windows.
pub fn calibrate(
    pretrained: &ModelParams,
    day2: &WindowSet,
    split: &SplitPlan,
    plan: &CalibrationPlan,
) -> Result<CalibrationOutcome> {
    let test = day2.filter(|p| p.day == split.test_day && split.test_reps.contains(&p.repetition));
    if test.is_empty() {
        return Err(Error::Split("no Day-2 test windows for calibration".into()));
    }
    if plan.reps_per_fold == 0 {
        let acc = accuracy(pretrained, &test)?;
        return Ok(CalibrationOutcome {
            folds: vec![FoldResult {
                fold_id: 0,
                reps: BTreeSet::new(),
                accuracy: acc,
                epochs: 0,
            }],
            mean_accuracy: acc,
            params: Vec::new(),
            logs: Vec::new(),
        });
    }
    let runs: Vec<(FoldResult, ModelParams, TrainLog)> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(fold_id, reps)| {
            if let Some(r) = reps.iter().find(|r| !split.calib_reps.contains(r)) {
                return Err(Error::Split(format!(
                    "fold {fold_id} uses repetition {r}, which is not a calibration repetition"
                )));
            }
            let calib = day2.filter(|p| p.day == split.test_day && reps.contains(&p.repetition));
            let present: BTreeSet<u8> = (0..calib.len()).map(|i| calib.provenance(i).repetition).collect();
            if let Some(r) = reps.iter().find(|r| !present.contains(r)) {
                return Err(Error::Split(format!(
                    "fold {fold_id}: repetition {r} of {} is missing",
                    split.test_day
                )));
            }
            let mut params = pretrained.clone();
            if plan.reinitialize {
                redraw_projection(&mut params, derive_seed(plan.train_cfg.seed, "calibrate/reinit"))?;
            }
            params.set_trainable(plan.trainable_subset);
            let (tuned, log) = train(params, &calib, &calib, &plan.train_cfg)?;
            let acc = accuracy(&tuned, &test)?;
            Ok((
                FoldResult {
                    fold_id,
                    reps: reps.clone(),
                    accuracy: acc,
                    epochs: log.stopped_epoch,
                },
                tuned,
                log,
            ))
        })
        .collect::<Result<_>>()?;
    let mean = runs.iter().map(|r| r.0.accuracy).sum::<f64>() / runs.len() as f64;
    let mut folds = Vec::new();
    let mut params = Vec::new();
    let mut logs = Vec::new();
    for (f, p, l) in runs {
        folds.push(f);
        params.push(p);
        logs.push(l);
    }
    Ok(CalibrationOutcome {
        folds,
        mean_accuracy: mean,
        params,
        logs,
    })
}

/// One row of the per-fold calibration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub subject: u32,
    pub strategy: Strategy,
    pub reps_per_fold: usize,
    pub fold_id: usize,
    pub accuracy: f64,
}

pub fn folds_csv(rows: &[FoldRow]) -> String {
    let mut out = String::from("subject,strategy,reps_per_fold,fold_id,accuracy\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.4}",
            r.subject,
            r.strategy.label(),
            r.reps_per_fold,
            r.fold_id,
            r.accuracy
        )
        .unwrap();
    }
    out
}

/// Day-2 windows only.
pub fn day2_windows(set: &WindowSet) -> WindowSet {
    set.filter(|p| p.day == Day::Day2)
}

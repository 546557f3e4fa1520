//! Experiment configuration and the end-to-end runners built on it.
//!
//! One TOML file describes a whole experiment. Its canonical hash (SHA-256
//! of the key-sorted JSON form, output directory excluded) tags every
//! artifact so results from different configurations are never mixed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alda::{run_alda_experiment, AldaConfig};
use crate::calibrate::{calibrate, CalibrationPlan, FoldRow};
use crate::dataset::{
    generate_subject, load_dataset, Day, Manifest, Recording, SplitPlan, SyntheticShiftConfig,
    DEFAULT_SAMPLE_RATE_HZ,
};
use crate::dsp::{PreprocessChain, PreprocessConfig, WindowSet};
use crate::error::{Error, Result};
use crate::evalstats::{accuracy_table, ExperimentReport, GestureCol, GroupAccuracy, GroupBy, GroupKey, ReportRow};
use crate::model::{predict, ModelConfig, ModelParams, ParamSubset};
use crate::rng::derive_seed;
use crate::train::{accuracy, pretrain, train, Pretrained, Strategy, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Report label of the transformer rows.
pub const VIT_MODEL: &str = "vit";
pub const ALDA_MODEL: &str = "alda";
/// Strategy label of intraday rows.
pub const INTRADAY: &str = "intraday";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        subjects: u32,
        #[serde(default)]
        shift: SyntheticShiftConfig,
    },
    /// A manifest file; relative record paths resolve against its directory.
    Manifest { path: PathBuf },
}

/// Optimizer schedule and stopping rule shared by pre-training and
/// calibration sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halving_epochs: Vec<usize>,
    pub patience: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        let t = TrainConfig::default();
        Schedule {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_halving_epochs: t.lr_halving_epochs,
            patience: t.patience,
        }
    }
}

impl Schedule {
    pub fn train_config(&self, seed: u64, strategy: Strategy) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            lr_halving_epochs: self.lr_halving_epochs.clone(),
            patience: self.patience,
            seed,
            strategy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// Repetitions per fold to evaluate, each of 0, 1 or 2.
    pub modes: Vec<usize>,
    pub reinitialize: bool,
    pub schedule: Schedule,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            modes: vec![0, 1, 2],
            reinitialize: false,
            schedule: Schedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub split: SplitPlan,
    pub strategies: Vec<Strategy>,
    pub train: Schedule,
    pub calibration: CalibrationSection,
    /// Day used for the intraday benchmark.
    pub intraday_day: Day,
    pub alda: AldaConfig,
}

impl Default for ExperimentConfig {
    /// Published hyper-parameters on the five-subject synthetic dataset.
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("out"),
            dataset: DatasetSource::Synthetic {
                subjects: 5,
                shift: SyntheticShiftConfig::default(),
            },
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            split: SplitPlan::default(),
            strategies: vec![Strategy::PretrainedOnIndividuals, Strategy::PretrainedOnAll],
            train: Schedule::default(),
            calibration: CalibrationSection::default(),
            intraday_day: Day::Day2,
            alda: AldaConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A configuration small enough to run end to end on one CPU core in
    /// minutes: the reduced model, non-overlapping windows and short
    /// schedules.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig {
            model: ModelConfig::desk(),
            ..ExperimentConfig::default()
        };
        cfg.preprocess.window.stride_samples = cfg.preprocess.window.window_samples;
        cfg.train = Schedule {
            max_epochs: 20,
            batch_size: 32,
            lr0: 2e-3,
            lr_halving_epochs: vec![12],
            patience: 6,
        };
        cfg.calibration.schedule = Schedule {
            max_epochs: 15,
            batch_size: 32,
            lr0: 2e-3,
            lr_halving_epochs: vec![],
            patience: 3,
        };
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DatasetSource::Manifest { path: m } = &mut cfg.dataset {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut absorb = |r: Result<()>, section: &str| match r {
            Ok(()) => {}
            Err(Error::Config(p)) => problems.extend(p.into_iter().map(|m| format!("{section}: {m}"))),
            Err(e) => problems.push(format!("{section}: {e}")),
        };
        if self.schema_version != SCHEMA_VERSION {
            absorb(
                Err(Error::Config(vec![format!(
                    "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                    self.schema_version
                )])),
                "config",
            );
        }
        match &self.dataset {
            DatasetSource::Synthetic { subjects, shift } => {
                if *subjects == 0 {
                    absorb(Err(Error::Config(vec!["subjects must be ≥ 1".into()])), "dataset");
                }
                absorb(shift.validate(), "dataset.shift");
            }
            DatasetSource::Manifest { path } => {
                if !path.is_file() {
                    absorb(
                        Err(Error::Config(vec![format!("manifest {} does not exist", path.display())])),
                        "dataset",
                    );
                }
            }
        }
        absorb(self.preprocess.window.validate(), "preprocess.window");
        absorb(self.model.validate(), "model");
        if self.model.window_samples != self.preprocess.window.window_samples {
            absorb(
                Err(Error::Config(vec![format!(
                    "model.window_samples = {} but preprocess.window.window_samples = {}",
                    self.model.window_samples, self.preprocess.window.window_samples
                )])),
                "model",
            );
        }
        absorb(self.split.validate(), "split");
        if self.strategies.is_empty() {
            absorb(Err(Error::Config(vec!["at least one strategy is required".into()])), "strategies");
        }
        absorb(self.train.train_config(self.seed, Strategy::PretrainedOnAll).validate(), "train");
        absorb(
            self.calibration
                .schedule
                .train_config(self.seed, Strategy::PretrainedOnAll)
                .validate(),
            "calibration.schedule",
        );
        if let Some(m) = self.calibration.modes.iter().find(|&&m| m > 2) {
            absorb(
                Err(Error::Config(vec![format!("mode {m} is not one of 0, 1, 2")])),
                "calibration.modes",
            );
        }
        absorb(self.alda.validate(), "alda");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Hex SHA-256 of the canonical JSON form with `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let value = serde_json::to_value(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn pretrain_config(&self, strategy: Strategy) -> TrainConfig {
        self.train.train_config(derive_seed(self.seed, "pretrain"), strategy)
    }

    pub fn calibration_config(&self) -> TrainConfig {
        self.calibration
            .schedule
            .train_config(derive_seed(self.seed, "calibrate"), Strategy::PretrainedOnAll)
    }
}

/// One subject's filtered, windowed recordings from both days.
pub type SubjectWindows = (u32, WindowSet);

fn window_subject(recs: &[Recording], cfg: &ExperimentConfig, chain: &PreprocessChain) -> Result<WindowSet> {
    let mut set = WindowSet::empty(cfg.preprocess.window.window_samples);
    for rec in recs {
        set.push_recording(&chain.apply(rec)?, &cfg.preprocess.window)?;
    }
    Ok(set)
}

/// Generates or loads every subject, filters and segments it. Subjects are
/// processed one at a time so only one subject's raw signals are in memory.
pub fn prepare_subjects(cfg: &ExperimentConfig) -> Result<Vec<SubjectWindows>> {
    cfg.validate()?;
    match &cfg.dataset {
        DatasetSource::Synthetic { subjects, shift } => {
            let chain = PreprocessChain::design(&cfg.preprocess, DEFAULT_SAMPLE_RATE_HZ)?;
            (1..=*subjects)
                .map(|s| {
                    let recs = generate_subject(s, shift, derive_seed(cfg.seed, "dataset"))?;
                    Ok((s, window_subject(&recs, cfg, &chain)?))
                })
                .collect()
        }
        DatasetSource::Manifest { path } => {
            let manifest = Manifest::from_path(path)?;
            let root = path.parent().unwrap_or(Path::new("."));
            let recs = load_dataset(root, &manifest)?;
            let chain = PreprocessChain::design(&cfg.preprocess, manifest.layout.sample_rate_hz)?;
            let mut by_subject: BTreeMap<u32, Vec<Recording>> = BTreeMap::new();
            for r in recs {
                by_subject.entry(r.provenance.subject).or_default().push(r);
            }
            by_subject
                .into_iter()
                .map(|(s, recs)| Ok((s, window_subject(&recs, cfg, &chain)?)))
                .collect()
        }
    }
}

fn day_windows(subjects: &[SubjectWindows], day: Day) -> Vec<SubjectWindows> {
    subjects.iter().map(|(s, w)| (*s, w.filter(|p| p.day == day))).collect()
}

/// Pre-trains with `strategy` on every subject's training day.
pub fn run_pretrain(cfg: &ExperimentConfig, subjects: &[SubjectWindows], strategy: Strategy) -> Result<Vec<Pretrained>> {
    pretrain(
        &day_windows(subjects, cfg.split.train_day),
        &cfg.split,
        &cfg.model,
        &cfg.pretrain_config(strategy),
    )
}

/// The pre-trained model that serves `subject`.
pub fn model_for(pretrained: &[Pretrained], subject: u32) -> Result<&ModelParams> {
    pretrained
        .iter()
        .find(|p| p.subject.is_none() || p.subject == Some(subject))
        .map(|p| &p.params)
        .ok_or_else(|| Error::Data(format!("no pre-trained model for subject {subject}")))
}

/// Per-fold Day-2 accuracies of every subject under every configured mode.
pub fn run_calibration(
    cfg: &ExperimentConfig,
    subjects: &[SubjectWindows],
    pretrained: &[Pretrained],
    strategy: Strategy,
) -> Result<Vec<FoldRow>> {
    let mut rows = Vec::new();
    for (subject, set) in subjects {
        let params = model_for(pretrained, *subject)?;
        let day2 = set.filter(|p| p.day == cfg.split.test_day);
        for &mode in &cfg.calibration.modes {
            let mut plan = CalibrationPlan::new(mode, &cfg.split, cfg.calibration_config())?;
            plan.reinitialize = cfg.calibration.reinitialize;
            plan.trainable_subset = ParamSubset::ProjectionOnly;
            let out = calibrate(params, &day2, &cfg.split, &plan)?;
            rows.extend(out.folds.iter().map(|f| FoldRow {
                subject: *subject,
                strategy,
                reps_per_fold: mode,
                fold_id: f.fold_id,
                accuracy: f.accuracy,
            }));
        }
    }
    Ok(rows)
}

fn intraday_sets(cfg: &ExperimentConfig, subjects: &[SubjectWindows]) -> (Vec<WindowSet>, Vec<WindowSet>) {
    let day = cfg.intraday_day;
    let pick = |reps: &std::collections::BTreeSet<u8>| -> Vec<WindowSet> {
        subjects
            .iter()
            .map(|(_, w)| w.filter(|p| p.day == day && reps.contains(&p.repetition)))
            .collect()
    };
    (pick(&cfg.split.train_reps), pick(&cfg.split.test_reps))
}

/// Intraday benchmark model: trained on the pooled training repetitions of
/// `intraday_day` and early-stopped on its test repetitions, since the
/// intraday protocol has no separate validation split.
pub fn train_intraday(cfg: &ExperimentConfig, subjects: &[SubjectWindows]) -> Result<Pretrained> {
    let (trains, tests) = intraday_sets(cfg, subjects);
    let seed = derive_seed(cfg.seed, "intraday");
    let mut params = ModelParams::init(cfg.model, seed)?;
    params.set_trainable(ParamSubset::All);
    let (params, log) = train(
        params,
        &WindowSet::concat(&trains.iter().collect::<Vec<_>>())?,
        &WindowSet::concat(&tests.iter().collect::<Vec<_>>())?,
        &cfg.train.train_config(seed, Strategy::PretrainedOnAll),
    )?;
    Ok(Pretrained {
        subject: None,
        params,
        log,
    })
}

/// Per-subject accuracy of `params` on the intraday test repetitions.
pub fn intraday_accuracy(cfg: &ExperimentConfig, subjects: &[SubjectWindows], params: &ModelParams) -> Result<Vec<(u32, f64)>> {
    let (_, tests) = intraday_sets(cfg, subjects);
    subjects
        .iter()
        .zip(&tests)
        .map(|((s, _), t)| Ok((*s, accuracy(params, t)?)))
        .collect()
}

pub fn run_intraday(cfg: &ExperimentConfig, subjects: &[SubjectWindows]) -> Result<Vec<(u32, f64)>> {
    let model = train_intraday(cfg, subjects)?;
    intraday_accuracy(cfg, subjects, &model.params)
}

/// The all-gesture row followed by one row per gesture for `params` on `set`.
pub fn evaluation_rows(
    params: &ModelParams,
    set: &WindowSet,
    subject: u32,
    model: &str,
    strategy: &str,
) -> Result<Vec<ReportRow>> {
    let predicted = predict(params, set, 256)?;
    let labels = set.labels();
    let row = |gesture, g: &GroupAccuracy| ReportRow {
        subject,
        model: model.into(),
        strategy: strategy.into(),
        reps_per_fold: 0,
        fold: 0,
        gesture,
        windows: g.total,
        accuracy: g.accuracy,
    };
    let mut rows = Vec::new();
    for g in accuracy_table(&predicted, &labels, &[], GroupBy::All)? {
        rows.push(row(GestureCol::All, &g));
    }
    for g in accuracy_table(&predicted, &labels, &[], GroupBy::Gesture)? {
        if let GroupKey::Gesture(k) = g.key {
            rows.push(row(GestureCol::Gesture(k), &g));
        }
    }
    Ok(rows)
}

/// ALDA rows for every configured calibration mode.
pub fn run_alda(cfg: &ExperimentConfig, subjects: &[SubjectWindows]) -> Result<Vec<FoldRow>> {
    let mut rows = Vec::new();
    for &mode in &cfg.calibration.modes {
        let plan = CalibrationPlan::new(mode, &cfg.split, cfg.calibration_config())?;
        rows.extend(run_alda_experiment(subjects, &cfg.split, &plan, &cfg.alda)?);
    }
    Ok(rows)
}

/// Test-window count per subject.
pub fn test_window_counts(cfg: &ExperimentConfig, subjects: &[SubjectWindows]) -> BTreeMap<u32, usize> {
    subjects
        .iter()
        .map(|(s, w)| {
            let n = w
                .filter(|p| p.day == cfg.split.test_day && cfg.split.test_reps.contains(&p.repetition))
                .len();
            (*s, n)
        })
        .collect()
}

/// Report rows for fold results of `model`.
pub fn fold_report_rows(model: &str, rows: &[FoldRow], windows: &BTreeMap<u32, usize>) -> Vec<ReportRow> {
    rows.iter()
        .map(|r| ReportRow {
            subject: r.subject,
            model: model.into(),
            strategy: r.strategy.label().into(),
            reps_per_fold: r.reps_per_fold,
            fold: r.fold_id,
            gesture: GestureCol::All,
            windows: windows.get(&r.subject).copied().unwrap_or(0),
            accuracy: r.accuracy,
        })
        .collect()
}

pub fn intraday_report_rows(accs: &[(u32, f64)], windows: &BTreeMap<u32, usize>) -> Vec<ReportRow> {
    accs.iter()
        .map(|&(subject, accuracy)| ReportRow {
            subject,
            model: VIT_MODEL.into(),
            strategy: INTRADAY.into(),
            reps_per_fold: 0,
            fold: 0,
            gesture: GestureCol::All,
            windows: windows.get(&subject).copied().unwrap_or(0),
            accuracy,
        })
        .collect()
}

/// Everything an end-to-end run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub pretrained: Vec<(Strategy, Vec<Pretrained>)>,
    pub fold_rows: Vec<FoldRow>,
    pub alda_rows: Vec<FoldRow>,
    pub intraday: Vec<(u32, f64)>,
}

/// Which arms of the experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arms {
    pub interday: bool,
    pub intraday: bool,
    pub alda: bool,
}

impl Arms {
    pub const ALL: Arms = Arms {
        interday: true,
        intraday: true,
        alda: true,
    };
}

/// Runs the selected arms on prepared subjects and collects one report.
pub fn run_experiment(cfg: &ExperimentConfig, subjects: &[SubjectWindows], arms: Arms) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let windows = test_window_counts(cfg, subjects);
    let mut rows = Vec::new();
    let mut pretrained = Vec::new();
    let mut fold_rows = Vec::new();
    if arms.interday {
        for &strategy in &cfg.strategies {
            let models = run_pretrain(cfg, subjects, strategy)?;
            fold_rows.extend(run_calibration(cfg, subjects, &models, strategy)?);
            pretrained.push((strategy, models));
        }
        rows.extend(fold_report_rows(VIT_MODEL, &fold_rows, &windows));
    }
    let intraday = if arms.intraday {
        let accs = run_intraday(cfg, subjects)?;
        rows.extend(intraday_report_rows(&accs, &windows));
        accs
    } else {
        Vec::new()
    };
    let alda_rows = if arms.alda {
        let r = run_alda(cfg, subjects)?;
        rows.extend(fold_report_rows(ALDA_MODEL, &r, &windows));
        r
    } else {
        Vec::new()
    };
    Ok(ExperimentOutcome {
        report: ExperimentReport::new(&cfg.hash(), cfg.seed, rows)?,
        pretrained,
        fold_rows,
        alda_rows,
        intraday,
    })
}

/// Appends a `config_hash` column to a CSV table.
pub fn tag_csv(text: &str, hash: &str) -> String {
    let mut out = String::with_capacity(text.len() + 80 * text.lines().count());
    for (i, line) in text.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str(",config_hash\n");
        } else {
            out.push(',');
            out.push_str(hash);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::desk()] {
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn hash_ignores_output_dir_but_not_settings() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.window_samples = 80;
        cfg.train.batch_size = 0;
        cfg.calibration.modes = vec![0, 3];
        cfg.alda.lambda = 2.0;
        cfg.schema_version = 9;
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 5, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::default().to_toml() + "\nbogus = 1\n";
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_manifest_is_a_config_error() {
        let cfg = ExperimentConfig {
            dataset: DatasetSource::Manifest {
                path: "/nonexistent/manifest.toml".into(),
            },
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn csv_tagging() {
        assert_eq!(tag_csv("a,b\n1,2\n", "h"), "a,b,config_hash\n1,2,h\n");
    }
}

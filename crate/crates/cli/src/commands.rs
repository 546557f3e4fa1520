use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mdhgr_core::calibrate::{folds_csv, FoldRow};
use mdhgr_core::dsp::{cache, WindowSet};
use mdhgr_core::evalstats::{
    emit_report, merge_reports, parse_rows_csv, significance_csv, ExperimentReport, GroupId, ReportFormat,
    ReportRow,
};
use mdhgr_core::experiment::{
    evaluation_rows, fold_report_rows, model_for, prepare_subjects, run_alda,
    run_calibration, run_experiment, run_pretrain, tag_csv, test_window_counts, train_intraday, Arms,
    ExperimentConfig, SubjectWindows, ALDA_MODEL, INTRADAY, VIT_MODEL,
};
use mdhgr_core::model::{load_checkpoint, save_checkpoint};
use mdhgr_core::train::{Pretrained, Strategy, TrainLog};
use mdhgr_core::Error;
use serde_json::json;

use crate::{ConfigArgs, Protocol};

/// A loaded config with its hash and output layout.
struct Run {
    cfg: ExperimentConfig,
    hash: String,
}

impl Run {
    fn load(args: &ConfigArgs) -> Result<Run> {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &args.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        let hash = cfg.hash();
        eprintln!("config {} (hash {})", args.config.display(), &hash[..12]);
        Ok(Run { cfg, hash })
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let dir = self.cfg.output_dir.join(sub);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn write(&self, sub: &str, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir(sub)?.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    fn write_tagged(&self, sub: &str, name: &str, csv: &str) -> Result<PathBuf> {
        self.write(sub, name, &tag_csv(csv, &self.hash))
    }

    fn emit(&self, report: &ExperimentReport, stem: &str) -> Result<()> {
        let dir = self.dir("results")?;
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            for path in emit_report(report, &dir, stem, format)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Ok(())
    }

    fn cache_index(&self) -> PathBuf {
        self.cfg.output_dir.join("cache").join("index.json")
    }

    /// Windows from the preprocess cache when it matches this config,
    /// otherwise freshly generated.
    fn subjects(&self) -> Result<Vec<SubjectWindows>> {
        let index = self.cache_index();
        if let Ok(text) = fs::read_to_string(&index) {
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", index.display()))?;
            if v["config_hash"] == self.hash.as_str() {
                return self.read_cache(&v);
            }
            eprintln!("window cache is from another config; preprocessing again");
        }
        let t = Instant::now();
        let subjects = prepare_subjects(&self.cfg)?;
        eprintln!("prepared {} subjects in {:.1?}", subjects.len(), t.elapsed());
        Ok(subjects)
    }

    fn read_cache(&self, index: &serde_json::Value) -> Result<Vec<SubjectWindows>> {
        let Some(subjects) = index["subjects"].as_array() else {
            bail!(Error::Data("cache index lists no subjects".into()));
        };
        let dir = self.cfg.output_dir.join("cache");
        subjects
            .iter()
            .map(|s| {
                let s = s.as_u64().ok_or_else(|| Error::Data("bad subject id in cache index".into()))? as u32;
                let (header, set) = cache::read(&dir.join(cache_name(s)))?;
                if header.config_hash != self.hash {
                    bail!(Error::Data(format!("cache for subject {s} belongs to config {}", header.config_hash)));
                }
                Ok((s, set))
            })
            .collect()
    }

    fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn save_model(&self, name: &str, p: &Pretrained) -> Result<()> {
        self.dir("checkpoints")?;
        let path = self.checkpoint_path(name);
        save_checkpoint(&path, &p.params, &self.hash)?;
        eprintln!("wrote {}", path.display());
        self.write_log(name, &p.log)
    }

    fn write_log(&self, name: &str, log: &TrainLog) -> Result<()> {
        eprintln!(
            "  {name}: best val {:.4} at epoch {}, stopped at {}",
            log.best_val_acc, log.best_epoch, log.stopped_epoch
        );
        self.write_tagged("logs", &format!("train_{name}.csv"), &log.to_csv())?;
        Ok(())
    }

    fn load_model(&self, name: &str, subject: Option<u32>) -> Result<Option<Pretrained>> {
        let path = self.checkpoint_path(name);
        if !path.exists() {
            return Ok(None);
        }
        let ckpt = load_checkpoint(&path)?;
        if ckpt.tag != self.hash {
            bail!(Error::Config(vec![format!(
                "{} was trained under config {}, not {}; retrain it",
                path.display(),
                ckpt.tag,
                self.hash
            )]));
        }
        Ok(Some(Pretrained {
            subject,
            params: ckpt.params,
            log: TrainLog::default(),
        }))
    }

    /// Pre-trained models for `strategy`, from checkpoints when all exist,
    /// otherwise trained now and saved.
    fn pretrained(&self, subjects: &[SubjectWindows], strategy: Strategy) -> Result<Vec<Pretrained>> {
        let names = model_names(subjects, strategy);
        let loaded: Option<Vec<Pretrained>> = names
            .iter()
            .map(|(name, s)| self.load_model(name, *s))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        if let Some(models) = loaded {
            eprintln!("loaded {} checkpoint(s) for {}", models.len(), strategy.label());
            return Ok(models);
        }
        self.train_strategy(subjects, strategy)
    }

    fn train_strategy(&self, subjects: &[SubjectWindows], strategy: Strategy) -> Result<Vec<Pretrained>> {
        eprintln!("pre-training ({})", strategy.label());
        let t = Instant::now();
        let models = run_pretrain(&self.cfg, subjects, strategy)?;
        eprintln!("pre-trained in {:.1?}", t.elapsed());
        self.save_models(subjects, strategy, &models)?;
        Ok(models)
    }

    fn save_models(&self, subjects: &[SubjectWindows], strategy: Strategy, models: &[Pretrained]) -> Result<()> {
        for ((name, _), m) in model_names(subjects, strategy).iter().zip(models) {
            self.save_model(name, m)?;
        }
        Ok(())
    }

    fn intraday_model(&self, subjects: &[SubjectWindows]) -> Result<Pretrained> {
        if let Some(m) = self.load_model(INTRADAY, None)? {
            eprintln!("loaded intraday checkpoint");
            return Ok(m);
        }
        eprintln!("training intraday model");
        let m = train_intraday(&self.cfg, subjects)?;
        self.save_model(INTRADAY, &m)?;
        Ok(m)
    }

    fn fold_results(&self, model: &str, strategy: &str, rows: &[FoldRow]) -> Result<()> {
        self.write_tagged("results", &format!("calibrate_{model}_{strategy}.csv"), &folds_csv(rows))?;
        Ok(())
    }
}

fn cache_name(subject: u32) -> String {
    format!("subject_{subject:03}.mdwc")
}

fn model_names(subjects: &[SubjectWindows], strategy: Strategy) -> Vec<(String, Option<u32>)> {
    match strategy {
        Strategy::PretrainedOnAll => vec![("all".into(), None)],
        Strategy::PretrainedOnIndividuals => subjects
            .iter()
            .map(|(s, _)| (format!("individuals_s{s:03}"), Some(*s)))
            .collect(),
    }
}

pub fn init(path: &Path, desk: bool) -> Result<()> {
    if path.exists() {
        bail!(Error::Config(vec![format!("{} already exists", path.display())]));
    }
    let cfg = if desk { ExperimentConfig::desk() } else { ExperimentConfig::default() };
    fs::write(path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub fn preprocess(args: &ConfigArgs) -> Result<()> {
    let run = Run::load(args)?;
    let t = Instant::now();
    let subjects = prepare_subjects(&run.cfg)?;
    let dir = run.dir("cache")?;
    for (s, set) in &subjects {
        let path = dir.join(cache_name(*s));
        cache::write(&path, set, &run.hash)?;
        eprintln!("wrote {} ({} windows)", path.display(), set.len());
    }
    let index = json!({
        "config_hash": run.hash,
        "subjects": subjects.iter().map(|(s, _)| s).collect::<Vec<_>>(),
        "windows": subjects.iter().map(|(_, w)| w.len()).collect::<Vec<_>>(),
    });
    run.write("cache", "index.json", &(serde_json::to_string_pretty(&index)? + "\n"))?;
    eprintln!("preprocessed in {:.1?}", t.elapsed());
    Ok(())
}

pub fn train(args: &ConfigArgs, strategy: Option<Strategy>) -> Result<()> {
    let run = Run::load(args)?;
    let subjects = run.subjects()?;
    let strategies = strategy.map_or_else(|| run.cfg.strategies.clone(), |s| vec![s]);
    for s in strategies {
        run.train_strategy(&subjects, s)?;
    }
    Ok(())
}

pub fn calibrate(args: &ConfigArgs, strategy: Strategy, modes: Option<Vec<usize>>) -> Result<()> {
    let mut run = Run::load(args)?;
    if let Some(modes) = modes {
        run.cfg.calibration.modes = modes;
        run.cfg.validate()?;
    }
    let subjects = run.subjects()?;
    let models = run.pretrained(&subjects, strategy)?;
    eprintln!("calibrating ({}, modes {:?})", strategy.label(), run.cfg.calibration.modes);
    let t = Instant::now();
    let rows = run_calibration(&run.cfg, &subjects, &models, strategy)?;
    eprintln!("calibrated in {:.1?}", t.elapsed());
    run.fold_results(VIT_MODEL, strategy.label(), &rows)?;
    let report = ExperimentReport::new(
        &run.hash,
        run.cfg.seed,
        fold_report_rows(VIT_MODEL, &rows, &test_window_counts(&run.cfg, &subjects)),
    )?;
    run.emit(&report, &format!("calibrate_{}", strategy.label()))?;
    print_summary(&report);
    Ok(())
}

pub fn evaluate(args: &ConfigArgs, protocol: Protocol, strategy: Strategy) -> Result<()> {
    let run = Run::load(args)?;
    let subjects = run.subjects()?;
    let split = &run.cfg.split;
    let mut rows: Vec<ReportRow> = Vec::new();
    let stem = match protocol {
        Protocol::Interday => {
            let models = run.pretrained(&subjects, strategy)?;
            for (s, set) in &subjects {
                let test = set.filter(|p| p.day == split.test_day && split.test_reps.contains(&p.repetition));
                rows.extend(evaluation_rows(model_for(&models, *s)?, &test, *s, VIT_MODEL, strategy.label())?);
            }
            format!("evaluate_interday_{}", strategy.label())
        }
        Protocol::Intraday => {
            let model = run.intraday_model(&subjects)?;
            let day = run.cfg.intraday_day;
            for (s, set) in &subjects {
                let test: WindowSet = set.filter(|p| p.day == day && split.test_reps.contains(&p.repetition));
                rows.extend(evaluation_rows(&model.params, &test, *s, VIT_MODEL, INTRADAY)?);
            }
            "evaluate_intraday".into()
        }
    };
    let report = ExperimentReport::new(&run.hash, run.cfg.seed, rows)?;
    run.emit(&report, &stem)?;
    print_summary(&report);
    Ok(())
}

pub fn compare(args: &ConfigArgs) -> Result<()> {
    let run = Run::load(args)?;
    let subjects = run.subjects()?;
    let windows = test_window_counts(&run.cfg, &subjects);
    let strategy = Strategy::PretrainedOnAll;
    let models = run.pretrained(&subjects, strategy)?;
    eprintln!("calibrating transformer");
    let vit = run_calibration(&run.cfg, &subjects, &models, strategy)?;
    eprintln!("fitting adaptive LDA");
    let alda = run_alda(&run.cfg, &subjects)?;
    run.fold_results(VIT_MODEL, strategy.label(), &vit)?;
    run.fold_results(ALDA_MODEL, strategy.label(), &alda)?;
    let mut rows = fold_report_rows(VIT_MODEL, &vit, &windows);
    rows.extend(fold_report_rows(ALDA_MODEL, &alda, &windows));
    let mut report = ExperimentReport::new(&run.hash, run.cfg.seed, rows)?;
    for &mode in &run.cfg.calibration.modes {
        let group = |model: &str| GroupId {
            model: model.into(),
            strategy: strategy.label().into(),
            reps_per_fold: mode,
        };
        try_compare(&mut report, &group(VIT_MODEL), &group(ALDA_MODEL));
    }
    run.emit(&report, "compare")?;
    print_summary(&report);
    Ok(())
}

pub fn run(args: &ConfigArgs) -> Result<()> {
    let run = Run::load(args)?;
    let subjects = run.subjects()?;
    let t = Instant::now();
    eprintln!("running every arm");
    let outcome = run_experiment(&run.cfg, &subjects, Arms::ALL)?;
    eprintln!("experiment finished in {:.1?}", t.elapsed());
    for (strategy, models) in &outcome.pretrained {
        run.save_models(&subjects, *strategy, models)?;
        let rows: Vec<FoldRow> = outcome.fold_rows.iter().filter(|r| r.strategy == *strategy).cloned().collect();
        run.fold_results(VIT_MODEL, strategy.label(), &rows)?;
    }
    run.fold_results(ALDA_MODEL, Strategy::PretrainedOnAll.label(), &outcome.alda_rows)?;
    let mut report = outcome.report;
    let all = |model: &str, strategy: &str, reps: usize| GroupId {
        model: model.into(),
        strategy: strategy.into(),
        reps_per_fold: reps,
    };
    let modes = run.cfg.calibration.modes.clone();
    for &m in &modes {
        try_compare(&mut report, &all(VIT_MODEL, "all", m), &all(ALDA_MODEL, "all", m));
        try_compare(&mut report, &all(VIT_MODEL, "all", m), &all(VIT_MODEL, INTRADAY, 0));
    }
    for pair in modes.windows(2) {
        try_compare(&mut report, &all(VIT_MODEL, "all", pair[1]), &all(VIT_MODEL, "all", pair[0]));
    }
    run.emit(&report, "experiment")?;
    print_summary(&report);
    Ok(())
}

/// Adds a comparison when both groups exist; too few subjects for a
/// signed-rank test is reported rather than fatal.
fn try_compare(report: &mut ExperimentReport, a: &GroupId, b: &GroupId) {
    let groups = report.groups();
    if !groups.contains(a) || !groups.contains(b) {
        return;
    }
    if let Err(e) = report.compare(a, b) {
        eprintln!("skipping {a} vs {b}: {e}");
    }
}

pub fn stats(results: &[PathBuf], a: &str, b: &str, out: Option<&Path>) -> Result<()> {
    let reports = results
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_rows_csv(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = merge_reports(reports)?;
    let (a, b): (GroupId, GroupId) = (a.parse()?, b.parse()?);
    let sig = report.compare(&a, &b)?;
    eprintln!(
        "{} vs {}: n={} W={} p={:.4} {}",
        sig.a, sig.b, sig.test.n, sig.test.statistic, sig.test.p_value, sig.test.stars
    );
    match out {
        Some(dir) => {
            for path in emit_report(&report, dir, "stats", ReportFormat::Csv)? {
                eprintln!("wrote {}", path.display());
            }
        }
        None => print!("{}", significance_csv(&report)),
    }
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    let means: BTreeMap<String, f64> = report
        .aggregates
        .iter()
        .map(|a| (a.group.to_string(), a.mean))
        .collect();
    for (group, mean) in means {
        println!("{group}\t{mean:.4}");
    }
    for s in &report.significance {
        println!("{} vs {}\tp={:.4}\t{}", s.a, s.b, s.test.p_value, s.test.stars);
    }
}

//! Accuracy tables, the Wilcoxon signed-rank test and result reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};

use crate::dataset::GESTURES;
use crate::error::{Error, Result};

/// Largest sample size for which p-values are computed by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    All,
    Gesture,
    Subject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupKey {
    All,
    Gesture(u8),
    Subject(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub key: GroupKey,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Window-level accuracy per group, in key order. Gestures come from the
/// labels; `subjects` is only read when grouping by subject.
pub fn accuracy_table(
    predicted: &[usize],
    labels: &[usize],
    subjects: &[u32],
    group_by: GroupBy,
) -> Result<Vec<GroupAccuracy>> {
    if predicted.len() != labels.len() || (group_by == GroupBy::Subject && subjects.len() != labels.len()) {
        return Err(Error::Shape(format!(
            "{} predictions, {} labels, {} subjects",
            predicted.len(),
            labels.len(),
            subjects.len()
        )));
    }
    let mut tally: BTreeMap<GroupKey, (usize, usize)> = BTreeMap::new();
    for (i, (&p, &l)) in predicted.iter().zip(labels).enumerate() {
        let key = match group_by {
            GroupBy::All => GroupKey::All,
            GroupBy::Gesture => GroupKey::Gesture(l as u8),
            GroupBy::Subject => GroupKey::Subject(subjects[i]),
        };
        let e = tally.entry(key).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(key, (correct, total))| GroupAccuracy {
            key,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect())
}

/// Significance label for a p-value.
pub fn stars(p: f64) -> &'static str {
    if p <= 1e-4 {
        "****"
    } else if p <= 1e-3 {
        "***"
    } else if p <= 1e-2 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        "ns"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub stars: String,
    pub exact: bool,
    /// Every difference was zero.
    pub degenerate: bool,
}

/// Average ranks of `|d|`, ties sharing the mean of their positions.
pub fn signed_ranks(d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided exact p-value: `2·P(W⁺ ≤ w)` under random signs, from the
/// distribution of subset sums of `ranks`.
pub fn exact_p_value(ranks: &[f64], w: f64) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let limit = (2.0 * w).round() as usize;
    let tail: f64 = counts[..=limit.min(max)].iter().sum();
    (2.0 * tail / 2f64.powi(ranks.len() as i32)).min(1.0)
}

/// Two-sided normal approximation with tie and continuity corrections.
pub fn normal_p_value(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut ties: BTreeMap<u64, f64> = BTreeMap::new();
    for r in ranks {
        *ties.entry(r.to_bits()).or_default() += 1.0;
    }
    let tie_term: f64 = ties.values().map(|t| t * t * t - t).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z * std::f64::consts::FRAC_1_SQRT_2).min(1.0)
}

/// Paired two-sided Wilcoxon signed-rank test of `a` against `b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in paired samples".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Ok(Wilcoxon {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            stars: stars(1.0).into(),
            exact: true,
            degenerate: true,
        });
    }
    if d.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "{} non-zero differences; the test needs at least 5",
            d.len()
        )));
    }
    let ranks = signed_ranks(&d);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = d.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let w = w_plus.min(w_minus);
    let exact = d.len() <= EXACT_MAX_N;
    let p = if exact {
        exact_p_value(&ranks, w)
    } else {
        normal_p_value(&ranks, w)
    };
    Ok(Wilcoxon {
        n: d.len(),
        w_plus,
        w_minus,
        statistic: w,
        p_value: p,
        stars: stars(p).into(),
        exact,
        degenerate: false,
    })
}

fn round4<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e4).round() / 1e4)
}

/// A gesture index, or every gesture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum GestureCol {
    All,
    Gesture(u8),
}

impl fmt::Display for GestureCol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GestureCol::All => f.write_str("ALL"),
            GestureCol::Gesture(g) => write!(f, "{g}"),
        }
    }
}

impl From<GestureCol> for String {
    fn from(g: GestureCol) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for GestureCol {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "ALL" {
            return Ok(GestureCol::All);
        }
        match s.parse::<u8>() {
            Ok(g) if (g as usize) < GESTURES.len() => Ok(GestureCol::Gesture(g)),
            _ => Err(format!("bad gesture column {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject: u32,
    pub model: String,
    pub strategy: String,
    pub reps_per_fold: usize,
    pub fold: usize,
    pub gesture: GestureCol,
    pub windows: usize,
    #[serde(serialize_with = "round4")]
    pub accuracy: f64,
}

/// Identifies one result group: model, strategy and calibration mode.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub model: String,
    pub strategy: String,
    pub reps_per_fold: usize,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.model, self.strategy, self.reps_per_fold)
    }
}

impl std::str::FromStr for GroupId {
    type Err = Error;

    /// Parses `model/strategy/reps_per_fold`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let bad = || Error::InvalidArgument(format!("group {s:?} is not model/strategy/reps_per_fold"));
        if parts.len() != 3 || parts[..2].iter().any(|p| p.is_empty()) {
            return Err(bad());
        }
        Ok(GroupId {
            model: parts[0].into(),
            strategy: parts[1].into(),
            reps_per_fold: parts[2].parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: GroupId,
    pub subjects: usize,
    #[serde(serialize_with = "round4")]
    pub mean: f64,
    /// Sample standard deviation across subjects; 0 for a single subject.
    #[serde(serialize_with = "round4")]
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub a: GroupId,
    pub b: GroupId,
    pub test: Wilcoxon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    pub significance: Vec<Significance>,
}

impl ExperimentReport {
    /// Builds a report and its per-group aggregates from `rows`.
    pub fn new(config_hash: &str, seed: u64, rows: Vec<ReportRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !(0.0..=1.0).contains(&r.accuracy)) {
            return Err(Error::Data(format!("accuracy {} outside [0, 1]", r.accuracy)));
        }
        check_gesture_rows(&rows)?;
        let mut report = ExperimentReport {
            config_hash: config_hash.into(),
            seed,
            rows,
            aggregates: Vec::new(),
            significance: Vec::new(),
        };
        report.aggregates = report
            .groups()
            .into_iter()
            .map(|g| {
                let per_subject: Vec<f64> = report.subject_means(&g).into_values().collect();
                let n = per_subject.len();
                let mean = per_subject.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (per_subject.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                Aggregate {
                    group: g,
                    subjects: n,
                    mean,
                    std,
                }
            })
            .collect();
        Ok(report)
    }

    pub fn groups(&self) -> BTreeSet<GroupId> {
        self.rows
            .iter()
            .map(|r| GroupId {
                model: r.model.clone(),
                strategy: r.strategy.clone(),
                reps_per_fold: r.reps_per_fold,
            })
            .collect()
    }

    /// Mean over folds of each subject's all-gesture accuracy in `group`.
    pub fn subject_means(&self, group: &GroupId) -> BTreeMap<u32, f64> {
        let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            if r.gesture == GestureCol::All
                && r.model == group.model
                && r.strategy == group.strategy
                && r.reps_per_fold == group.reps_per_fold
            {
                let e = acc.entry(r.subject).or_default();
                e.0 += r.accuracy;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
    }

    pub fn aggregate(&self, group: &GroupId) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| &a.group == group)
    }

    /// Wilcoxon test of `a` against `b`, paired by subject.
    pub fn compare(&mut self, a: &GroupId, b: &GroupId) -> Result<&Significance> {
        let (ma, mb) = (self.subject_means(a), self.subject_means(b));
        if ma.is_empty() || mb.is_empty() {
            return Err(Error::InvalidArgument(format!("no rows for group {}", if ma.is_empty() { a } else { b })));
        }
        if ma.keys().ne(mb.keys()) {
            return Err(Error::Data(format!("groups {a} and {b} cover different subjects")));
        }
        let test = wilcoxon_signed_rank(
            &ma.values().copied().collect::<Vec<_>>(),
            &mb.values().copied().collect::<Vec<_>>(),
        )?;
        self.significance.push(Significance {
            a: a.clone(),
            b: b.clone(),
            test,
        });
        Ok(self.significance.last().expect("just pushed"))
    }
}

/// Per-gesture rows must add up, weighted by window counts, to their
/// all-gesture row (up to the 4-decimal rounding of emitted files).
fn check_gesture_rows(rows: &[ReportRow]) -> Result<()> {
    type Cell<'a> = (u32, &'a str, &'a str, usize, usize);
    let mut parts: BTreeMap<Cell, (f64, usize)> = BTreeMap::new();
    let mut totals: BTreeMap<Cell, &ReportRow> = BTreeMap::new();
    for r in rows {
        let key = (r.subject, r.model.as_str(), r.strategy.as_str(), r.reps_per_fold, r.fold);
        match r.gesture {
            GestureCol::All => {
                totals.insert(key, r);
            }
            GestureCol::Gesture(_) => {
                let e = parts.entry(key).or_default();
                e.0 += r.accuracy * r.windows as f64;
                e.1 += r.windows;
            }
        }
    }
    for (key, (correct, windows)) in parts {
        let Some(all) = totals.get(&key) else { continue };
        let weighted = correct / windows as f64;
        if windows != all.windows || (weighted - all.accuracy).abs() > 1e-4 {
            return Err(Error::Data(format!(
                "per-gesture rows of subject {} {}/{}/{} fold {} give {weighted:.4} over {windows} windows, \
                 the ALL row says {:.4} over {}",
                key.0, key.1, key.2, key.3, key.4, all.accuracy, all.windows
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const ROWS_HEADER: &str = "config_hash,seed,subject,model,strategy,reps_per_fold,fold,gesture,windows,accuracy";

pub fn rows_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{ROWS_HEADER}\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.4}",
            report.config_hash, report.seed, r.subject, r.model, r.strategy, r.reps_per_fold, r.fold, r.gesture, r.windows, r.accuracy
        )
        .unwrap();
    }
    out
}

pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("config_hash,seed,model,strategy,reps_per_fold,subjects,mean,std\n");
    for a in &report.aggregates {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.4},{:.4}",
            report.config_hash, report.seed, a.group.model, a.group.strategy, a.group.reps_per_fold, a.subjects, a.mean, a.std
        )
        .unwrap();
    }
    out
}

pub fn significance_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("config_hash,seed,group_a,group_b,n,statistic,p_value,stars,exact,degenerate\n");
    for s in &report.significance {
        writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.4},{},{},{}",
            report.config_hash,
            report.seed,
            s.a,
            s.b,
            s.test.n,
            s.test.statistic,
            s.test.p_value,
            s.test.stars,
            s.test.exact,
            s.test.degenerate
        )
        .unwrap();
    }
    out
}

/// Parses a rows CSV back into a report; aggregates are recomputed.
pub fn parse_rows_csv(text: &str) -> Result<ExperimentReport> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Data(format!("rows CSV: {e}")))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != ROWS_HEADER {
        return Err(Error::Data(format!("unexpected rows CSV header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    #[derive(Deserialize)]
    struct Line {
        config_hash: String,
        seed: u64,
        subject: u32,
        model: String,
        strategy: String,
        reps_per_fold: usize,
        fold: usize,
        gesture: GestureCol,
        windows: usize,
        accuracy: f64,
    }
    let mut hash = None;
    let mut seed = 0;
    let mut rows = Vec::new();
    for rec in reader.deserialize::<Line>() {
        let line = rec.map_err(|e| Error::Data(format!("rows CSV: {e}")))?;
        match &hash {
            None => {
                hash = Some(line.config_hash.clone());
                seed = line.seed;
            }
            Some(h) if *h != line.config_hash || seed != line.seed => {
                return Err(Error::Data(format!(
                    "rows from config {} (seed {}) mixed with {h} (seed {seed})",
                    line.config_hash, line.seed
                )));
            }
            Some(_) => {}
        }
        rows.push(ReportRow {
            subject: line.subject,
            model: line.model,
            strategy: line.strategy,
            reps_per_fold: line.reps_per_fold,
            fold: line.fold,
            gesture: line.gesture,
            windows: line.windows,
            accuracy: line.accuracy,
        });
    }
    ExperimentReport::new(hash.as_deref().unwrap_or(""), seed, rows)
}

/// Merges reports that share one config hash and seed.
pub fn merge_reports(reports: Vec<ExperimentReport>) -> Result<ExperimentReport> {
    let Some(first) = reports.first() else {
        return Err(Error::InvalidArgument("no reports to merge".into()));
    };
    let (hash, seed) = (first.config_hash.clone(), first.seed);
    if let Some(r) = reports.iter().find(|r| r.config_hash != hash || r.seed != seed) {
        return Err(Error::Data(format!(
            "results from config {} (seed {}) cannot be mixed with {hash} (seed {seed})",
            r.config_hash, r.seed
        )));
    }
    let rows = reports.into_iter().flat_map(|r| r.rows).collect();
    ExperimentReport::new(&hash, seed, rows)
}

/// Writes `<stem>.rows.csv`, `<stem>.summary.csv` and `<stem>.stats.csv`,
/// or a single `<stem>.json`. Returns the written paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path, stem: &str, format: ReportFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files: Vec<(PathBuf, String)> = match format {
        ReportFormat::Csv => vec![
            (dir.join(format!("{stem}.rows.csv")), rows_csv(report)),
            (dir.join(format!("{stem}.summary.csv")), summary_csv(report)),
            (dir.join(format!("{stem}.stats.csv")), significance_csv(report)),
        ],
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
            vec![(dir.join(format!("{stem}.json")), text + "\n")]
        }
    };
    for (path, text) in &files {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests;

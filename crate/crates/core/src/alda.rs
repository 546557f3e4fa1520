//! Hand-crafted time-domain features with an adaptive LDA classifier, the
//! classical baseline for cross-day calibration.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationPlan, FoldRow};
use crate::dataset::{Partition, Provenance, SplitPlan, CHANNELS};
use crate::dsp::{WindowSet, WindowTensor};
use crate::error::{Error, Result};
use crate::numcore::gemm::{gemm, Operand};
use crate::train::Strategy;

/// MAV, ZC, SSC and WL for every channel.
pub const FEATURES_PER_CHANNEL: usize = 4;
pub const FEATURE_DIM: usize = FEATURES_PER_CHANNEL * CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AldaConfig {
    pub lambda: f64,
    /// Dead band for zero crossings and slope-sign changes.
    pub zc_ssc_threshold: f64,
}

impl Default for AldaConfig {
    fn default() -> Self {
        AldaConfig {
            lambda: 0.5,
            zc_ssc_threshold: 0.0,
        }
    }
}

impl AldaConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("alda.lambda = {} must lie in [0, 1]", self.lambda));
        }
        if !(self.zc_ssc_threshold >= 0.0 && self.zc_ssc_threshold.is_finite()) {
            problems.push(format!(
                "alda.zc_ssc_threshold = {} must be a finite non-negative number",
                self.zc_ssc_threshold
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    /// `[MAV, ZC, SSC, WL]` per channel, channels in grid-major order.
    pub values: Vec<f64>,
    pub label: usize,
    pub provenance: Provenance,
}

/// `[MAV, ZC, SSC, WL]` of one channel.
pub fn channel_features(x: &[f64], threshold: f64) -> [f64; 4] {
    let n = x.len();
    if n == 0 {
        return [0.0; 4];
    }
    let mav = x.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let mut zc = 0usize;
    let mut wl = 0.0;
    for w in x.windows(2) {
        let diff = (w[1] - w[0]).abs();
        wl += diff;
        if w[0] * w[1] < 0.0 && diff > threshold {
            zc += 1;
        }
    }
    let ssc = x
        .windows(3)
        .filter(|w| {
            let (a, b) = (w[1] - w[0], w[1] - w[2]);
            a * b > 0.0 && a.abs() > threshold && b.abs() > threshold
        })
        .count();
    [mav, zc as f64, ssc as f64, wl]
}

fn features_of(samples: &[f32], window_samples: usize, threshold: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(FEATURE_DIM);
    let mut column = vec![0.0; window_samples];
    for ch in 0..CHANNELS {
        for (t, v) in column.iter_mut().enumerate() {
            *v = f64::from(samples[t * CHANNELS + ch]);
        }
        out.extend_from_slice(&channel_features(&column, threshold));
    }
    out
}

pub fn extract_features(window: &WindowTensor, threshold: f64) -> FeatureVector {
    let t = window.shape()[0];
    FeatureVector {
        values: features_of(window.as_flat(), t, threshold),
        label: window.label(),
        provenance: window.provenance,
    }
}

/// Features of every window in `set`, in set order.
pub fn extract_set(set: &WindowSet, threshold: f64) -> Vec<FeatureVector> {
    (0..set.len())
        .into_par_iter()
        .map(|i| FeatureVector {
            values: features_of(set.samples(i), set.window_samples(), threshold),
            label: set.label(i),
            provenance: set.provenance(i),
        })
        .collect()
}

/// Sample mean and unbiased covariance of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
}

fn class_stats(rows: &[&[f64]], dim: usize) -> ClassStats {
    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * dim);
    for r in rows {
        centered.extend(r.iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut covariance = vec![0.0; dim * dim];
    let x = Operand::new(&centered, n, dim);
    gemm(x.t(), x, &mut covariance, 0.0);
    covariance.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    ClassStats {
        count: n,
        mean,
        covariance,
    }
}

fn group_by_class(features: &[FeatureVector], n_classes: usize) -> Result<Vec<Vec<&[f64]>>> {
    let dim = features.first().map_or(0, |f| f.values.len());
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); n_classes];
    for f in features {
        if f.values.len() != dim {
            return Err(Error::Shape(format!(
                "feature vectors of length {} and {dim} mixed",
                f.values.len()
            )));
        }
        if !f.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature in {}", f.provenance)));
        }
        if f.label >= n_classes {
            return Err(Error::Data(format!("label {} outside {n_classes} classes", f.label)));
        }
        groups[f.label].push(&f.values);
    }
    if let Some((c, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(Error::Data(format!(
            "class {c} has {} samples; LDA needs at least 2 per class",
            g.len()
        )));
    }
    Ok(groups)
}

/// Linear discriminant with a shared, ridge-regularized covariance.
#[derive(Debug, Clone)]
pub struct LdaModel {
    pub dim: usize,
    /// Per-class statistics; adaptation blends these.
    pub classes: Vec<ClassStats>,
    pub priors: Vec<f64>,
    /// Shared covariance after regularization.
    pub covariance: Vec<f64>,
    pub epsilon: f64,
    /// `Σ⁻¹μ_c`, row-major `C × d`.
    weights: Vec<f64>,
    offsets: Vec<f64>,
}

impl LdaModel {
    fn from_stats(classes: Vec<ClassStats>, priors: Vec<f64>) -> Result<Self> {
        let dim = classes[0].mean.len();
        let total: usize = classes.iter().map(|c| c.count).sum();
        let dof = (total - classes.len()) as f64;
        let mut covariance = vec![0.0; dim * dim];
        for c in &classes {
            let w = (c.count - 1) as f64 / dof;
            for (s, v) in covariance.iter_mut().zip(&c.covariance) {
                *s += w * v;
            }
        }
        let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
        let epsilon = 1e-6 * trace / dim as f64;
        for i in 0..dim {
            covariance[i * dim + i] += epsilon;
        }
        // Σ is symmetric, so reading it column-major is the same matrix.
        let sigma = DMatrix::from_column_slice(dim, dim, &covariance);
        let chol = sigma.cholesky().ok_or_else(|| {
            Error::Numeric("regularized covariance is not positive definite".into())
        })?;
        let mut weights = Vec::with_capacity(classes.len() * dim);
        let mut offsets = Vec::with_capacity(classes.len());
        for (c, prior) in classes.iter().zip(&priors) {
            let mu = DMatrix::from_column_slice(dim, 1, &c.mean);
            let a = chol.solve(&mu);
            let quad: f64 = a.iter().zip(&c.mean).map(|(x, y)| x * y).sum();
            offsets.push(-0.5 * quad + prior.ln());
            weights.extend(a.iter());
        }
        if !weights.iter().chain(&offsets).all(|v| v.is_finite()) {
            return Err(Error::Numeric("LDA discriminant is not finite".into()));
        }
        Ok(LdaModel {
            dim,
            classes,
            priors,
            covariance,
            epsilon,
            weights,
            offsets,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// `g_c(x) = xᵀΣ⁻¹μ_c − ½μ_cᵀΣ⁻¹μ_c + ln π_c` for every class.
    pub fn discriminants(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.offsets)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::numcore::ops::argmax(&self.discriminants(x))
    }

    pub fn accuracy(&self, features: &[FeatureVector]) -> Result<f64> {
        if features.is_empty() {
            return Err(Error::Data("accuracy over an empty feature set".into()));
        }
        let correct = features
            .par_iter()
            .filter(|f| self.predict(&f.values) == f.label)
            .count();
        Ok(correct as f64 / features.len() as f64)
    }
}

/// Fits class means, priors and the pooled within-class covariance, with
/// `ε = 1e-6·trace(Σ)/d` added to the diagonal.
pub fn fit_lda(features: &[FeatureVector]) -> Result<LdaModel> {
    let n_classes = features.iter().map(|f| f.label + 1).max().unwrap_or(0);
    if n_classes == 0 {
        return Err(Error::Data("no features to fit".into()));
    }
    let groups = group_by_class(features, n_classes)?;
    let dim = features[0].values.len();
    let classes: Vec<ClassStats> = groups.iter().map(|g| class_stats(g, dim)).collect();
    let priors = classes
        .iter()
        .map(|c| c.count as f64 / features.len() as f64)
        .collect();
    LdaModel::from_stats(classes, priors)
}

/// Blends each class mean and covariance with calibration statistics,
/// `(1−λ)·train + λ·calib`, and pools the blended covariances back into one
/// shared matrix weighted by the training class counts. Priors are kept.
pub fn adapt(model: &LdaModel, calib: &[FeatureVector], lambda: f64) -> Result<LdaModel> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if let Some(f) = calib.iter().find(|f| f.values.len() != model.dim) {
        return Err(Error::Shape(format!(
            "calibration feature of length {}, model has {}",
            f.values.len(),
            model.dim
        )));
    }
    let groups = group_by_class(calib, model.n_classes())?;
    let blend = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect()
    };
    let classes = model
        .classes
        .iter()
        .zip(&groups)
        .map(|(tr, g)| {
            let cal = class_stats(g, model.dim);
            ClassStats {
                count: tr.count,
                mean: blend(&tr.mean, &cal.mean),
                covariance: blend(&tr.covariance, &cal.covariance),
            }
        })
        .collect();
    LdaModel::from_stats(classes, model.priors.clone())
}

/// Fits one LDA on the pooled Day-1 training repetitions of all subjects,
/// then for every subject and fold adapts it on that fold's Day-2
/// repetitions and scores the Day-2 test repetitions. 0-rep mode scores the
/// unadapted model.
pub fn run_alda_experiment(
    subjects: &[(u32, WindowSet)],
    split: &SplitPlan,
    plan: &CalibrationPlan,
    cfg: &AldaConfig,
) -> Result<Vec<FoldRow>> {
    cfg.validate()?;
    let thr = cfg.zc_ssc_threshold;
    let mut train_features = Vec::new();
    for (_, set) in subjects {
        let day1 = set.filter(|p| split.partition_of(p) == Some(Partition::Train));
        train_features.extend(extract_set(&day1, thr));
    }
    let model = fit_lda(&train_features)?;
    drop(train_features);
    let mut rows = Vec::new();
    for (subject, set) in subjects {
        let day2 = extract_set(&set.filter(|p| p.day == split.test_day), thr);
        let (test, rest): (Vec<FeatureVector>, Vec<FeatureVector>) = day2
            .into_iter()
            .partition(|f| split.test_reps.contains(&f.provenance.repetition));
        if test.is_empty() {
            return Err(Error::Split(format!("subject {subject} has no Day-2 test windows")));
        }
        let row = |fold_id, accuracy| FoldRow {
            subject: *subject,
            strategy: Strategy::PretrainedOnAll,
            reps_per_fold: plan.reps_per_fold,
            fold_id,
            accuracy,
        };
        if plan.reps_per_fold == 0 {
            rows.push(row(0, model.accuracy(&test)?));
            continue;
        }
        for (fold_id, reps) in plan.folds.iter().enumerate() {
            let calib: Vec<FeatureVector> = rest
                .iter()
                .filter(|f| reps.contains(&f.provenance.repetition))
                .cloned()
                .collect();
            let adapted = adapt(&model, &calib, cfg.lambda)?;
            rows.push(row(fold_id, adapted.accuracy(&test)?));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::dataset::Day;
    use crate::rng::Rng;

    fn prov(label: usize) -> Provenance {
        Provenance {
            subject: 1,
            gesture: label as u8,
            day: Day::Day1,
            repetition: 1,
        }
    }

    fn fv(values: Vec<f64>, label: usize) -> FeatureVector {
        FeatureVector {
            values,
            label,
            provenance: prov(label),
        }
    }

    #[test]
    fn hand_computed_features() {
        let [mav, zc, ssc, wl] = channel_features(&[1.0, -1.0, 2.0, -2.0], 0.0);
        assert_eq!((mav, zc, wl), (1.5, 3.0, 9.0));
        assert_eq!(ssc, 2.0);
        assert_eq!(channel_features(&[-0.75; 8], 0.0), [0.75, 0.0, 0.0, 0.0]);
        let ramp: Vec<f64> = (0..20).map(|i| i as f64 - 7.5).collect();
        let [_, zc, ssc, _] = channel_features(&ramp, 0.0);
        assert!(zc <= 1.0);
        assert_eq!(ssc, 0.0);
        // the dead band suppresses small crossings
        assert_eq!(channel_features(&[0.1, -0.1, 0.1], 0.5)[1], 0.0);
    }

    #[test]
    fn window_features_follow_channel_order() {
        let t = 5;
        let mut data = vec![0f32; t * CHANNELS];
        for s in 0..t {
            data[s * CHANNELS + 7] = if s % 2 == 0 { 1.0 } else { -1.0 };
        }
        let w = WindowTensor::from_flat(t, data, prov(3), 0).unwrap();
        let f = extract_features(&w, 0.0);
        assert_eq!(f.values.len(), FEATURE_DIM);
        assert_eq!(f.label, 3);
        assert_eq!(&f.values[28..32], &[1.0, 4.0, 3.0, 8.0]);
        assert!(f.values[..28].iter().chain(&f.values[32..]).all(|&v| v == 0.0));
    }

    fn gaussian_data(n: usize, means: &[Vec<f64>], chol: &[Vec<f64>], rng: &mut Rng) -> Vec<FeatureVector> {
        let d = means[0].len();
        (0..n)
            .map(|i| {
                let c = i % means.len();
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let x = (0..d)
                    .map(|r| means[c][r] + (0..=r).map(|k| chol[r][k] * z[k]).sum::<f64>())
                    .collect();
                fv(x, c)
            })
            .collect()
    }

    #[test]
    fn symmetric_two_class_boundary() {
        let data = vec![
            fv(vec![1.0, 1.0], 0),
            fv(vec![1.0, -1.0], 0),
            fv(vec![-1.0, 1.0], 1),
            fv(vec![-1.0, -1.0], 1),
        ];
        let m = fit_lda(&data).unwrap();
        assert_eq!(m.predict(&[0.3, 5.0]), 0);
        assert_eq!(m.predict(&[-0.3, -5.0]), 1);
        let g = m.discriminants(&[0.0, 2.0]);
        assert!((g[0] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn identical_classes_fall_back_to_prior() {
        let points = [[-1.0, 0.5], [1.0, 1.5], [2.0, 2.0], [0.0, -1.0]];
        let mut data: Vec<FeatureVector> = points.iter().map(|p| fv(p.to_vec(), 0)).collect();
        for _ in 0..2 {
            data.extend(points.iter().map(|p| fv(p.to_vec(), 1)));
        }
        let m = fit_lda(&data).unwrap();
        assert_eq!(m.priors, vec![1.0 / 3.0, 2.0 / 3.0]);
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 3.0 * z }).collect();
            let g = m.discriminants(&x);
            assert!((g[1] - g[0] - 2f64.ln()).abs() < 1e-9);
            assert_eq!(m.predict(&x), 1);
        }
    }

    #[test]
    fn rejects_sparse_classes_and_bad_values() {
        let data = vec![fv(vec![1.0], 0), fv(vec![2.0], 0), fv(vec![3.0], 1)];
        assert!(matches!(fit_lda(&data), Err(Error::Data(_))));
        let nan = vec![fv(vec![1.0], 0), fv(vec![f64::NAN], 0)];
        assert!(matches!(fit_lda(&nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn matches_bayes_classifier_on_shared_covariance_gaussians() {
        let mut rng = Rng::seed_from_u64(7);
        let means = vec![vec![0.0, 0.0, 0.0], vec![1.5, 0.5, 0.0], vec![0.0, 1.5, -1.0]];
        let chol = vec![vec![1.0], vec![0.5, 1.0], vec![-0.3, 0.2, 0.8]];
        let train = gaussian_data(3000, &means, &chol, &mut rng);
        let test = gaussian_data(100_000, &means, &chol, &mut rng);
        let lda = fit_lda(&train).unwrap().accuracy(&test).unwrap();
        // Bayes rule with the true parameters: smallest Mahalanobis distance,
        // via forward substitution on the known factor.
        let bayes = test
            .iter()
            .filter(|f| {
                let dist = |m: &Vec<f64>| {
                    let mut z = [0.0; 3];
                    for r in 0..3 {
                        let acc: f64 = (0..r).map(|k| chol[r][k] * z[k]).sum();
                        z[r] = (f.values[r] - m[r] - acc) / chol[r][r];
                    }
                    z.iter().map(|v| v * v).sum::<f64>()
                };
                let best = (0..3).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                best == f.label
            })
            .count() as f64
            / test.len() as f64;
        assert!((lda - bayes).abs() < 0.01, "lda {lda} bayes {bayes}");
    }

    fn small_problem(seed: u64) -> (Vec<FeatureVector>, Vec<FeatureVector>) {
        let mut rng = Rng::seed_from_u64(seed);
        let means = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, -1.0]];
        let chol = vec![vec![1.0], vec![0.2, 0.7]];
        let train = gaussian_data(60, &means, &chol, &mut rng);
        let shifted: Vec<Vec<f64>> = means.iter().map(|m| vec![m[0] + 0.8, m[1] - 0.4]).collect();
        let calib = gaussian_data(30, &shifted, &chol, &mut rng);
        (train, calib)
    }

    #[test]
    fn adaptation_endpoints() {
        let (train, calib) = small_problem(3);
        let model = fit_lda(&train).unwrap();
        let same = adapt(&model, &calib, 0.0).unwrap();
        assert_eq!(same.covariance, model.covariance);
        let mut rng = Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x: Vec<f64> = (0..2).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 3.0 * z }).collect();
            assert_eq!(same.predict(&x), model.predict(&x));
        }
        let full = adapt(&model, &calib, 1.0).unwrap();
        let cal = fit_lda(&calib).unwrap();
        for c in 0..3 {
            assert_eq!(full.classes[c].mean, cal.classes[c].mean);
        }
        let half = adapt(&model, &calib, 0.5).unwrap();
        for c in 0..3 {
            for d in 0..2 {
                let avg = 0.5 * model.classes[c].mean[d] + 0.5 * cal.classes[c].mean[d];
                assert!((half.classes[c].mean[d] - avg).abs() < 1e-15);
            }
        }
        assert_eq!(half.priors, model.priors);
    }

    #[test]
    fn adaptation_is_continuous_in_lambda() {
        let (train, calib) = small_problem(4);
        let model = fit_lda(&train).unwrap();
        let a = adapt(&model, &calib, 0.3).unwrap();
        let b = adapt(&model, &calib, 0.3 + 1e-9).unwrap();
        let x = [0.4, -0.2];
        for (ga, gb) in a.discriminants(&x).iter().zip(b.discriminants(&x)) {
            assert!((ga - gb).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn predictions_ignore_positive_rescaling(seed in 0u64..1000, k in 0.01f64..100.0) {
            let (train, calib) = small_problem(seed);
            let scaled: Vec<FeatureVector> = train
                .iter()
                .map(|f| fv(f.values.iter().map(|v| v * k).collect(), f.label))
                .collect();
            let a = fit_lda(&train).unwrap();
            let b = fit_lda(&scaled).unwrap();
            for f in &calib {
                let x: Vec<f64> = f.values.iter().map(|v| v * k).collect();
                let mut g = a.discriminants(&f.values);
                g.sort_by(f64::total_cmp);
                if g[2] - g[1] > 1e-9 {
                    prop_assert_eq!(a.predict(&f.values), b.predict(&x));
                }
            }
        }
    }
}

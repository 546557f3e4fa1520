use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

use super::*;
use crate::rng::Rng;

#[test]
fn star_thresholds() {
    let cases = [
        (1.0, "ns"),
        (0.0501, "ns"),
        (0.05, "*"),
        (0.0100001, "*"),
        (0.01, "**"),
        (0.001, "***"),
        (0.0001, "****"),
        (1e-9, "****"),
    ];
    for (p, s) in cases {
        assert_eq!(stars(p), s, "p = {p}");
    }
}

#[test]
fn accuracy_groups() {
    let labels = vec![0, 1, 1, 2, 2, 2];
    assert_eq!(accuracy_table(&labels, &labels, &[], GroupBy::All).unwrap()[0].accuracy, 1.0);

    let mut rng = Rng::seed_from_u64(5);
    let n = 100_000;
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..11)).collect();
    let predicted: Vec<usize> = (0..n).map(|_| rng.gen_range(0..11)).collect();
    let subjects: Vec<u32> = (0..n).map(|i| (i % 5) as u32 + 1).collect();
    let all = accuracy_table(&predicted, &labels, &subjects, GroupBy::All).unwrap()[0];
    assert!((all.accuracy - 1.0 / 11.0).abs() < 0.01);
    for by in [GroupBy::Gesture, GroupBy::Subject] {
        let table = accuracy_table(&predicted, &labels, &subjects, by).unwrap();
        let weighted: f64 = table.iter().map(|g| g.accuracy * g.total as f64).sum::<f64>() / n as f64;
        assert!((weighted - all.accuracy).abs() < 1e-12);
        assert_eq!(table.iter().map(|g| g.total).sum::<usize>(), n);
    }
    assert_eq!(accuracy_table(&predicted, &labels, &subjects, GroupBy::Gesture).unwrap().len(), 11);
    assert!(accuracy_table(&[0], &[0, 1], &[], GroupBy::All).is_err());
}

#[test]
fn five_positive_differences() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [0.5, 1.0, 1.5, 2.0, 2.5];
    let t = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(t.n, 5);
    assert_eq!((t.w_plus, t.w_minus, t.statistic), (15.0, 0.0, 0.0));
    assert_eq!(t.p_value, 0.0625);
    assert_eq!(t.stars, "ns");
    assert!(t.exact && !t.degenerate);
}

#[test]
fn identical_samples_are_degenerate() {
    let a = [0.3, 0.5, 0.9, 0.1, 0.2, 0.7];
    let t = wilcoxon_signed_rank(&a, &a).unwrap();
    assert!(t.degenerate);
    assert_eq!((t.p_value, t.stars.as_str()), (1.0, "ns"));
}

#[test]
fn too_few_pairs_or_mismatched_lengths() {
    assert!(wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).is_err());
    assert!(wilcoxon_signed_rank(&[1.0; 6], &[0.0; 5]).is_err());
}

#[test]
fn ties_get_average_ranks() {
    assert_eq!(signed_ranks(&[3.0, -1.0, 1.0, 2.0, -3.0]), vec![4.5, 1.5, 1.5, 3.0, 4.5]);
}

/// `2·P(W⁺ ≤ w)` by walking all `2^n` sign assignments.
fn brute_force_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len();
    let mut hits = 0u64;
    for mask in 0u64..1 << n {
        let wp: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if wp <= w + 1e-9 {
            hits += 1;
        }
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_path_is_the_enumerated_tail_mass(d in prop::collection::vec((-6i32..=6).prop_filter("nonzero", |v| *v != 0), 5..=10)) {
        let a: Vec<f64> = d.iter().map(|&v| f64::from(v) / 4.0).collect();
        let b = vec![0.0; a.len()];
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        let ranks = signed_ranks(&a);
        prop_assert!(t.exact);
        prop_assert!(t.p_value > 0.0 && t.p_value <= 1.0);
        prop_assert!((t.p_value - brute_force_p(&ranks, t.statistic)).abs() < 1e-12);
        prop_assert_eq!(t.stars.as_str(), stars(t.p_value));
    }
}

#[test]
fn exact_and_normal_agree_at_twenty() {
    let mut rng = Rng::seed_from_u64(11);
    for _ in 0..20 {
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(0.6..0.95)).collect();
        let b: Vec<f64> = a.iter().map(|v| v - rng.gen_range(-0.05..0.08)).collect();
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let ranks = signed_ranks(&d);
        let approx = normal_p_value(&ranks, t.statistic);
        assert!((t.p_value - approx).abs() < 0.01, "exact {} normal {approx}", t.p_value);
    }
}

#[test]
fn large_samples_use_the_normal_path() {
    let a: Vec<f64> = (1..=30).map(f64::from).collect();
    let b = vec![0.0; 30];
    let t = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!t.exact);
    assert!(t.p_value < 1e-4);
    assert_eq!(t.stars, "****");
}

fn rows(model: &str, strategies: &[&str], modes: &[usize], subjects: u32) -> Vec<ReportRow> {
    let mut out = Vec::new();
    for &strategy in strategies {
        for &reps in modes {
            let folds = [1, 4, 6][reps];
            for subject in 1..=subjects {
                for fold in 0..folds {
                    let acc = 0.5 + 0.01 * f64::from(subject) + 0.1 * reps as f64 + 0.001 * fold as f64;
                    out.push(ReportRow {
                        subject,
                        model: model.into(),
                        strategy: strategy.into(),
                        reps_per_fold: reps,
                        fold,
                        gesture: GestureCol::All,
                        windows: 100,
                        accuracy: (acc * 1e4).round() / 1e4,
                    });
                }
            }
        }
    }
    out
}

#[test]
fn report_shapes_and_aggregates() {
    let report = ExperimentReport::new("abc", 7, rows("vit", &["all", "individuals"], &[0, 1, 2], 5)).unwrap();
    assert_eq!(report.aggregates.len(), 6);
    for agg in &report.aggregates {
        let means = report.subject_means(&agg.group);
        let mean = means.values().sum::<f64>() / means.len() as f64;
        assert!((mean - agg.mean).abs() < 1e-12);
        assert_eq!(agg.subjects, 5);
    }
    let windows: Vec<ReportRow> = [50, 100, 150, 200, 250]
        .iter()
        .flat_map(|w| rows(&format!("vit_w{w}"), &["all"], &[0, 1, 2], 3))
        .collect();
    assert_eq!(ExperimentReport::new("abc", 7, windows).unwrap().aggregates.len(), 15);
}

#[test]
fn csv_and_json_round_trip() {
    let mut report = ExperimentReport::new("abc", 7, rows("vit", &["all", "individuals"], &[0, 2], 6)).unwrap();
    report
        .compare(&"vit/all/2".parse().unwrap(), &"vit/all/0".parse().unwrap())
        .unwrap();
    let text = rows_csv(&report);
    let back = parse_rows_csv(&text).unwrap();
    assert_eq!(back.rows, report.rows);
    assert_eq!(back.aggregates, report.aggregates);
    assert_eq!(rows_csv(&back), text);

    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, dir.path(), "exp", ReportFormat::Json).unwrap();
    let json: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(json.rows, report.rows);
    assert_eq!(json.significance.len(), 1);
    let files = emit_report(&report, dir.path(), "exp", ReportFormat::Csv).unwrap();
    assert_eq!(files.len(), 3);
    let stats = std::fs::read_to_string(&files[2]).unwrap();
    assert!(stats.lines().nth(1).unwrap().starts_with("abc,7,vit/all/2,vit/all/0,6,"));
}

#[test]
fn mixed_config_hashes_are_rejected() {
    let a = ExperimentReport::new("aaa", 1, rows("vit", &["all"], &[0], 5)).unwrap();
    let b = ExperimentReport::new("bbb", 1, rows("vit", &["all"], &[1], 5)).unwrap();
    assert!(matches!(merge_reports(vec![a.clone(), b.clone()]), Err(Error::Data(_))));
    let mixed = rows_csv(&a) + rows_csv(&b).lines().skip(1).map(|l| format!("{l}\n")).collect::<String>().as_str();
    assert!(matches!(parse_rows_csv(&mixed), Err(Error::Data(_))));
    let merged = merge_reports(vec![a, ExperimentReport::new("aaa", 1, rows("vit", &["all"], &[1], 5)).unwrap()]).unwrap();
    assert_eq!(merged.aggregates.len(), 2);
}

#[test]
fn gesture_rows_must_match_their_total() {
    let mut rs = rows("vit", &["all"], &[0], 1);
    rs[0].accuracy = 0.75;
    rs[0].windows = 4;
    let gesture = |g, acc, windows| ReportRow {
        gesture: GestureCol::Gesture(g),
        accuracy: acc,
        windows,
        ..rs[0].clone()
    };
    let good = vec![rs[0].clone(), gesture(0, 1.0, 2), gesture(1, 0.5, 2)];
    assert!(ExperimentReport::new("h", 0, good).is_ok());
    let bad = vec![rs[0].clone(), gesture(0, 1.0, 2), gesture(1, 0.0, 2)];
    assert!(matches!(ExperimentReport::new("h", 0, bad), Err(Error::Data(_))));
}

#[test]
fn group_ids_parse() {
    let g: GroupId = "alda/all/2".parse().unwrap();
    assert_eq!(g.to_string(), "alda/all/2");
    assert!("alda/all".parse::<GroupId>().is_err());
    assert!("alda//1".parse::<GroupId>().is_err());
}

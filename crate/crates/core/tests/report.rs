use std::collections::BTreeMap;

use citycond::engine::{
    AttentionRecord, CurvePoint, ExperimentConfig, Metrics, Regime, RunResult, RunStatus, Transfer,
};
use citycond::report::{
    adaptation_csv, aggregate, attention_report, lowdata_csv, render_csv, render_structured,
    render_text, report, table_from_csv, table_from_structured, ReportFormat, Setting,
};
use citycond::{BackboneKind, Error, Variant};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn traffic(mse: f64, mae: f64) -> Metrics {
    Metrics {
        mse: Some(mse),
        mae: Some(mae),
        mse_normalized: Some(mse / 100.0),
        windows: 10,
        ..Metrics::default()
    }
}

fn record(
    backbone: BackboneKind,
    variant: Variant,
    regime: Regime,
    seed: u64,
    mse: f64,
) -> RunResult {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.kind = backbone;
    cfg.citycond.variant = variant;
    cfg.regime = regime;
    cfg.seed = seed;
    let mut r = RunResult::new(&cfg);
    r.val = Some(traffic(mse * 0.9, mse.sqrt()));
    r.test = Some(traffic(mse, mse.sqrt()));
    r
}

fn gru(variant: Variant, seed: u64, mse: f64) -> RunResult {
    record(BackboneKind::Gru, variant, Regime::Full, seed, mse)
}

fn transfer_record(variant: Variant, seed: u64, pre: f64, post: f64) -> RunResult {
    let mut r = record(
        BackboneKind::Transformer,
        variant,
        Regime::crosscity("A", "B"),
        seed,
        pre,
    );
    r.test = None;
    r.transfer = Some(Transfer {
        train_city: "A".into(),
        test_city: "B".into(),
        pre: traffic(pre, 1.0),
        post: traffic(post, 1.0),
        curve: vec![
            CurvePoint {
                step: 0,
                metrics: traffic(pre, 1.0),
            },
            CurvePoint {
                step: 10,
                metrics: traffic(post, 1.0),
            },
        ],
    });
    r
}

#[test]
fn single_result_has_zero_std_and_is_flagged() {
    let t = aggregate(&[gru(Variant::Base, 13, 7.5)]).unwrap();
    let row = &t.rows[0];
    let c = row.cell("test.mse").unwrap();
    assert_eq!((c.mean, c.std), (7.5, 0.0));
    assert_eq!(row.flags(), vec!["n=1".to_string()]);
}

#[test]
fn three_seeds_give_mean_and_sample_std() {
    let rs: Vec<_> = [(13, 10.0), (21, 12.0), (42, 14.0)]
        .map(|(s, v)| gru(Variant::Base, s, v))
        .to_vec();
    let t = aggregate(&rs).unwrap();
    let c = t.rows[0].cell("test.mse").unwrap();
    assert_eq!((c.mean, c.std), (12.0, 2.0));
    assert!(t.rows[0].flags().is_empty());
    assert_eq!(t.rows[0].seeds, vec![13, 21, 42]);
}

#[test]
fn mixed_schema_versions_are_rejected() {
    let mut b = gru(Variant::Base, 21, 1.0);
    b.schema_version += 1;
    assert!(matches!(
        aggregate(&[gru(Variant::Base, 13, 1.0), b]),
        Err(Error::Schema(_))
    ));
    assert!(matches!(aggregate(&[]), Err(Error::Data(_))));
}

#[test]
fn missing_and_failed_seeds_are_flagged_not_averaged() {
    let mut failed = gru(Variant::Citymem, 42, 1e9);
    failed.status = RunStatus::Failed;
    let rs = vec![
        gru(Variant::Base, 13, 1.0),
        gru(Variant::Base, 21, 2.0),
        gru(Variant::Base, 42, 3.0),
        gru(Variant::Citymem, 13, 1.0),
        gru(Variant::Citymem, 21, 3.0),
        failed,
    ];
    let t = aggregate(&rs).unwrap();
    let mem = t
        .find(BackboneKind::Gru, Variant::Citymem, &Setting::Full)
        .unwrap();
    assert_eq!(mem.seeds, vec![13, 21]);
    assert_eq!(mem.missing_seeds, vec![42]);
    assert_eq!(mem.cell("test.mse").unwrap().mean, 2.0);
    assert!(mem.flags().contains(&"missing seed 42".to_string()));
    assert!(render_text(&t).contains("missing seed 42"));
}

#[test]
fn partially_present_metric_leaves_an_empty_cell() {
    let mut a = record(BackboneKind::Stgcn, Variant::Base, Regime::Full, 13, 4.0);
    let b = record(BackboneKind::Stgcn, Variant::Base, Regime::Full, 21, 6.0);
    a.test.as_mut().unwrap().mae = None;
    let t = aggregate(&[
        a,
        b,
        gru(Variant::Base, 13, 1.0),
        gru(Variant::Base, 21, 1.0),
    ])
    .unwrap();
    let st = t
        .find(BackboneKind::Stgcn, Variant::Base, &Setting::Full)
        .unwrap();
    assert!(st.cell("test.mae").is_none());
    assert_eq!(st.cell("test.mse").unwrap().mean, 5.0);
    let text = render_text(&t);
    let line = text.lines().find(|l| l.starts_with("stgcn")).unwrap();
    assert!(line.contains("5.0000 ± 1.4142  --"), "{line}");
}

#[test]
fn rows_are_ordered_by_setting_then_backbone_then_variant() {
    let rs = vec![
        record(
            BackboneKind::Transformer,
            Variant::Citymem,
            Regime::Lowdata { frac: 0.2 },
            13,
            1.0,
        ),
        transfer_record(Variant::Base, 13, 2.0, 1.0),
        record(
            BackboneKind::Transformer,
            Variant::Base,
            Regime::Lowdata { frac: 0.05 },
            13,
            1.0,
        ),
        gru(Variant::Citymem, 13, 1.0),
        gru(Variant::Base, 13, 1.0),
    ];
    let t = aggregate(&rs).unwrap();
    let keys: Vec<(String, String)> = t
        .rows
        .iter()
        .map(|r| {
            (
                format!("{:?}", r.setting),
                format!("{}/{}", r.backbone, r.variant),
            )
        })
        .collect();
    assert_eq!(keys[0].1, "gru/base");
    assert_eq!(keys[1].1, "gru/citymem");
    assert!(keys[2].0.contains("0.05") && keys[3].0.contains("0.2"));
    assert!(keys[4].0.contains("Transfer"));
}

#[test]
fn transfer_table_has_the_pre_post_shape() {
    let rs: Vec<_> = [13, 21, 42]
        .into_iter()
        .flat_map(|s| {
            [
                transfer_record(Variant::Base, s, 10.0, 8.0 + s as f64 / 100.0),
                transfer_record(Variant::Citymem, s, 9.0, 7.0),
            ]
        })
        .collect();
    let t = aggregate(&rs).unwrap();
    let text = render_text(&t);
    let header = text.lines().find(|l| l.starts_with("train_city")).unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(
        cols,
        [
            "train_city",
            "test_city",
            "model",
            "Pre",
            "Post",
            "n",
            "notes"
        ]
    );
    assert!(text.contains("transformer+citymem"));
    let curves = adaptation_csv(&t);
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
    assert!(curves.contains("transformer,citymem,A,B,10,7,0,3"));
}

#[test]
fn text_columns_are_aligned() {
    let rs = vec![
        gru(Variant::Base, 13, 1.0),
        gru(Variant::Citymem, 13, 123.456),
        gru(Variant::Cityid, 13, 10.0),
    ];
    let text = render_text(&aggregate(&rs).unwrap());
    let lines: Vec<&str> = text.lines().skip(2).collect();
    let col = lines[0].find("MSE").unwrap();
    let at = |l: &str| l.chars().take(col).count();
    let header_chars = at(lines[0]);
    for l in &lines[2..] {
        let start: String = l.chars().skip(header_chars).take(1).collect();
        assert!(start.chars().all(|c| c.is_ascii_digit()), "{l}");
        let before: String = l.chars().take(header_chars).collect();
        assert!(before.ends_with("  "), "{l}");
    }
}

#[test]
fn csv_structured_csv_round_trip_is_byte_stable() {
    let mut rs: Vec<_> = [13, 21, 42]
        .into_iter()
        .flat_map(|s| {
            [
                gru(Variant::Base, s, 1.0 / 3.0 + s as f64),
                record(
                    BackboneKind::Gru,
                    Variant::Citymem,
                    Regime::Lowdata { frac: 0.1 },
                    s,
                    0.1 * s as f64,
                ),
                transfer_record(Variant::Cityid, s, 2.0 / 7.0, 1e-9 * s as f64),
            ]
        })
        .collect();
    rs.pop();
    let t = aggregate(&rs).unwrap();
    let csv1 = render_csv(&t).unwrap();
    let json = render_structured(&table_from_csv(&csv1).unwrap()).unwrap();
    let csv2 = render_csv(&table_from_structured(&json).unwrap()).unwrap();
    assert_eq!(csv1, csv2);
    // the table itself survives both forms apart from curves, which csv omits
    let mut no_curves = t.clone();
    no_curves.curves.clear();
    assert_eq!(table_from_csv(&csv1).unwrap(), no_curves);
    assert_eq!(
        table_from_structured(&render_structured(&t).unwrap()).unwrap(),
        t
    );
}

#[test]
fn report_formats_and_errors() {
    assert!(matches!(
        "xlsx".parse::<ReportFormat>(),
        Err(Error::Usage(_))
    ));
    let t = aggregate(&[gru(Variant::Base, 13, 1.0)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for f in ["text", "csv", "structured"] {
        let paths = report(&t, f.parse().unwrap(), dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.exists()));
    }
    let mut empty = t.clone();
    empty.rows.clear();
    assert!(report(&empty, ReportFormat::Text, dir.path()).is_err());
}

#[test]
fn lowdata_plot_series_include_full_as_fraction_one() {
    let mut rs = Vec::new();
    for s in [13, 21] {
        rs.push(record(
            BackboneKind::Transformer,
            Variant::Base,
            Regime::Lowdata { frac: 0.1 },
            s,
            4.0,
        ));
        rs.push(record(
            BackboneKind::Transformer,
            Variant::Base,
            Regime::Lowdata { frac: 0.05 },
            s,
            6.0,
        ));
        rs.push(record(
            BackboneKind::Transformer,
            Variant::Base,
            Regime::Full,
            s,
            2.0,
        ));
    }
    let csv = lowdata_csv(&aggregate(&rs).unwrap());
    let fracs: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(fracs, ["0.05", "0.1", "1"]);
}

fn random_results(rng: &mut ChaCha8Rng) -> Vec<RunResult> {
    let mut rs = Vec::new();
    for b in [BackboneKind::Gru, BackboneKind::Transformer] {
        for v in Variant::ALL {
            for regime in [Regime::Full, Regime::Lowdata { frac: 0.1 }] {
                for s in [13u64, 21, 42] {
                    if rng.random_bool(0.85) {
                        rs.push(record(
                            b,
                            v,
                            regime.clone(),
                            s,
                            rng.random_range(0.1..100.0),
                        ));
                    }
                }
            }
        }
    }
    rs
}

/// Independent oracle: a plain nested scan, one pass per group and metric.
fn oracle(rs: &[RunResult], b: BackboneKind, v: Variant, frac: Option<f64>) -> Option<(f64, f64)> {
    let mut vals = Vec::new();
    for r in rs {
        if r.backbone == b && r.variant == v && r.regime.frac() == frac && r.status == RunStatus::Ok
        {
            vals.push((r.seed, r.test.as_ref().unwrap().mse.unwrap()));
        }
    }
    vals.sort_by(|a, b| a.0.cmp(&b.0));
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mut sum = 0.0;
    for (_, x) in &vals {
        sum += x;
    }
    let mean = sum / n;
    if vals.len() == 1 {
        return Some((mean, 0.0));
    }
    let mut ss = 0.0;
    for (_, x) in &vals {
        ss += (x - mean) * (x - mean);
    }
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

#[test]
fn aggregation_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..60 {
        let rs = random_results(&mut rng);
        if rs.is_empty() {
            continue;
        }
        let t = aggregate(&rs).unwrap();
        for b in [BackboneKind::Gru, BackboneKind::Transformer] {
            for v in Variant::ALL {
                for frac in [None, Some(0.1)] {
                    let setting = frac.map_or(Setting::Full, |f| Setting::Lowdata { frac: f });
                    let got = t
                        .find(b, v, &setting)
                        .and_then(|r| r.cell("test.mse"))
                        .map(|c| (c.mean, c.std));
                    match (got, oracle(&rs, b, v, frac)) {
                        (Some(g), Some(o)) => {
                            assert!((g.0 - o.0).abs() <= 1e-12 * o.0.abs().max(1.0));
                            assert!((g.1 - o.1).abs() <= 1e-12 * o.0.abs().max(1.0));
                        }
                        (None, None) => {}
                        other => panic!("presence differs: {other:?}"),
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn aggregation_ignores_input_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rs = random_results(&mut rng);
        prop_assume!(!rs.is_empty());
        let mut shuffled = rs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let a = aggregate(&rs).unwrap();
        let b = aggregate(&shuffled).unwrap();
        prop_assert_eq!(render_csv(&a).unwrap(), render_csv(&b).unwrap());
        prop_assert_eq!(a, b);
    }
}

fn attention_run(seed: u64, k: usize, steps: &[(String, usize, Vec<f64>)]) -> RunResult {
    let mut r = record(BackboneKind::Gru, Variant::Citymem, Regime::Full, seed, 1.0);
    r.attention = steps
        .iter()
        .map(|(city, step, alpha)| {
            assert_eq!(alpha.len(), k);
            AttentionRecord {
                city: city.clone(),
                start: step - step % 12,
                step: *step,
                alpha: alpha.clone(),
            }
        })
        .collect();
    r
}

#[test]
fn uniform_attention_reports_one_over_k_with_k_rows_per_bucket() {
    let k = 8;
    let steps: Vec<_> = (0..96 * 2)
        .flat_map(|t| ["A", "B"].map(|c| (c.to_string(), t, vec![1.0 / k as f64; k])))
        .collect();
    let s = attention_report(&[attention_run(13, k, &steps)], 96, 4).unwrap();
    assert!(s.warnings.is_empty());
    assert_eq!(s.rows.len(), 2 * 4 * k);
    let mut per_group: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for r in &s.rows {
        assert!((r.mean - 1.0 / k as f64).abs() < 1e-15);
        *per_group.entry((r.city.clone(), r.bucket)).or_default() += 1;
    }
    assert!(per_group.values().all(|&n| n == k));
}

#[test]
fn attention_bucket_means_match_flat_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let k = rng.random_range(2..7);
        let (period, buckets) = (24, rng.random_range(1..7));
        let steps: Vec<_> = (0..rng.random_range(5..80))
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                let city = if rng.random_bool(0.5) { "A" } else { "B" };
                (
                    city.to_string(),
                    rng.random_range(0..200),
                    raw.iter().map(|v| v / z).collect(),
                )
            })
            .collect();
        let s = attention_report(&[attention_run(trial, k, &steps)], period, buckets).unwrap();
        for row in &s.rows {
            let (mut sum, mut n) = (0.0, 0);
            for (city, step, alpha) in &steps {
                if *city == row.city && (step % period) * buckets / period == row.bucket {
                    sum += alpha[row.slot];
                    n += 1;
                }
            }
            assert_eq!(n, row.count);
            assert!((sum / n as f64 - row.mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_report_edge_cases() {
    let s = attention_report(&[gru(Variant::Base, 13, 1.0)], 96, 4).unwrap();
    assert!(s.rows.is_empty());
    assert_eq!(s.warnings.len(), 1);
    assert!(matches!(
        attention_report(&[], 96, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(attention_report(&[], 4, 8), Err(Error::Config(_))));
    let bad = attention_run(13, 2, &[("A".into(), 0, vec![0.5, 0.5])]);
    let mut bad2 = bad.clone();
    bad2.attention.push(AttentionRecord {
        city: "A".into(),
        start: 0,
        step: 1,
        alpha: vec![1.0],
    });
    assert!(matches!(
        attention_report(&[bad2], 96, 4),
        Err(Error::Data(_))
    ));
}

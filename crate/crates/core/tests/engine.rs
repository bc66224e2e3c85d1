use citycond::data::{DatasetKind, MultiCityDataset, Split, SyntheticSpec, TrajectorySpec};
use citycond::engine::{
    ade_fde, batch_loss, build_model, epoch_batches, evaluate, fit, init_city_from_mean, mean_std,
    mse_mae, read_results, run_config, run_matrix, train, train_step, write_results, AdamState,
    DataSource, ExperimentConfig, MatrixAxes, Prepared, Regime, RunStatus, Sample, SCHEMA_VERSION,
};
use citycond::{BackboneKind, BackboneSpec, Error, Init, ParamStore, Tape, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(kind: BackboneKind, variant: Variant) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone = BackboneSpec::tiny(kind, 8);
    cfg.citycond.variant = variant;
    cfg.citycond.d_c = 4;
    cfg.citycond.d_m = 8;
    cfg.citycond.slots = 4;
    cfg.data.synthetic = SyntheticSpec {
        cities: 2,
        nodes: 5,
        steps: 240,
        period: 24,
        ..SyntheticSpec::default()
    };
    cfg.data.history = 8;
    cfg.data.horizon = 4;
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.steps_per_epoch = Some(3);
    cfg.train.max_eval_windows = Some(6);
    cfg
}

fn tiny_traj(variant: Variant) -> ExperimentConfig {
    let mut cfg = tiny(BackboneKind::LstmTraj, variant);
    cfg.data.source = DataSource::Trajectories;
    cfg.data.trajectories = TrajectorySpec {
        agents: 3,
        steps: 400,
        ..TrajectorySpec::default()
    };
    cfg.data.history = 20;
    cfg.data.horizon = 10;
    cfg
}

fn prepared(cfg: &ExperimentConfig) -> Prepared {
    let ds = citycond::engine::load_dataset(&cfg.data).unwrap();
    Prepared::new(&ds, &cfg.data).unwrap()
}

fn scalar_store(values: &[f64]) -> ParamStore {
    let mut store = ParamStore::new(0);
    for (i, v) in values.iter().enumerate() {
        let id = store.add(&format!("p{i}"), &[1], Init::Zeros).unwrap();
        store.tensor_mut(id).data_mut()[0] = *v;
    }
    store
}

fn set_grads(store: &mut ParamStore, grads: &[f64]) {
    store.clear_grads();
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        store.tensor_mut(id).accumulate_grad(&[*g]).unwrap();
    }
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut store = scalar_store(&[0.5, -2.0]);
    let mut adam = AdamState::new(&store);
    for _ in 0..5 {
        set_grads(&mut store, &[0.0, 0.0]);
        adam.step(&mut store, 0.1).unwrap();
    }
    assert_eq!(store.values(), vec![vec![0.5], vec![-2.0]]);
}

#[test]
fn adam_first_step_arithmetic() {
    let mut store = scalar_store(&[1.0]);
    let mut adam = AdamState::new(&store);
    set_grads(&mut store, &[1.0]);
    adam.step(&mut store, 0.1).unwrap();
    let delta = store.values()[0][0] - 1.0;
    assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centre: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let curv: Vec<f64> = (0..5).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut store = scalar_store(&[0.0; 5]);
    let mut adam = AdamState::new(&store);
    for _ in 0..100 {
        let x: Vec<f64> = store.values().iter().map(|v| v[0]).collect();
        let g: Vec<f64> = x
            .iter()
            .zip(&centre)
            .zip(&curv)
            .map(|((x, c), a)| 2.0 * a * (x - c))
            .collect();
        set_grads(&mut store, &g);
        adam.step(&mut store, 0.05).unwrap();
    }
    // objective gap to the minimum value 0
    let gap: f64 = store
        .values()
        .iter()
        .zip(&centre)
        .zip(&curv)
        .map(|((v, c), a)| a * (v[0] - c).powi(2))
        .sum();
    assert!(gap < 1e-3, "{gap}");
    for (v, c) in store.values().iter().zip(&centre) {
        assert!((v[0] - c).abs() < 1e-2, "{} vs {c}", v[0]);
    }
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut store = scalar_store(&[1.0, 2.0]);
    let mut adam = AdamState::new(&store);
    set_grads(&mut store, &[0.5, f64::NAN]);
    let err = adam.step(&mut store, 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(err.to_string().contains("p1"), "{err}");
    assert_eq!(store.values(), vec![vec![1.0], vec![2.0]]);
}

#[test]
fn adam_skips_frozen_and_gradless_parameters() {
    let mut store = scalar_store(&[1.0, 2.0, 3.0]);
    store.set_trainable("p1", false);
    let mut adam = AdamState::new(&store);
    store.clear_grads();
    let ids: Vec<_> = store.ids().collect();
    store.tensor_mut(ids[1]).accumulate_grad(&[1.0]).unwrap();
    store.tensor_mut(ids[0]).accumulate_grad(&[1.0]).unwrap();
    adam.step(&mut store, 0.1).unwrap();
    let v = store.values();
    assert!(v[0][0] < 1.0);
    assert_eq!((v[1][0], v[2][0]), (2.0, 3.0));
}

#[test]
fn metric_examples() {
    assert_eq!(mse_mae(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), (2.5, 1.5));
    assert_eq!(mse_mae(&[3.0, -1.0], &[3.0, -1.0]).unwrap(), (0.0, 0.0));
    let target = vec![vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]];
    let shifted = vec![vec![3.0, 4.0, 4.0, 5.0, 5.0, 6.0]];
    assert_eq!(ade_fde(&shifted, &target).unwrap(), (5.0, 5.0));
    assert_eq!(ade_fde(&target, &target).unwrap(), (0.0, 0.0));
    assert!(matches!(mse_mae(&[], &[]), Err(Error::Contract(_))));
    assert!(matches!(ade_fde(&[], &[]), Err(Error::Contract(_))));
    assert_eq!(mean_std(&[1.0, 2.0, 3.0]), Some((2.0, 1.0)));
    assert_eq!(mean_std(&[10.0, 12.0, 14.0]), Some((12.0, 2.0)));
    assert_eq!(mean_std(&[4.0]), Some((4.0, 0.0)));
    assert_eq!(mean_std(&[]), None);
}

#[test]
fn traffic_metrics_match_flat_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (w, h, n) = (
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..7),
        );
        let len = w * h * n;
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        let t: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        let (mut se, mut ae) = (0.0, 0.0);
        for win in 0..w {
            for step in 0..h {
                for node in 0..n {
                    let k = (win * h + step) * n + node;
                    se += (p[k] - t[k]).powi(2);
                    ae += (p[k] - t[k]).abs();
                }
            }
        }
        let (mse, mae) = mse_mae(&p, &t).unwrap();
        assert!((mse - se / len as f64).abs() < 1e-12 * (1.0 + mse));
        assert!((mae - ae / len as f64).abs() < 1e-12 * (1.0 + mae));
    }
}

#[test]
fn trajectory_metrics_match_per_agent_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let agents = rng.random_range(1..6);
        let steps = rng.random_range(1..12);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..agents)
                .map(|_| {
                    (0..2 * steps)
                        .map(|_| rng.random_range(-20.0..20.0))
                        .collect()
                })
                .collect()
        };
        let (p, t) = (draw(&mut rng), draw(&mut rng));
        let (mut ade, mut fde) = (0.0, 0.0);
        for a in 0..agents {
            let mut sum = 0.0;
            for s in 0..steps {
                let dx = p[a][2 * s] - t[a][2 * s];
                let dy = p[a][2 * s + 1] - t[a][2 * s + 1];
                let d = (dx * dx + dy * dy).sqrt();
                sum += d;
                if s == steps - 1 {
                    fde += d;
                }
            }
            ade += sum / steps as f64;
        }
        let (got_ade, got_fde) = ade_fde(&p, &t).unwrap();
        assert!((got_ade - ade / agents as f64).abs() < 1e-12);
        assert!((got_fde - fde / agents as f64).abs() < 1e-12);
    }
}

#[test]
fn evaluate_rejects_empty_split() {
    let cfg = tiny(BackboneKind::Gru, Variant::Base);
    let data = prepared(&cfg);
    let model = build_model(&cfg, &data).unwrap();
    assert!(matches!(
        evaluate(&model, &data, &[], false),
        Err(Error::Contract(_))
    ));
}

#[test]
fn denormalised_mse_scales_by_variance_for_one_node() {
    let mut cfg = tiny(BackboneKind::Gru, Variant::Base);
    cfg.data.synthetic.nodes = 1;
    cfg.data.synthetic.cities = 1;
    let data = prepared(&cfg);
    let model = build_model(&cfg, &data).unwrap();
    let samples = data.split_samples(Split::Test, &[0]);
    let m = evaluate(&model, &data, &samples, false).unwrap().metrics;
    let std = data.cities[0].stats.as_ref().unwrap().std[0];
    let expect = std * std * m.mse_normalized.unwrap();
    assert!(
        (m.mse.unwrap() - expect).abs() < 1e-9 * expect,
        "{:?} vs {expect}",
        m.mse
    );
    assert!((m.mae.unwrap() - std * m.mae_normalized.unwrap()).abs() < 1e-9 * m.mae.unwrap());
}

#[test]
fn patience_zero_runs_one_epoch() {
    let mut cfg = tiny(BackboneKind::Gru, Variant::Citymem);
    cfg.train.patience = 0;
    cfg.train.max_epochs = 10;
    let r = run_config(&cfg).unwrap().result;
    assert_eq!(r.epochs.len(), 1);
    assert_eq!(r.best_epoch, Some(1));
}

#[test]
fn restored_checkpoint_has_minimum_val_loss() {
    let mut cfg = tiny(BackboneKind::Tcn, Variant::Citymem);
    cfg.train.max_epochs = 6;
    cfg.train.patience = 6;
    cfg.train.lr = 0.05;
    let data = prepared(&cfg);
    let mut model = build_model(&cfg, &data).unwrap();
    let all = data.all_cities();
    let train_s = data.split_samples(Split::Train, &all);
    let val_s = data.split_samples(Split::Val, &all);
    let fitted = fit(&mut model, &data, &cfg, &train_s, &val_s).unwrap();
    let min = fitted
        .epochs
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(fitted.epochs[fitted.best_epoch - 1].val_loss, min);
    assert_eq!(evaluate(&model, &data, &val_s, false).unwrap().loss, min);
}

#[test]
fn seed_replay_is_bit_identical() {
    for cfg in [
        tiny(BackboneKind::Transformer, Variant::Citymem),
        tiny(BackboneKind::Stgcn, Variant::Cityid),
    ] {
        let a = run_config(&cfg).unwrap().result;
        let b = run_config(&cfg).unwrap().result;
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let mut other = cfg.clone();
        other.seed = 21;
        assert_ne!(run_config(&other).unwrap().result.test, a.test);
    }
}

#[test]
fn full_fraction_lowdata_matches_full_regime() {
    let cfg = tiny(BackboneKind::Gru, Variant::Cityid);
    let full = run_config(&cfg).unwrap().result;
    let mut low = cfg.clone();
    low.regime = Regime::Lowdata { frac: 1.0 };
    let low = run_config(&low).unwrap().result;
    assert_eq!(full.epochs, low.epochs);
    assert_eq!(full.test, low.test);
}

#[test]
fn cold_start_losses_match_across_variants() {
    for kind in BackboneKind::TRAFFIC {
        let base = tiny(kind, Variant::Base);
        let data = prepared(&base);
        let batch: Vec<Sample> = data
            .split_samples(Split::Train, &[0, 1])
            .into_iter()
            .step_by(7)
            .take(6)
            .collect();
        let loss = |variant| {
            let mut cfg = base.clone();
            cfg.citycond.variant = variant;
            let model = build_model(&cfg, &data).unwrap();
            let tape = Tape::new();
            batch_loss(&model, &tape, &data, &batch)
                .unwrap()
                .item()
                .unwrap()
        };
        let b = loss(Variant::Base);
        assert_eq!(b, loss(Variant::Citymem), "{kind}");
        assert_eq!(b, loss(Variant::Cityid), "{kind}");
    }
}

#[test]
fn one_small_step_descends() {
    let mut cases: Vec<ExperimentConfig> = BackboneKind::TRAFFIC
        .iter()
        .map(|&k| tiny(k, Variant::Citymem))
        .collect();
    cases.push(tiny_traj(Variant::Cityid));
    for cfg in cases {
        let data = prepared(&cfg);
        let mut model = build_model(&cfg, &data).unwrap();
        let batch: Vec<Sample> = data
            .split_samples(Split::Train, &[0, 1])
            .into_iter()
            .take(4)
            .collect();
        let mut adam = AdamState::new(&model.store);
        let before = train_step(&mut model, &mut adam, &data, &batch, 1e-4, None).unwrap();
        let after = batch_loss(&model, &Tape::new(), &data, &batch)
            .unwrap()
            .item()
            .unwrap();
        assert!(after < before, "{}: {after} !< {before}", cfg.backbone.kind);
    }
}

#[test]
fn oversized_models_overfit_a_tiny_set() {
    let mut gru = tiny(BackboneKind::Gru, Variant::Citymem);
    gru.backbone.d_h = 32;
    gru.backbone.head_hidden = 64;
    let mut traj = tiny_traj(Variant::Cityid);
    traj.backbone.d_h = 32;
    for cfg in [gru, traj] {
        let data = prepared(&cfg);
        let mut model = build_model(&cfg, &data).unwrap();
        let batch: Vec<Sample> = data
            .split_samples(Split::Train, &[0])
            .into_iter()
            .step_by(5)
            .take(4)
            .collect();
        let initial = batch_loss(&model, &Tape::new(), &data, &batch)
            .unwrap()
            .item()
            .unwrap();
        let mut adam = AdamState::new(&model.store);
        for _ in 0..300 {
            train_step(&mut model, &mut adam, &data, &batch, 3e-3, None).unwrap();
        }
        let last = batch_loss(&model, &Tape::new(), &data, &batch)
            .unwrap()
            .item()
            .unwrap();
        assert!(
            last < 0.1 * initial,
            "{}: {last} vs initial {initial}",
            cfg.backbone.kind
        );
    }
}

#[test]
fn batches_are_city_homogeneous_round_robin() {
    let samples: Vec<Sample> = (0..2)
        .flat_map(|c| {
            (0..(10 + 7 * c)).map(move |s| Sample {
                city: c,
                start: s,
                agent: 0,
            })
        })
        .collect();
    let batches = epoch_batches(&samples, 4, 5, "e1");
    assert!(batches
        .iter()
        .all(|b| b.iter().all(|s| s.city == b[0].city)));
    let order: Vec<usize> = batches.iter().map(|b| b[0].city).collect();
    assert_eq!(order, vec![0, 1, 0, 1, 0, 1, 1, 1]);
    let mut seen: Vec<Sample> = batches.concat();
    seen.sort_by_key(|s| (s.city, s.start));
    assert_eq!(seen, samples);
    assert_eq!(epoch_batches(&samples, 4, 5, "e1"), batches);
    assert_ne!(epoch_batches(&samples, 4, 5, "e2"), batches);
}

#[test]
fn crosscity_without_adaptation_keeps_metrics() {
    let mut cfg = tiny(BackboneKind::Gru, Variant::Citymem);
    cfg.regime = Regime::Crosscity {
        source: "A".into(),
        target: "B".into(),
        adapt_steps: 0,
        shot_count: 10,
        eval_every: 5,
        freeze_backbone: false,
    };
    let r = run_config(&cfg).unwrap().result;
    let t = r.transfer.unwrap();
    assert_eq!(t.pre, t.post);
    assert_eq!((t.train_city.as_str(), t.test_city.as_str()), ("A", "B"));
    assert_eq!(t.curve.len(), 1);

    cfg.regime = Regime::Crosscity {
        source: "A".into(),
        target: "B".into(),
        adapt_steps: 15,
        shot_count: 10,
        eval_every: 5,
        freeze_backbone: false,
    };
    let r = run_config(&cfg).unwrap().result;
    let t = r.transfer.unwrap();
    assert_eq!(
        t.curve.iter().map(|p| p.step).collect::<Vec<_>>(),
        vec![0, 5, 10, 15]
    );
    assert_eq!(t.curve[3].metrics, t.post);
    assert_ne!(t.pre, t.post);
}

#[test]
fn frozen_backbone_only_moves_citycond() {
    let mut cfg = tiny(BackboneKind::Gru, Variant::Citymem);
    cfg.regime = Regime::Crosscity {
        source: "A".into(),
        target: "B".into(),
        adapt_steps: 0,
        shot_count: 10,
        eval_every: 5,
        freeze_backbone: true,
    };
    let before = run_config(&cfg).unwrap().model;
    if let Regime::Crosscity { adapt_steps, .. } = &mut cfg.regime {
        *adapt_steps = 5;
    }
    let after = run_config(&cfg).unwrap().model;
    for ((_, a), (_, b)) in before.store.iter().zip(after.store.iter()) {
        if a.name.starts_with("citycond.") {
            continue;
        }
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    let mem = before.store.find("citycond.gate.w_m").unwrap();
    assert_ne!(
        before.store.tensor(mem).data(),
        after.store.tensor(mem).data()
    );
}

#[test]
fn unseen_city_row_starts_at_mean() {
    let mut cfg = tiny(BackboneKind::Gru, Variant::Cityid);
    cfg.data.synthetic.cities = 3;
    let data = prepared(&cfg);
    let mut model = build_model(&cfg, &data).unwrap();
    let id = model.store.find("citycond.city_embedding").unwrap();
    let t = model.store.tensor(id).clone();
    init_city_from_mean(&mut model, 2, &[0, 1]).unwrap();
    let d = t.shape()[1];
    let after = model.store.tensor(id).data();
    for j in 0..d {
        assert_eq!(after[2 * d + j], (t.data()[j] + t.data()[d + j]) / 2.0);
        assert_eq!(after[j], t.data()[j]);
    }
}

#[test]
fn matrix_counts_and_hashes() {
    let mut base = tiny(BackboneKind::Gru, Variant::Base);
    base.train.max_epochs = 1;
    base.train.steps_per_epoch = Some(1);
    base.matrix = Some(MatrixAxes {
        seeds: vec![13, 21, 42],
        ..MatrixAxes::default()
    });
    let runs = base.expand();
    let results = run_matrix(&runs, |_| {});
    assert_eq!(results.len(), 3);
    assert!(results
        .iter()
        .all(|r| r.config_hash == results[0].config_hash && r.status == RunStatus::Ok));
    assert_eq!(
        results.iter().map(|r| r.seed).collect::<Vec<_>>(),
        vec![13, 21, 42]
    );

    base.matrix = Some(MatrixAxes {
        backbones: vec![BackboneKind::Gru, BackboneKind::Transformer],
        variants: Variant::ALL.to_vec(),
        seeds: vec![13, 21, 42],
        ..MatrixAxes::default()
    });
    let runs = base.expand();
    assert_eq!(runs.len(), 18);
    let mut hashes: Vec<String> = runs.iter().map(ExperimentConfig::hash).collect();
    hashes.dedup();
    assert_eq!(hashes.len(), 6);
}

#[test]
fn matrix_isolates_failures() {
    let ok = tiny(BackboneKind::Gru, Variant::Base);
    let mut bad = ok.clone();
    bad.data.source = DataSource::Dir;
    bad.data.path = Some("/nonexistent/dataset".into());
    let mut unsupported = tiny_traj(Variant::Citymem);
    unsupported.train.max_epochs = 1;
    let mut seen = 0;
    let results = run_matrix(&[bad, unsupported, ok], |_| seen += 1);
    assert_eq!(seen, 3);
    assert_eq!(results[0].status, RunStatus::Failed);
    assert!(results[0].error.as_ref().unwrap().contains("nonexistent"));
    assert_eq!(results[1].status, RunStatus::Failed);
    assert_eq!(results[2].status, RunStatus::Ok);
}

#[test]
fn trajectory_runs_report_displacement_errors() {
    let cfg = tiny_traj(Variant::Cityid);
    let r = run_config(&cfg).unwrap().result;
    let m = r.test.unwrap();
    assert!(m.ade.unwrap() > 0.0 && m.fde.unwrap() > 0.0);
    assert!(m.mse.is_none());
    let data = prepared(&cfg);
    let (x, y) = data
        .tensors(Sample {
            city: 0,
            start: 0,
            agent: 1,
        })
        .unwrap();
    assert_eq!((x.shape(), y.shape()), (&[20, 2][..], &[10, 2][..]));
}

#[test]
fn attention_logged_for_citymem_only() {
    let mut cfg = tiny(BackboneKind::Gru, Variant::Citymem);
    cfg.log_attention = true;
    let r = run_config(&cfg).unwrap().result;
    let windows = r.test.as_ref().unwrap().windows;
    assert_eq!(r.attention.len(), windows * cfg.data.history);
    for a in &r.attention {
        assert_eq!(a.alpha.len(), 4);
        assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    cfg.citycond.variant = Variant::Cityid;
    assert!(run_config(&cfg).unwrap().result.attention.is_empty());
}

#[test]
fn results_round_trip_through_ndjson() {
    let cfg = tiny(BackboneKind::Gru, Variant::Citymem);
    let r = run_config(&cfg).unwrap().result;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.ndjson");
    write_results(&path, &[r.clone(), r.clone()]).unwrap();
    let back = read_results(&path).unwrap();
    assert_eq!(back, vec![r.clone(), r]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let old = text.replacen(
        &format!("\"schema_version\":{SCHEMA_VERSION}"),
        "\"schema_version\":0",
        1,
    );
    std::fs::write(&path, old).unwrap();
    assert!(matches!(read_results(&path), Err(Error::Schema(_))));
}

#[test]
fn config_parsing_and_overrides() {
    let text = r#"
        name = "demo"
        seed = 21
        [backbone]
        kind = "transformer"
        d_h = 16
        heads = 2
        [citycond]
        variant = "citymem"
        [regime]
        kind = "lowdata"
        frac = 0.2
        [train]
        max_epochs = 3
    "#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    assert_eq!(cfg.backbone.kind, BackboneKind::Transformer);
    assert_eq!(cfg.regime, Regime::Lowdata { frac: 0.2 });
    assert_eq!(cfg.train.max_epochs, 3);
    assert_eq!(cfg.train.lr, 1e-3);

    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(back, cfg);

    let o = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let p = std::path::Path::new("demo.toml");
    let c2 = ExperimentConfig::from_toml_with(
        text,
        &o(&["seed=42", "citycond.variant=base", "train.lr=0.01"]),
        p,
    )
    .unwrap();
    assert_eq!(
        (c2.seed, c2.variant(), c2.train.lr),
        (42, Variant::Base, 0.01)
    );
    let c3 = ExperimentConfig::from_toml_with(
        text,
        &o(&[
            "regime.kind=crosscity",
            "regime.source=A",
            "regime.target=B",
        ]),
        p,
    )
    .unwrap();
    assert!(matches!(
        c3.regime,
        Regime::Crosscity {
            adapt_steps: 200,
            shot_count: 100,
            eval_every: 20,
            ..
        }
    ));

    let mut same = cfg.clone();
    same.seed = 99;
    assert_eq!(same.hash(), cfg.hash());
    assert_ne!(c2.hash(), cfg.hash());

    for bad in [
        "bogus = 1",
        "[train]\nlr = -1.0",
        "[regime]\nkind = \"lowdata\"\nfrac = 1.5",
        "[backbone]\nkind = \"lstm_traj\"",
        "[citycond]\nvariant = \"other\"",
    ] {
        let err = ExperimentConfig::from_toml_str(bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{bad}: {err:?}");
    }
    assert!(matches!(
        ExperimentConfig::from_toml_str("x = ["),
        Err(Error::Parse { .. })
    ));
    assert!(matches!(
        ExperimentConfig::from_toml_with("", &o(&["novalue"]), p),
        Err(Error::Usage(_))
    ));
}

#[test]
fn dataset_directories_feed_runs() {
    let cfg = tiny(BackboneKind::Gnn, Variant::Cityid);
    let ds = citycond::engine::load_dataset(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let mut from_dir = cfg.clone();
    from_dir.data.source = DataSource::Dir;
    from_dir.data.path = Some(dir.path().to_path_buf());
    let a = run_config(&cfg).unwrap().result;
    let b = run_config(&from_dir).unwrap().result;
    assert_eq!(a.test, b.test);
    let loaded = MultiCityDataset::load(dir.path()).unwrap();
    assert_eq!(loaded.kind, DatasetKind::Traffic);
}

#[test]
fn short_series_are_data_errors() {
    let mut cfg = tiny(BackboneKind::Gru, Variant::Base);
    cfg.data.history = 200;
    cfg.data.horizon = 100;
    assert!(matches!(run_config(&cfg), Err(Error::Data(_))));
}

#[test]
fn train_directly_on_prepared_data() {
    let cfg = tiny(BackboneKind::Gru, Variant::Base);
    let data = prepared(&cfg);
    let t = train(&cfg, &data).unwrap();
    assert_eq!(t.result.params.unwrap().total, t.model.param_count());
    assert_eq!(t.result.params.unwrap().citycond, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_std_is_permutation_invariant(mut v in prop::collection::vec(-1e3f64..1e3, 1..12), seed in 0u64..100) {
        use rand::seq::SliceRandom;
        let (m, s) = mean_std(&v).unwrap();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (m2, s2) = mean_std(&v).unwrap();
        prop_assert!((m - m2).abs() < 1e-9 && (s - s2).abs() < 1e-9);
        prop_assert!(s >= 0.0);
    }

    #[test]
    fn mse_dominates_squared_mae(p in prop::collection::vec(-10f64..10.0, 1..30)) {
        let t: Vec<f64> = p.iter().map(|x| x * 0.5 + 1.0).collect();
        let (mse, mae) = mse_mae(&p, &t).unwrap();
        prop_assert!(mse + 1e-12 >= mae * mae);
    }
}

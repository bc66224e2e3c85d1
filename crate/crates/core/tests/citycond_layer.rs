use citycond::autodiff::gradcheck;
use citycond::citycond::{cityid_augment, gated_fuse, memory_read, pool_hidden};
use citycond::{CityCondConfig, CityCondLayer, ParamStore, Pooling, Tape, Tensor, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.tensor(store.find(name).unwrap_or_else(|| panic!("missing {name}")))
}

fn layer(variant: Variant, cities: usize, d_h: usize, seed: u64) -> (ParamStore, CityCondLayer) {
    let mut store = ParamStore::new(seed);
    let cfg = CityCondConfig::with_variant(variant);
    let layer = CityCondLayer::new(&mut store, &cfg, cities, d_h).unwrap();
    (store, layer)
}

/// Row-vector times matrix, written as plain loops.
fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    assert_eq!(rows, v.len());
    (0..cols)
        .map(|j| (0..rows).map(|i| v[i] * m.data()[i * cols + j]).sum())
        .collect()
}

/// Scalar-loop evaluation of the query MLP, slot attention and readout.
fn oracle_read(store: &ParamStore, e_c: &[f64], h: &[f64], slots: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let input: Vec<f64> = e_c.iter().chain(h).copied().collect();
    let hid: Vec<f64> = vecmat(&input, param(store, "citycond.query.hidden.w"))
        .iter()
        .zip(param(store, "citycond.query.hidden.b").data())
        .map(|(a, b)| (a + b).tanh())
        .collect();
    let q: Vec<f64> = vecmat(&hid, param(store, "citycond.query.out.w"))
        .iter()
        .zip(param(store, "citycond.query.out.b").data())
        .map(|(a, b)| a + b)
        .collect();
    let (k, d_m) = (slots.shape()[0], slots.shape()[1]);
    let logits: Vec<f64> = (0..k)
        .map(|s| (0..d_m).map(|j| q[j] * slots.data()[s * d_m + j]).sum())
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let m: Vec<f64> = (0..d_m)
        .map(|j| (0..k).map(|s| alpha[s] * slots.data()[s * d_m + j]).sum())
        .collect();
    (m, alpha)
}

#[test]
fn cityid_augment_with_zero_width_is_identity() {
    let mut store = ParamStore::new(3);
    let cfg = CityCondConfig {
        variant: Variant::Cityid,
        d_c: 0,
        ..Default::default()
    };
    let layer = CityCondLayer::new(&mut store, &cfg, 2, 8).unwrap();
    let tape = Tape::new();
    let x = tape.constant(&random(&mut ChaCha8Rng::seed_from_u64(1), &[4, 3, 2]));
    let y = layer.augment_input(&tape, &store, x, 1).unwrap();
    assert_eq!(y.shape(), vec![4, 3, 2]);
    assert_eq!(y.data(), x.data());
}

#[test]
fn cityid_augment_traffic_window_shape() {
    let (store, layer) = layer(Variant::Cityid, 2, 64, 5);
    let tape = Tape::new();
    let x = tape.zeros(&[12, 207, 1]).unwrap();
    let y = layer.augment_input(&tape, &store, x, 0).unwrap();
    assert_eq!(y.shape(), vec![12, 207, 17]);
    let e = param(&store, "citycond.city_embedding").data()[..16].to_vec();
    let v = y.value();
    for t in [0, 11] {
        for i in [0, 206] {
            assert_eq!(v.at(&[t, i, 0]).unwrap(), 0.0);
            for (j, ej) in e.iter().enumerate() {
                assert_eq!(v.at(&[t, i, 1 + j]).unwrap(), *ej);
            }
        }
    }
}

#[test]
fn cityid_augment_concatenates() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::vector(&[1.0, 2.0]).unwrap());
    let e = tape.constant(&Tensor::vector(&[0.5]).unwrap());
    assert_eq!(
        cityid_augment(&tape, x, e).unwrap().data(),
        vec![1.0, 2.0, 0.5]
    );
}

#[test]
fn cityid_augment_rejects_unknown_city() {
    let (store, layer) = layer(Variant::Cityid, 2, 8, 5);
    let tape = Tape::new();
    let x = tape.zeros(&[2, 1]).unwrap();
    assert!(matches!(
        layer.augment_input(&tape, &store, x, 2),
        Err(citycond::Error::Index(_))
    ));
}

#[test]
fn pooling_examples() {
    let tape = Tape::new();
    let single = tape.constant(&Tensor::new(vec![2, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    for p in [Pooling::Mean, Pooling::Max] {
        let out = pool_hidden(single, p).unwrap();
        assert_eq!(out.shape(), vec![2, 3]);
        assert_eq!(out.data(), vec![1., 2., 3., 4., 5., 6.]);
    }
    let h = tape.constant(&Tensor::new(vec![1, 2, 2], vec![1., 3., 5., 7.]).unwrap());
    assert_eq!(pool_hidden(h, Pooling::Mean).unwrap().data(), vec![3., 5.]);
    assert_eq!(pool_hidden(h, Pooling::Max).unwrap().data(), vec![5., 7.]);
    let seq = tape.constant(&Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
    assert_eq!(pool_hidden(seq, Pooling::Mean).unwrap().data(), seq.data());
}

#[test]
fn max_pooling_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let h = random(&mut rng, &[3, 4, 5]);
        let w = random(&mut rng, &[3, 5]);
        let err = gradcheck::check_inputs(&[h.clone()], gradcheck::DEFAULT_STEP, |tape, v| {
            let pooled = pool_hidden(v[0], Pooling::Max)?;
            pooled.mul(tape.constant(&w))?.sum_all()
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");

        let tape = Tape::new();
        let leaf = tape.leaf(&h.clone().with_requires_grad(true));
        let loss = pool_hidden(leaf, Pooling::Max).unwrap().sum_all().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(leaf).unwrap();
        for t in 0..3 {
            for j in 0..5 {
                let col: Vec<f64> = (0..4).map(|i| h.at(&[t, i, j]).unwrap()).collect();
                let arg = (0..4).fold(0, |b, i| if col[i] > col[b] { i } else { b });
                for i in 0..4 {
                    let expected = if i == arg { 1.0 } else { 0.0 };
                    assert_eq!(g[h.offset(&[t, i, j]).unwrap()], expected);
                }
            }
        }
    }
}

#[test]
fn single_slot_reads_that_slot() {
    let mut store = ParamStore::new(9);
    let cfg = CityCondConfig {
        variant: Variant::Citymem,
        slots: 1,
        d_m: 4,
        ..Default::default()
    };
    let layer = CityCondLayer::new(&mut store, &cfg, 2, 6).unwrap();
    let tape = Tape::new();
    let h = tape.constant(&random(&mut ChaCha8Rng::seed_from_u64(2), &[6]));
    let bank = tape.param(&store, layer.memory_bank().unwrap().memory);
    let e = layer.city_embedding(&tape, &store, 1).unwrap();
    let (m, alpha) =
        memory_read(&tape, &store, e, h, bank, layer.query_network().unwrap()).unwrap();
    assert_eq!(alpha.data(), vec![1.0]);
    assert_eq!(m.data(), bank.data());
}

#[test]
fn equal_logits_give_uniform_attention_and_mean_readout() {
    let (mut store, layer) = layer(Variant::Citymem, 2, 8, 4);
    for name in ["citycond.query.out.w", "citycond.query.out.b"] {
        let id = store.find(name).unwrap();
        store.tensor_mut(id).data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let h = tape.constant(&random(&mut ChaCha8Rng::seed_from_u64(3), &[8]));
    let bank = tape.param(&store, layer.memory_bank().unwrap().memory);
    let e = layer.city_embedding(&tape, &store, 0).unwrap();
    let (m, alpha) =
        memory_read(&tape, &store, e, h, bank, layer.query_network().unwrap()).unwrap();
    for a in alpha.data() {
        assert!((a - 1.0 / 8.0).abs() < 1e-15);
    }
    let slots = bank.value();
    for (j, mj) in m.data().iter().enumerate() {
        let mean: f64 = (0..8).map(|k| slots.at(&[k, j]).unwrap()).sum::<f64>() / 8.0;
        assert!((mj - mean).abs() < 1e-12);
    }
}

#[test]
fn memory_read_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..50 {
        let mut store = ParamStore::new(1000 + trial);
        let d_h = 1 + trial as usize % 5;
        let cfg = CityCondConfig {
            variant: Variant::Citymem,
            d_c: 3,
            slots: 3,
            d_m: 2,
            ..Default::default()
        };
        let layer = CityCondLayer::new(&mut store, &cfg, 2, d_h).unwrap();
        let city = trial as usize % 2;
        let h = random(&mut rng, &[d_h]);
        let tape = Tape::new();
        let bank = tape.param(&store, layer.memory_bank().unwrap().memory);
        let e = layer.city_embedding(&tape, &store, city).unwrap();
        let (m, alpha) = memory_read(
            &tape,
            &store,
            e,
            tape.constant(&h),
            bank,
            layer.query_network().unwrap(),
        )
        .unwrap();
        let e_c = &param(&store, "citycond.city_embedding").data()[city * 3..city * 3 + 3];
        let (m_ref, a_ref) = oracle_read(&store, e_c, h.data(), param(&store, "citycond.memory"));
        for (x, y) in m.data().iter().zip(&m_ref) {
            assert!((x - y).abs() < 1e-12, "trial {trial}: {x} vs {y}");
        }
        for (x, y) in alpha.data().iter().zip(&a_ref) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_readout_leaves_hidden_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::new();
    let h = tape.constant(&random(&mut rng, &[3, 4, 5]));
    let m = tape.zeros(&[3, 2]).unwrap();
    let w_g = tape.constant(&random(&mut rng, &[7, 5]));
    let w_m = tape.constant(&random(&mut rng, &[2, 5]));
    assert_eq!(gated_fuse(&tape, h, m, w_g, w_m).unwrap().data(), h.data());
}

#[test]
fn half_gate_arithmetic() {
    let tape = Tape::new();
    let h = tape.zeros(&[1, 1]).unwrap();
    let m = tape.constant(&Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let w_g = tape.zeros(&[2, 1]).unwrap();
    let w_m = tape.constant(&Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    assert_eq!(gated_fuse(&tape, h, m, w_g, w_m).unwrap().data(), vec![1.0]);
}

#[test]
fn gated_fuse_matches_per_element_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for trial in 0..50 {
        let (t_len, n, d_h, d_m) = (1 + trial % 3, 1 + trial % 4, 1 + trial % 5, 1 + trial % 3);
        let h = random(&mut rng, &[t_len, n, d_h]);
        let m = random(&mut rng, &[t_len, d_m]);
        let w_g = random(&mut rng, &[d_h + d_m, d_h]);
        let w_m = random(&mut rng, &[d_m, d_h]);
        let tape = Tape::new();
        let out = gated_fuse(
            &tape,
            tape.constant(&h),
            tape.constant(&m),
            tape.constant(&w_g),
            tape.constant(&w_m),
        )
        .unwrap()
        .value();
        assert_eq!(out.shape(), h.shape());
        for t in 0..t_len {
            for i in 0..n {
                for j in 0..d_h {
                    let mut pre = 0.0;
                    for p in 0..d_h {
                        pre += h.at(&[t, i, p]).unwrap() * w_g.at(&[p, j]).unwrap();
                    }
                    for p in 0..d_m {
                        pre += m.at(&[t, p]).unwrap() * w_g.at(&[d_h + p, j]).unwrap();
                    }
                    let g = 1.0 / (1.0 + (-pre).exp());
                    let mut r = 0.0;
                    for p in 0..d_m {
                        r += m.at(&[t, p]).unwrap() * w_m.at(&[p, j]).unwrap();
                    }
                    let expected = h.at(&[t, i, j]).unwrap() + g * r;
                    let got = out.at(&[t, i, j]).unwrap();
                    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
                }
            }
        }
    }
}

#[test]
fn base_forward_is_bit_identical() {
    let (store, layer) = layer(Variant::Base, 2, 6, 1);
    let tape = Tape::new();
    let h = tape.constant(&random(&mut ChaCha8Rng::seed_from_u64(4), &[5, 3, 6]));
    let out = layer.condition(&tape, &store, h, 1).unwrap();
    assert!(out.attention.is_none());
    assert_eq!(out.hidden.data(), h.data());
}

#[test]
fn cold_start_citymem_is_identity() {
    for pooling in [Pooling::Mean, Pooling::Max] {
        let mut store = ParamStore::new(21);
        let cfg = CityCondConfig {
            variant: Variant::Citymem,
            pooling,
            ..Default::default()
        };
        let layer = CityCondLayer::new(&mut store, &cfg, 2, 12).unwrap();
        let tape = Tape::new();
        let h = tape.constant(&random(&mut ChaCha8Rng::seed_from_u64(5), &[4, 7, 12]));
        let out = layer.condition(&tape, &store, h, 0).unwrap();
        assert_eq!(out.hidden.data(), h.data());
        assert_eq!(out.attention.unwrap().shape(), vec![4, 8]);
    }
}

#[test]
fn parameter_count_is_exact() {
    let (store, layer) = layer(Variant::Citymem, 2, 64, 1);
    let phi_q = (16 + 64) * 32 + 32 + 32 * 32 + 32;
    let expected = 2 * 16 + 8 * 32 + phi_q + (64 + 32) * 64 + 32 * 64;
    assert_eq!(2 * 16 + 8 * 32, 288);
    assert_eq!(layer.param_count(), expected);
    assert_eq!(store.count(), expected);
    assert_eq!(store.count_prefix("citycond."), expected);
    assert_eq!(expected, 12_128);

    let (store, layer) = layer_cityid();
    assert_eq!(layer.param_count(), 32);
    assert_eq!(store.count(), 32);
}

fn layer_cityid() -> (ParamStore, CityCondLayer) {
    layer(Variant::Cityid, 2, 64, 1)
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for seed in 0..10 {
        let (store, layer) = layer(Variant::Citymem, 3, 5, seed);
        let tape = Tape::new();
        let h = tape.constant(&random(&mut rng, &[6, 4, 5]).reshape(&[6, 4, 5]).unwrap());
        let alpha = layer
            .condition(&tape, &store, h.scale(10.0), (seed % 3) as usize)
            .unwrap()
            .attention
            .unwrap();
        for row in alpha.data().chunks(8) {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn global_memory_attention_ignores_city() {
    let mut store = ParamStore::new(77);
    let cfg = CityCondConfig {
        variant: Variant::Citymem,
        use_city_embedding_in_query: false,
        ..Default::default()
    };
    let layer = CityCondLayer::new(&mut store, &cfg, 2, 6).unwrap();
    // make the embeddings clearly distinct
    let id = store.find("citycond.city_embedding").unwrap();
    store.tensor_mut(id).data_mut()[..16].fill(3.0);
    let h = random(&mut ChaCha8Rng::seed_from_u64(6), &[3, 4, 6]);
    let alpha = |city| {
        let tape = Tape::new();
        layer
            .condition(&tape, &store, tape.constant(&h), city)
            .unwrap()
            .attention
            .unwrap()
            .data()
    };
    assert_eq!(alpha(0), alpha(1));
}

/// One SGD step on a loss that pushes the two cities' outputs apart, then
/// check that attention depends on the city.
#[test]
fn city_swap_changes_attention_after_training() {
    let mut store = ParamStore::new(5);
    let layer = CityCondLayer::new(
        &mut store,
        &CityCondConfig::with_variant(Variant::Citymem),
        2,
        6,
    )
    .unwrap();
    let h = random(&mut ChaCha8Rng::seed_from_u64(7), &[3, 4, 6]);
    for city in 0..2 {
        let tape = Tape::new();
        let out = layer
            .condition(&tape, &store, tape.constant(&h), city)
            .unwrap();
        let sign = if city == 0 { 1.0 } else { -1.0 };
        let loss = out.hidden.sum_all().unwrap().scale(sign);
        tape.backward_into(loss, &mut store).unwrap();
    }
    for id in store.ids().collect::<Vec<_>>() {
        let g = store.tensor(id).grad().map(<[f64]>::to_vec);
        if let Some(g) = g {
            for (v, gi) in store.tensor_mut(id).data_mut().iter_mut().zip(g) {
                *v -= 0.5 * gi;
            }
        }
    }
    let alpha = |city| {
        let tape = Tape::new();
        layer
            .condition(&tape, &store, tape.constant(&h), city)
            .unwrap()
            .attention
            .unwrap()
            .data()
    };
    let (a0, a1) = (alpha(0), alpha(1));
    let diff = a0
        .iter()
        .zip(&a1)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-9, "attention unchanged under city swap ({diff})");
}

fn grad_norm(store: &ParamStore, name: &str) -> f64 {
    param(store, name)
        .grad()
        .map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// With `W_m = 0` only `W_m` itself sees a gradient on the first backward
/// pass; once it has moved, the gate, memory and query receive gradients.
#[test]
fn gradients_reach_every_memory_parameter() {
    let mut store = ParamStore::new(11);
    let layer = CityCondLayer::new(
        &mut store,
        &CityCondConfig::with_variant(Variant::Citymem),
        2,
        6,
    )
    .unwrap();
    let h = random(&mut ChaCha8Rng::seed_from_u64(8), &[3, 4, 6]);
    let w = random(&mut ChaCha8Rng::seed_from_u64(9), &[3, 4, 6]);
    let run = |store: &mut ParamStore| {
        store.zero_grad();
        let tape = Tape::new();
        let out = layer.condition(&tape, store, tape.constant(&h), 1).unwrap();
        let loss = out
            .hidden
            .mul(tape.constant(&w))
            .unwrap()
            .sum_all()
            .unwrap();
        tape.backward_into(loss, store).unwrap();
    };
    run(&mut store);
    assert!(grad_norm(&store, "citycond.gate.w_m") > 0.0);
    let w_m = store.find("citycond.gate.w_m").unwrap();
    let g = store.tensor(w_m).grad().unwrap().to_vec();
    for (v, gi) in store.tensor_mut(w_m).data_mut().iter_mut().zip(g) {
        *v -= 0.1 * gi;
    }
    run(&mut store);
    for name in [
        "citycond.gate.w_m",
        "citycond.gate.w_g",
        "citycond.memory",
        "citycond.query.hidden.w",
        "citycond.query.out.w",
        "citycond.city_embedding",
    ] {
        assert!(grad_norm(&store, name) > 0.0, "{name} has no gradient");
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut store = ParamStore::new(12);
    let layer = CityCondLayer::new(
        &mut store,
        &CityCondConfig::with_variant(Variant::Citymem),
        2,
        5,
    )
    .unwrap();
    let w_m = store.find("citycond.gate.w_m").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let vals = random(&mut rng, &[32, 5]);
    store
        .tensor_mut(w_m)
        .data_mut()
        .copy_from_slice(vals.data());
    let h = random(&mut rng, &[3, 4, 5]);
    let w = random(&mut rng, &[3, 4, 5]);
    let entries: Vec<_> = store
        .ids()
        .flat_map(|id| {
            let n = store.tensor(id).numel();
            [(id, 0), (id, n / 2), (id, n - 1)]
        })
        .collect();
    let err = gradcheck::check_params(
        &mut store,
        &entries,
        gradcheck::DEFAULT_STEP,
        |tape, store| {
            let out = layer.condition(tape, store, tape.constant(&h), 1)?;
            out.hidden.tanh().mul(tape.constant(&w))?.sum_all()
        },
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

proptest! {
    #[test]
    fn gate_stays_inside_unit_interval(vals in proptest::collection::vec(-5.0f64..5.0, 12)) {
        let tape = Tape::new();
        let h = tape.constant(&Tensor::new(vec![2, 2, 3], vals).unwrap());
        let m = tape.constant(&Tensor::full(&[2, 1], 1.0).unwrap());
        let w_g = tape.constant(&Tensor::full(&[4, 3], 0.5).unwrap());
        let w_m = tape.constant(&Tensor::full(&[1, 3], 1.0).unwrap());
        // with m W_m = 1 the output minus h is the gate itself
        let out = gated_fuse(&tape, h, m, w_g, w_m).unwrap().data();
        for (o, x) in out.iter().zip(h.data()) {
            let g = o - x;
            prop_assert!(g > 0.0 && g < 1.0);
        }
    }
}

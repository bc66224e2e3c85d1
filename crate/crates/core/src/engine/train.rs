//! Data preparation, the training loop, evaluation and transfer.

use std::time::Instant;

use rand::seq::{index, SliceRandom};

use super::adam::{clip_grad_norm, AdamState};
use super::config::{DataConfig, DataSource, ExperimentConfig, Regime};
use super::metrics::{DisplacementSums, ErrorSums, Metrics};
use super::{AttentionRecord, CurvePoint, EpochLog, ParamCounts, RunResult, RunStatus, Transfer};
use crate::autodiff::{Tape, Var};
use crate::backbones::{Model, TaskShape};
use crate::citycond::PREFIX;
use crate::data::{
    build_windows, generate_synthetic, generate_synthetic_trajectories, subsample_lowdata,
    zscore_fit_transform, CitySeries, DatasetKind, MultiCityDataset, Split, Window, WindowIndex,
};
use crate::error::{Error, Result};
use crate::params::stream;
use crate::tensor::Tensor;

/// Validation losses above this mark a run as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Builds the dataset a config refers to.
pub fn load_dataset(cfg: &DataConfig) -> Result<MultiCityDataset> {
    match cfg.source {
        DataSource::Synthetic => {
            let (cities, truth) = generate_synthetic(&cfg.synthetic)?;
            let mut ds = MultiCityDataset::new(DatasetKind::Traffic, cities)?;
            ds.ground_truth = Some(truth);
            Ok(ds)
        }
        DataSource::Trajectories => MultiCityDataset::new(
            DatasetKind::Trajectory,
            generate_synthetic_trajectories(&cfg.trajectories)?,
        ),
        DataSource::Dir => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::config("data.path is not set"))?;
            MultiCityDataset::load(path)
        }
    }
}

/// One training or evaluation example: a window of one city, and for
/// trajectories one agent inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub city: usize,
    pub start: usize,
    pub agent: usize,
}

/// A dataset normalised and indexed for one config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub kind: DatasetKind,
    /// Z-scored traffic series, or raw positions for trajectories.
    pub cities: Vec<CitySeries>,
    pub index: WindowIndex,
    pub task: TaskShape,
}

impl Prepared {
    pub fn new(ds: &MultiCityDataset, cfg: &DataConfig) -> Result<Self> {
        let (h, f) = (cfg.history, cfg.horizon);
        for c in &ds.cities {
            for (split, range) in Split::ALL.into_iter().zip(cfg.splits.ranges(c.len())) {
                if range.len() < h + f && !(split != Split::Train && range.is_empty()) {
                    return Err(Error::data(format!(
                        "city {}: {split:?} split has {} steps, fewer than L_h + L_f = {}",
                        c.name,
                        range.len(),
                        h + f
                    )));
                }
            }
        }
        let index = build_windows(&ds.lengths(), h, f, cfg.splits)?;
        let (cities, task) = match ds.kind {
            DatasetKind::Traffic => {
                // each city is scaled by the statistics of its own training rows
                let cities = ds
                    .cities
                    .iter()
                    .map(|c| zscore_fit_transform(c, cfg.splits.range(c.len(), Split::Train)))
                    .collect::<Result<Vec<_>>>()?;
                let nodes = cities.iter().map(CitySeries::nodes).collect();
                (cities, TaskShape::traffic(h, f, ds.features(), nodes))
            }
            DatasetKind::Trajectory => {
                let scale = position_scale(&ds.cities, cfg)?;
                (
                    ds.cities.clone(),
                    TaskShape::trajectory(h, f, ds.cities.len(), scale),
                )
            }
        };
        Ok(Prepared {
            kind: ds.kind,
            cities,
            index,
            task,
        })
    }

    pub fn is_trajectory(&self) -> bool {
        self.kind == DatasetKind::Trajectory
    }

    /// Expands windows into samples (one per agent for trajectories).
    pub fn samples<'a>(&self, windows: impl IntoIterator<Item = &'a Window>) -> Vec<Sample> {
        windows
            .into_iter()
            .flat_map(|w| {
                let agents = if self.is_trajectory() {
                    self.cities[w.city].nodes()
                } else {
                    1
                };
                (0..agents).map(move |agent| Sample {
                    city: w.city,
                    start: w.start,
                    agent,
                })
            })
            .collect()
    }

    pub fn split_samples(&self, split: Split, cities: &[usize]) -> Vec<Sample> {
        self.samples(self.index.iter(split).filter(|w| cities.contains(&w.city)))
    }

    /// `(input, target)` for a sample.
    pub fn tensors(&self, s: Sample) -> Result<(Tensor, Tensor)> {
        let city = &self.cities[s.city];
        let (x, y) = city.window(s.start, self.task.history, self.task.horizon)?;
        if !self.is_trajectory() {
            return Ok((x, y));
        }
        let pick = |t: &Tensor| -> Result<Tensor> {
            let a = city.nodes();
            let rows = t.shape()[0];
            let data = (0..rows)
                .flat_map(|r| t.data()[(r * a + s.agent) * 2..(r * a + s.agent) * 2 + 2].to_vec())
                .collect();
            Tensor::new(vec![rows, 2], data)
        };
        Ok((pick(&x)?, pick(&y)?))
    }

    pub fn all_cities(&self) -> Vec<usize> {
        (0..self.cities.len()).collect()
    }
}

/// Mean per-step displacement over the training rows of every city.
fn position_scale(cities: &[CitySeries], cfg: &DataConfig) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for c in cities {
        let range = cfg.splits.range(c.len(), Split::Train);
        let a = c.nodes();
        let v = c.values.data();
        for t in range.start + 1..range.end {
            for i in 0..a {
                let (p, q) = ((t * a + i) * 2, ((t - 1) * a + i) * 2);
                total += (v[p] - v[q]).hypot(v[p + 1] - v[q + 1]);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::data(
            "trajectory training split is too short to estimate a position scale",
        ));
    }
    Ok((total / n as f64).max(1e-6))
}

/// Fresh model for a config, with every city's graph attached.
pub fn build_model(cfg: &ExperimentConfig, data: &Prepared) -> Result<Model> {
    let mut model = Model::new(&cfg.backbone, &cfg.citycond, &data.task, cfg.seed)?;
    if cfg.backbone.kind.needs_adjacency() {
        for (i, c) in data.cities.iter().enumerate() {
            let adj = c.adjacency.clone().ok_or_else(|| {
                Error::data(format!(
                    "{} needs an adjacency for city {}",
                    cfg.backbone.kind, c.name
                ))
            })?;
            model.set_graph(i, adj)?;
        }
    }
    Ok(model)
}

/// Mean training loss over a batch: MSE in z-scored units for traffic, in
/// position-scale units for trajectories.
pub fn batch_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    data: &Prepared,
    batch: &[Sample],
) -> Result<Var<'t>> {
    let scale = if data.is_trajectory() {
        1.0 / data.task.position_scale
    } else {
        1.0
    };
    let mut total: Option<Var<'t>> = None;
    for &s in batch {
        let (x, y) = data.tensors(s)?;
        let out = model.forward(tape, &x, s.city)?;
        let target = tape.constant(&y);
        let loss = out.prediction.scale(scale).mse(target.scale(scale))?;
        total = Some(match total {
            Some(t) => t.add(loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::contract("empty batch"))?;
    Ok(total.scale(1.0 / batch.len() as f64))
}

/// One optimiser step on `batch`; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    data: &Prepared,
    batch: &[Sample],
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let tape = Tape::new();
    let loss = batch_loss(model, &tape, data, batch)?;
    let value = loss.item()?;
    model.store.clear_grads();
    tape.backward_into(loss, &mut model.store)?;
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut model.store, c);
    }
    adam.step(&mut model.store, lr)?;
    Ok(value)
}

/// City-homogeneous batches for one epoch: each city's samples are shuffled
/// and chunked, then the cities take turns.
pub fn epoch_batches(
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    label: &str,
) -> Vec<Vec<Sample>> {
    let mut cities: Vec<usize> = samples.iter().map(|s| s.city).collect();
    cities.sort_unstable();
    cities.dedup();
    let per_city: Vec<Vec<Vec<Sample>>> = cities
        .iter()
        .map(|&c| {
            let mut own: Vec<Sample> = samples.iter().filter(|s| s.city == c).copied().collect();
            own.shuffle(&mut stream(seed, &format!("{label}/city/{c}")));
            own.chunks(batch_size).map(<[Sample]>::to_vec).collect()
        })
        .collect();
    let rounds = per_city.iter().map(Vec::len).max().unwrap_or(0);
    (0..rounds)
        .flat_map(|r| per_city.iter().filter_map(move |b| b.get(r).cloned()))
        .collect()
}

/// At most `cap` samples per city, taken at an even stride.
pub fn cap_per_city(samples: Vec<Sample>, cap: Option<usize>) -> Vec<Sample> {
    let Some(cap) = cap else { return samples };
    let mut cities: Vec<usize> = samples.iter().map(|s| s.city).collect();
    cities.dedup();
    cities
        .into_iter()
        .flat_map(|c| {
            let own: Vec<Sample> = samples.iter().filter(|s| s.city == c).copied().collect();
            let n = own.len();
            if n <= cap {
                own
            } else {
                (0..cap).map(|k| own[k * n / cap]).collect()
            }
        })
        .collect()
}

/// Metrics over `samples`, plus the loss the optimiser sees and (when asked)
/// slot attention per history step.
pub struct Evaluation {
    pub metrics: Metrics,
    pub loss: f64,
    pub attention: Vec<AttentionRecord>,
}

pub fn evaluate(
    model: &Model,
    data: &Prepared,
    samples: &[Sample],
    log_attention: bool,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation split has no windows"));
    }
    let mut raw = ErrorSums::default();
    let mut norm = ErrorSums::default();
    let mut disp = DisplacementSums::default();
    let mut attention = Vec::new();
    for &s in samples {
        let tape = Tape::new();
        let (x, y) = data.tensors(s)?;
        let out = model.forward(&tape, &x, s.city)?;
        let pred = out.prediction.value();
        if data.is_trajectory() {
            let k = 1.0 / data.task.position_scale;
            let scaled = |t: &Tensor| t.data().iter().map(|v| v * k).collect::<Vec<_>>();
            norm.add(&scaled(&pred), &scaled(&y));
            disp.add(pred.data(), y.data())?;
        } else {
            norm.add(pred.data(), y.data());
            let stats = data.cities[s.city]
                .stats
                .as_ref()
                .ok_or_else(|| Error::contract("series is not normalised"))?;
            raw.add(
                stats.denormalize(&pred)?.data(),
                stats.denormalize(&y)?.data(),
            );
        }
        if log_attention {
            if let Some(a) = out.attention {
                let k = a.shape()[1];
                for (t, row) in a.data().chunks(k).enumerate() {
                    attention.push(AttentionRecord {
                        city: data.cities[s.city].name.clone(),
                        start: s.start,
                        step: s.start + t,
                        alpha: row.to_vec(),
                    });
                }
            }
        }
    }
    let (loss, norm_mae) = norm.mse_mae()?;
    let metrics = if data.is_trajectory() {
        let (ade, fde) = disp.ade_fde()?;
        Metrics {
            ade: Some(ade),
            fde: Some(fde),
            windows: samples.len(),
            ..Metrics::default()
        }
    } else {
        let (mse, mae) = raw.mse_mae()?;
        Metrics {
            mse: Some(mse),
            mae: Some(mae),
            mse_normalized: Some(loss),
            mae_normalized: Some(norm_mae),
            windows: samples.len(),
            ..Metrics::default()
        }
    };
    Ok(Evaluation {
        metrics,
        loss,
        attention,
    })
}

/// Outcome of the epoch loop.
pub struct Fitted {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub diverged: bool,
}

/// Trains with early stopping on validation loss and restores the best
/// parameters.
pub fn fit(
    model: &mut Model,
    data: &Prepared,
    cfg: &ExperimentConfig,
    train: &[Sample],
    val: &[Sample],
) -> Result<Fitted> {
    if train.is_empty() {
        return Err(Error::data("no training windows"));
    }
    let t = &cfg.train;
    let mut adam = AdamState::new(&model.store);
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store.values());
    let mut wait = 0usize;
    let mut diverged = false;
    for epoch in 1..=t.max_epochs {
        let mut batches = epoch_batches(
            train,
            t.batch_size,
            cfg.seed,
            &format!("batches/epoch/{epoch}"),
        );
        if let Some(cap) = t.steps_per_epoch {
            batches.truncate(cap);
        }
        let mut sum = 0.0;
        for b in &batches {
            sum += train_step(model, &mut adam, data, b, t.lr, t.grad_clip)?;
        }
        let train_loss = sum / batches.len() as f64;
        let val_loss = evaluate(model, data, val, false)?.loss;
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() || val_loss > DIVERGENCE_LIMIT || !train_loss.is_finite() {
            diverged = true;
            break;
        }
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.values());
            wait = 0;
        } else {
            wait += 1;
        }
        if wait >= t.patience {
            break;
        }
    }
    if best.1 > 0 {
        model.store.set_values(&best.2);
    }
    Ok(Fitted {
        epochs,
        best_epoch: best.1,
        diverged,
    })
}

/// Overwrites the embedding row of `city` with the mean of the rows of
/// `seen`, so an untrained city starts from the average of known ones.
pub fn init_city_from_mean(model: &mut Model, city: usize, seen: &[usize]) -> Result<()> {
    let Some(id) = model.store.find(&format!("{PREFIX}city_embedding")) else {
        return Ok(());
    };
    if seen.is_empty() {
        return Err(Error::contract("no trained cities to initialise from"));
    }
    let table = model.store.tensor_mut(id);
    let d = table.shape()[1];
    let data = table.data_mut();
    let mean: Vec<f64> = (0..d)
        .map(|j| seen.iter().map(|&c| data[c * d + j]).sum::<f64>() / seen.len() as f64)
        .collect();
    data[city * d..(city + 1) * d].copy_from_slice(&mean);
    Ok(())
}

/// A finished run together with its trained model.
pub struct Trained {
    pub result: RunResult,
    pub model: Model,
}

/// Runs one config on a prepared dataset.
pub fn train(cfg: &ExperimentConfig, data: &Prepared) -> Result<Trained> {
    cfg.validate()?;
    let clock = Instant::now();
    let mut model = build_model(cfg, data)?;
    let mut result = RunResult::new(cfg);
    result.params = Some(ParamCounts {
        total: model.param_count(),
        citycond: model.citycond_param_count(),
        widening: model.widening_param_count(),
    });
    let all = data.all_cities();
    match &cfg.regime {
        Regime::Full | Regime::Lowdata { .. } => {
            let index = match cfg.regime {
                Regime::Lowdata { frac } => subsample_lowdata(&data.index, frac, cfg.seed)?,
                _ => data.index.clone(),
            };
            let train_s = data.samples(index.iter(Split::Train));
            let val_s = cap_per_city(
                data.split_samples(Split::Val, &all),
                cfg.train.max_eval_windows,
            );
            let fitted = fit(&mut model, data, cfg, &train_s, &val_s)?;
            result.record_fit(&fitted);
            result.val = Some(evaluate(&model, data, &val_s, false)?.metrics);
            let test_s = cap_per_city(
                data.split_samples(Split::Test, &all),
                cfg.train.max_eval_windows,
            );
            let test = evaluate(&model, data, &test_s, cfg.log_attention)?;
            result.test = Some(test.metrics);
            result.attention = test.attention;
        }
        Regime::Crosscity {
            source,
            target,
            adapt_steps,
            shot_count,
            eval_every,
            freeze_backbone,
        } => {
            let names: Vec<&str> = data.cities.iter().map(|c| c.name.as_str()).collect();
            let find = |n: &str| {
                names
                    .iter()
                    .position(|c| *c == n)
                    .ok_or_else(|| Error::config(format!("unknown city {n:?} (have {names:?})")))
            };
            let (src, tgt) = (find(source)?, find(target)?);
            let train_s = data.split_samples(Split::Train, &[src]);
            let val_s = cap_per_city(
                data.split_samples(Split::Val, &[src]),
                cfg.train.max_eval_windows,
            );
            let fitted = fit(&mut model, data, cfg, &train_s, &val_s)?;
            result.record_fit(&fitted);
            result.val = Some(evaluate(&model, data, &val_s, false)?.metrics);

            if cfg.variant().uses_city_embedding() {
                init_city_from_mean(&mut model, tgt, &[src])?;
            }
            let test_s = cap_per_city(
                data.split_samples(Split::Test, &[tgt]),
                cfg.train.max_eval_windows,
            );
            let pre = evaluate(&model, data, &test_s, false)?.metrics;

            let windows = data.index.for_city(tgt, Split::Train);
            let k = (*shot_count).min(windows.len());
            let mut picked: Vec<usize> =
                index::sample(&mut stream(cfg.seed, "shots"), windows.len(), k).into_vec();
            picked.sort_unstable();
            let shots = data.samples(picked.iter().map(|&i| &windows[i]));
            if *freeze_backbone {
                let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
                for n in names.iter().filter(|n| !n.starts_with(PREFIX)) {
                    model.store.set_trainable(n, false);
                }
            }
            let mut adam = AdamState::new(&model.store);
            let mut curve = vec![CurvePoint {
                step: 0,
                metrics: pre.clone(),
            }];
            let mut queue: Vec<Sample> = Vec::new();
            let mut pass = 0;
            let mut post = None;
            for step in 1..=*adapt_steps {
                let mut batch = Vec::with_capacity(cfg.train.batch_size);
                while batch.len() < cfg.train.batch_size.min(shots.len()) {
                    if queue.is_empty() {
                        queue = shots.clone();
                        queue.shuffle(&mut stream(cfg.seed, &format!("adapt/pass/{pass}")));
                        queue.reverse();
                        pass += 1;
                    }
                    batch.push(queue.pop().expect("refilled"));
                }
                let loss = train_step(
                    &mut model,
                    &mut adam,
                    data,
                    &batch,
                    cfg.train.lr,
                    cfg.train.grad_clip,
                )?;
                if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                    result.status = RunStatus::Diverged;
                    break;
                }
                if step % eval_every == 0 || step == *adapt_steps {
                    let m = evaluate(&model, data, &test_s, false)?.metrics;
                    if step % eval_every == 0 {
                        curve.push(CurvePoint {
                            step,
                            metrics: m.clone(),
                        });
                    }
                    if step == *adapt_steps {
                        post = Some(m);
                    }
                }
            }
            let post = match post {
                Some(m) => m,
                None => evaluate(&model, data, &test_s, false)?.metrics,
            };
            let attention = if cfg.log_attention {
                evaluate(&model, data, &test_s, true)?.attention
            } else {
                Vec::new()
            };
            result.test = Some(post.clone());
            result.attention = attention;
            result.transfer = Some(Transfer {
                train_city: source.clone(),
                test_city: target.clone(),
                pre,
                post,
                curve,
            });
        }
    }
    result.finish(clock.elapsed().as_secs_f64());
    Ok(Trained { result, model })
}

//! Multi-city datasets: series, normalisation, windows and generators.

mod csv_io;
mod dataset;
pub mod synthetic;
pub mod trajectories;

use std::ops::Range;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, read_adjacency_csv, write_adjacency_csv, write_csv, CsvSchema};
pub use dataset::{DatasetKind, MultiCityDataset};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};
pub use trajectories::{generate_synthetic_trajectories, TrajectorySpec};

use crate::backbones::Adjacency;
use crate::error::{Error, Result};
use crate::params::stream;
use crate::tensor::Tensor;

/// Lower bound applied to per-node standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-(node, feature) z-score statistics, laid out as `[N * d_x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    fn apply(&self, values: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let width = self.mean.len();
        let s = values.shape();
        if s.len() < 2 || s[s.len() - 2] * s[s.len() - 1] != width {
            return Err(Error::shape(format!(
                "stats over {width} columns applied to {:?}",
                values.shape()
            )));
        }
        let data = values
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(v, self.mean[k % width], self.std[k % width]))
            .collect();
        Tensor::new(values.shape().to_vec(), data)
    }

    /// `(x - mean) / std` for `[..., N, d_x]` values.
    pub fn normalize(&self, values: &Tensor) -> Result<Tensor> {
        self.apply(values, |v, m, s| (v - m) / s)
    }

    /// `x * std + mean` for `[..., N, d_x]` values.
    pub fn denormalize(&self, values: &Tensor) -> Result<Tensor> {
        self.apply(values, |v, m, s| v * s + m)
    }
}

/// One city's series.
#[derive(Clone, Debug, PartialEq)]
pub struct CitySeries {
    pub id: usize,
    pub name: String,
    pub node_ids: Vec<String>,
    pub timestamps: Vec<String>,
    /// `[T, N, d_x]`.
    pub values: Tensor,
    pub adjacency: Option<Adjacency>,
    /// Present once the series has been z-scored.
    pub stats: Option<NormStats>,
}

impl CitySeries {
    pub fn new(id: usize, name: &str, values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(format!(
                "series values must be [T, N, d_x], got {:?}",
                values.shape()
            )));
        }
        let (t, n) = (values.shape()[0], values.shape()[1]);
        Ok(CitySeries {
            id,
            name: name.to_string(),
            node_ids: (0..n).map(|i| format!("n{i}")).collect(),
            timestamps: (0..t).map(|i| i.to_string()).collect(),
            values,
            adjacency: None,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    /// Rows `[start, start + len)` as a `[len, N, d_x]` tensor.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Index(format!(
                "rows [{start}, {}) of a series of length {}",
                start + len,
                self.len()
            )));
        }
        let row = self.nodes() * self.features();
        let data = self.values.data()[start * row..(start + len) * row].to_vec();
        Tensor::new(vec![len, self.nodes(), self.features()], data)
    }

    /// `(history, future)` for the window starting at `start`.
    pub fn window(&self, start: usize, history: usize, horizon: usize) -> Result<(Tensor, Tensor)> {
        Ok((
            self.slice(start, history)?,
            self.slice(start + history, horizon)?,
        ))
    }
}

/// Z-scores a series with statistics from `train` rows only.
///
/// Standard deviations are population (divide by n) and clamped to
/// [`STD_FLOOR`].
pub fn zscore_fit_transform(series: &CitySeries, train: Range<usize>) -> Result<CitySeries> {
    if train.is_empty() || train.end > series.len() {
        return Err(Error::contract(format!(
            "training range {train:?} is empty or exceeds series length {}",
            series.len()
        )));
    }
    let width = series.nodes() * series.features();
    let n = train.len() as f64;
    let rows = &series.values.data()[train.start * width..train.end * width];
    let mut mean = vec![0.0; width];
    for row in rows.chunks(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for row in rows.chunks(width) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    let stats = NormStats { mean, std };
    let mut out = series.clone();
    out.values = stats.normalize(&series.values)?;
    out.stats = Some(stats);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Chronological split fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.train <= 0.0
        {
            return Err(Error::config(format!(
                "split ratios {parts:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }

    /// Row ranges of each split for a series of length `len`.
    pub fn ranges(&self, len: usize) -> [Range<usize>; 3] {
        // the epsilon keeps 0.7 + 0.1 from flooring to one row short
        let cut = |f: f64| ((f * len as f64 + 1e-9).floor() as usize).min(len);
        let train_end = cut(self.train);
        let val_end = cut(self.train + self.val).max(train_end);
        [0..train_end, train_end..val_end, val_end..len]
    }

    pub fn range(&self, len: usize, split: Split) -> Range<usize> {
        self.ranges(len)[split as usize].clone()
    }
}

/// Number of stride-1 windows of `history + horizon` rows inside `len` rows.
pub fn window_count(len: usize, history: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(history + horizon)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub city: usize,
    pub start: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowIndex {
    pub history: usize,
    pub horizon: usize,
    pub windows: Vec<Window>,
}

impl WindowIndex {
    pub fn iter(&self, split: Split) -> impl Iterator<Item = &Window> {
        self.windows.iter().filter(move |w| w.split == split)
    }

    pub fn for_city(&self, city: usize, split: Split) -> Vec<Window> {
        self.iter(split)
            .filter(|w| w.city == city)
            .copied()
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.iter(split).count()
    }

    pub fn count_city(&self, city: usize, split: Split) -> usize {
        self.iter(split).filter(|w| w.city == city).count()
    }

    pub fn cities(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.windows.iter().map(|w| w.city).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Stride-1 windows per city and split; no window crosses a split boundary.
pub fn build_windows(
    lengths: &[usize],
    history: usize,
    horizon: usize,
    ratios: SplitRatios,
) -> Result<WindowIndex> {
    if history < 1 || horizon < 1 {
        return Err(Error::contract(format!(
            "L_h = {history} and L_f = {horizon} must both be >= 1"
        )));
    }
    ratios.validate()?;
    let mut windows = Vec::new();
    for (city, &len) in lengths.iter().enumerate() {
        for (split, range) in Split::ALL.into_iter().zip(ratios.ranges(len)) {
            let n = window_count(range.len(), history, horizon);
            windows.extend((0..n).map(|k| Window {
                city,
                start: range.start + k,
                split,
            }));
        }
    }
    Ok(WindowIndex {
        history,
        horizon,
        windows,
    })
}

/// Keeps `ceil(frac * n_c)` training windows of each city, sampled without
/// replacement from the stream `(seed, "lowdata/<city>")`; validation and test
/// windows are untouched. Kept windows stay in their original order.
pub fn subsample_lowdata(index: &WindowIndex, frac: f64, seed: u64) -> Result<WindowIndex> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::contract(format!("fraction {frac} outside (0, 1]")));
    }
    let mut keep = vec![true; index.windows.len()];
    for city in index.cities() {
        let positions: Vec<usize> = index
            .windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.city == city && w.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        let n = positions.len();
        let k = ((frac * n as f64).ceil() as usize).min(n);
        let mut rng = stream(seed, &format!("lowdata/{city}"));
        let chosen = index::sample(&mut rng, n, k);
        let mut selected = vec![false; n];
        for i in chosen {
            selected[i] = true;
        }
        for (&pos, sel) in positions.iter().zip(selected) {
            keep[pos] = sel;
        }
    }
    let windows = index
        .windows
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(w, _)| *w)
        .collect();
    Ok(WindowIndex {
        history: index.history,
        horizon: index.horizon,
        windows,
    })
}

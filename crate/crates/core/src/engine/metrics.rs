//! Forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test or validation metrics. Traffic runs fill the MSE/MAE fields,
/// trajectory runs fill ADE/FDE.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    /// MSE in z-scored units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse_normalized: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_normalized: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ade: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fde: Option<f64>,
    /// Number of forecast windows (per agent for trajectories) evaluated.
    pub windows: usize,
}

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 6] = [
    "mse",
    "mae",
    "mse_normalized",
    "mae_normalized",
    "ade",
    "fde",
];

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "mse" => self.mse,
            "mae" => self.mae,
            "mse_normalized" => self.mse_normalized,
            "mae_normalized" => self.mae_normalized,
            "ade" => self.ade,
            "fde" => self.fde,
            _ => None,
        }
    }

    /// The metric used for headline comparisons: MSE, else ADE.
    pub fn primary(&self) -> Option<f64> {
        self.mse.or(self.ade)
    }

    pub fn is_finite(&self) -> bool {
        METRIC_NAMES
            .iter()
            .filter_map(|m| self.get(m))
            .all(f64::is_finite)
    }
}

/// Running sums for MSE and MAE.
#[derive(Clone, Copy, Debug, Default)]
pub struct ErrorSums {
    pub squared: f64,
    pub absolute: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, prediction: &[f64], target: &[f64]) {
        for (p, t) in prediction.iter().zip(target) {
            let d = p - t;
            self.squared += d * d;
            self.absolute += d.abs();
        }
        self.count += prediction.len().min(target.len());
    }

    pub fn mse_mae(&self) -> Result<(f64, f64)> {
        if self.count == 0 {
            return Err(Error::contract("no values to average"));
        }
        let n = self.count as f64;
        Ok((self.squared / n, self.absolute / n))
    }
}

/// Mean squared and mean absolute error over all entries.
pub fn mse_mae(prediction: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if prediction.len() != target.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            prediction.len(),
            target.len()
        )));
    }
    let mut sums = ErrorSums::default();
    sums.add(prediction, target);
    sums.mse_mae()
}

/// Running sums for ADE and FDE over agents.
#[derive(Clone, Copy, Debug, Default)]
pub struct DisplacementSums {
    pub average: f64,
    pub last: f64,
    pub agents: usize,
}

impl DisplacementSums {
    /// Adds one agent; both slices hold `[L_f, 2]` positions.
    pub fn add(&mut self, prediction: &[f64], target: &[f64]) -> Result<()> {
        if prediction.len() != target.len() || prediction.is_empty() || prediction.len() % 2 != 0 {
            return Err(Error::shape(format!(
                "trajectory of {} values against {}",
                prediction.len(),
                target.len()
            )));
        }
        let dist: Vec<f64> = prediction
            .chunks(2)
            .zip(target.chunks(2))
            .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
            .collect();
        self.average += dist.iter().sum::<f64>() / dist.len() as f64;
        self.last += dist[dist.len() - 1];
        self.agents += 1;
        Ok(())
    }

    pub fn ade_fde(&self) -> Result<(f64, f64)> {
        if self.agents == 0 {
            return Err(Error::contract("no trajectories to average"));
        }
        let n = self.agents as f64;
        Ok((self.average / n, self.last / n))
    }
}

/// ADE and FDE over agents, each given as `[L_f, 2]` positions.
pub fn ade_fde(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, f64)> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predicted agents for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut sums = DisplacementSums::default();
    for (p, t) in predictions.iter().zip(targets) {
        sums.add(p, t)?;
    }
    sums.ade_fde()
}

/// Mean and sample standard deviation (n - 1); the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

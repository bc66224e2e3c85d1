//! Training, evaluation, regimes and multi-run orchestration.
//!
//! Results are written as newline-delimited JSON, one [`RunResult`] per line.
//! Every record carries [`SCHEMA_VERSION`] and the hash of the config that
//! produced it.

mod adam;
mod config;
pub mod metrics;
mod train;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{clip_grad_norm, AdamState};
pub use config::{
    DataConfig, DataSource, ExperimentConfig, MatrixAxes, Regime, TrainConfig, DEFAULT_SEEDS,
};
pub use metrics::{ade_fde, mean_std, mse_mae, Metrics};
pub use train::{
    batch_loss, build_model, cap_per_city, epoch_batches, evaluate, fit, init_city_from_mean,
    load_dataset, train, train_step, Evaluation, Fitted, Prepared, Sample, Trained,
    DIVERGENCE_LIMIT,
};

use crate::backbones::BackboneKind;
use crate::citycond::Variant;
use crate::data::MultiCityDataset;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Validation or adaptation loss went non-finite or above the limit.
    Diverged,
    /// The run raised an error; see `error`.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub citycond: usize,
    pub widening: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub train_city: String,
    pub test_city: String,
    pub pre: Metrics,
    pub post: Metrics,
    /// Target-city test metrics every `eval_every` adaptation steps,
    /// starting at step 0.
    pub curve: Vec<CurvePoint>,
}

/// Slot attention at one history step of one test window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub city: String,
    pub start: usize,
    /// Absolute time index of the step.
    pub step: usize,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub config_hash: String,
    pub name: String,
    pub backbone: BackboneKind,
    pub variant: Variant,
    pub regime: Regime,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub epochs: Vec<EpochLog>,
    #[serde(default)]
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub val: Option<Metrics>,
    #[serde(default)]
    pub test: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<Transfer>,
    #[serde(default)]
    pub params: Option<ParamCounts>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention: Vec<AttentionRecord>,
    pub wall_clock_s: f64,
}

impl RunResult {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunResult {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            name: cfg.name.clone(),
            backbone: cfg.backbone.kind,
            variant: cfg.variant(),
            regime: cfg.regime.clone(),
            seed: cfg.seed,
            status: RunStatus::Ok,
            error: None,
            epochs: Vec::new(),
            best_epoch: None,
            val: None,
            test: None,
            transfer: None,
            params: None,
            attention: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn failed(cfg: &ExperimentConfig, err: &Error) -> Self {
        RunResult {
            status: RunStatus::Failed,
            error: Some(err.to_string()),
            ..RunResult::new(cfg)
        }
    }

    fn record_fit(&mut self, fitted: &Fitted) {
        self.epochs = fitted.epochs.clone();
        self.best_epoch = (fitted.best_epoch > 0).then_some(fitted.best_epoch);
        if fitted.diverged {
            self.status = RunStatus::Diverged;
        }
    }

    fn finish(&mut self, seconds: f64) {
        self.wall_clock_s = seconds;
        let finite = [&self.val, &self.test]
            .into_iter()
            .flatten()
            .all(Metrics::is_finite);
        if !finite && self.status == RunStatus::Ok {
            self.status = RunStatus::Diverged;
        }
    }

    /// `"gru/citymem/full/seed13"`.
    pub fn run_id(&self) -> String {
        format!(
            "{}/{}/{}/seed{}",
            self.backbone, self.variant, self.regime, self.seed
        )
    }
}

/// Loads the config's dataset and runs it.
pub fn run_config(cfg: &ExperimentConfig) -> Result<Trained> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.data)?;
    train(cfg, &Prepared::new(&ds, &cfg.data)?)
}

/// Runs every config in order. A failing run becomes a `Failed` record and
/// the rest continue. Datasets are built once per distinct data config.
pub fn run_matrix(
    configs: &[ExperimentConfig],
    mut on_result: impl FnMut(&RunResult),
) -> Vec<RunResult> {
    let mut cache: Vec<(DataConfig, std::result::Result<Prepared, String>)> = Vec::new();
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        let prepared = match cache.iter().position(|(d, _)| *d == cfg.data) {
            Some(i) => &cache[i].1,
            None => {
                let p = load_dataset(&cfg.data)
                    .and_then(|ds: MultiCityDataset| Prepared::new(&ds, &cfg.data))
                    .map_err(|e| e.to_string());
                cache.push((cfg.data.clone(), p));
                &cache[cache.len() - 1].1
            }
        };
        let result = match prepared {
            Ok(p) => train(cfg, p)
                .map(|t| t.result)
                .unwrap_or_else(|e| RunResult::failed(cfg, &e)),
            Err(msg) => RunResult::failed(cfg, &Error::data(msg.clone())),
        };
        on_result(&result);
        out.push(result);
    }
    out
}

pub fn write_results(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in results {
        append_result(&mut file, r).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes one record as a single JSON line.
pub fn append_result(w: &mut impl Write, result: &RunResult) -> std::io::Result<()> {
    let line = serde_json::to_string(result).map_err(std::io::Error::other)?;
    writeln!(w, "{line}")
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(SCHEMA_VERSION)) {
            return Err(Error::Schema(format!(
                "{} line {}: schema version {version:?}, expected {SCHEMA_VERSION}",
                path.display(),
                i + 1
            )));
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

//! Experiment configuration files.
//!
//! A config is one TOML document. Every table is optional; missing keys take
//! the defaults below. A `[matrix]` table turns the file into a sweep.
//!
//! ```toml
//! name = "lowdata"
//! seed = 13
//!
//! [backbone]
//! kind = "transformer"
//! d_h = 32
//!
//! [citycond]
//! variant = "citymem"
//!
//! [regime]
//! kind = "lowdata"
//! frac = 0.1
//!
//! [train]
//! lr = 1e-3
//!
//! [data]
//! source = "synthetic"
//!
//! [matrix]
//! backbones = ["gru", "transformer"]
//! variants = ["base", "cityid", "citymem"]
//! seeds = [13, 21, 42]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{BackboneKind, BackboneSpec};
use crate::citycond::{CityCondConfig, Variant};
use crate::data::{SplitRatios, SyntheticSpec, TrajectorySpec};
use crate::error::{Error, Result};

pub const DEFAULT_SEEDS: [u64; 3] = [13, 21, 42];

/// Which training windows a run sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// All training windows of every city.
    Full,
    /// `ceil(frac * n_c)` training windows per city.
    Lowdata { frac: f64 },
    /// Train on `source`, then fine-tune on `shot_count` windows of `target`.
    Crosscity {
        source: String,
        target: String,
        #[serde(default = "default_adapt_steps")]
        adapt_steps: usize,
        #[serde(default = "default_shot_count")]
        shot_count: usize,
        #[serde(default = "default_eval_every")]
        eval_every: usize,
        #[serde(default)]
        freeze_backbone: bool,
    },
}

fn default_adapt_steps() -> usize {
    200
}

fn default_shot_count() -> usize {
    100
}

fn default_eval_every() -> usize {
    20
}

impl Default for Regime {
    fn default() -> Self {
        Regime::Full
    }
}

impl Regime {
    pub fn crosscity(source: &str, target: &str) -> Self {
        Regime::Crosscity {
            source: source.into(),
            target: target.into(),
            adapt_steps: default_adapt_steps(),
            shot_count: default_shot_count(),
            eval_every: default_eval_every(),
            freeze_backbone: false,
        }
    }

    pub fn frac(&self) -> Option<f64> {
        match self {
            Regime::Lowdata { frac } => Some(*frac),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Regime::Full => Ok(()),
            Regime::Lowdata { frac } if *frac > 0.0 && *frac <= 1.0 => Ok(()),
            Regime::Lowdata { frac } => {
                Err(Error::config(format!("regime.frac {frac} outside (0, 1]")))
            }
            Regime::Crosscity {
                source,
                target,
                shot_count,
                eval_every,
                ..
            } => {
                if source == target {
                    return Err(Error::config("crosscity source and target must differ"));
                }
                if *shot_count == 0 || *eval_every == 0 {
                    return Err(Error::config("shot_count and eval_every must be positive"));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Full => f.write_str("full"),
            Regime::Lowdata { frac } => write!(f, "lowdata@{frac}"),
            Regime::Crosscity { source, target, .. } => write!(f, "{source}->{target}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping;
    /// 0 stops after the first epoch.
    pub patience: usize,
    /// Caps the batches drawn per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Caps the windows per city used for validation and test, taken at an
    /// even stride.
    pub max_eval_windows: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            steps_per_epoch: None,
            max_eval_windows: None,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated traffic from `[data.synthetic]`.
    #[default]
    Synthetic,
    /// Generated agent tracks from `[data.trajectories]`.
    Trajectories,
    /// A dataset directory at `path`.
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub trajectories: TrajectorySpec,
    pub history: usize,
    pub horizon: usize,
    pub splits: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            synthetic: SyntheticSpec::default(),
            trajectories: TrajectorySpec::default(),
            history: 12,
            horizon: 12,
            splits: SplitRatios::default(),
        }
    }
}

/// Sweep axes; each empty list keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixAxes {
    pub backbones: Vec<BackboneKind>,
    pub variants: Vec<Variant>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub backbone: BackboneSpec,
    pub citycond: CityCondConfig,
    pub regime: Regime,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Record slot attention for every test window (CityMem only).
    pub log_attention: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<MatrixAxes>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: DEFAULT_SEEDS[0],
            backbone: BackboneSpec::default(),
            citycond: CityCondConfig::default(),
            regime: Regime::Full,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            log_attention: false,
            matrix: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[], Path::new("<config>"))
    }

    /// Parses `text`, applies `key=value` overrides (dotted keys; values are
    /// TOML literals, bare words are strings) and validates the result.
    pub fn from_toml_with(text: &str, overrides: &[String], origin: &Path) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e
                .span()
                .map_or(0, |s| text[..s.start].lines().count().max(1) as u64),
            message: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(doc)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    Error::config(format!("{}: {}", origin.display(), e.message()))
                })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides, path)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn variant(&self) -> Variant {
        self.citycond.variant
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.citycond.validate()?;
        self.regime.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config(format!(
                "train.lr must be positive, got {}",
                t.lr
            )));
        }
        if t.batch_size == 0
            || t.max_epochs == 0
            || t.steps_per_epoch == Some(0)
            || t.max_eval_windows == Some(0)
        {
            return Err(Error::config(
                "batch_size, max_epochs, steps_per_epoch and max_eval_windows must be positive",
            ));
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.grad_clip must be positive"));
        }
        let d = &self.data;
        if d.history == 0 || d.horizon == 0 {
            return Err(Error::config("data.history and data.horizon must be >= 1"));
        }
        d.splits.validate()?;
        match d.source {
            DataSource::Synthetic => d.synthetic.validate()?,
            DataSource::Trajectories => d.trajectories.validate()?,
            DataSource::Dir if d.path.is_none() => {
                return Err(Error::config("data.source = \"dir\" needs data.path"))
            }
            DataSource::Dir => {}
        }
        let traj_data = d.source == DataSource::Trajectories;
        if self.backbone.kind.is_trajectory() && d.source == DataSource::Synthetic {
            return Err(Error::config("lstm_traj needs trajectory data"));
        }
        if traj_data && !self.backbone.kind.is_trajectory() {
            return Err(Error::config(format!(
                "{} cannot run on trajectory data",
                self.backbone.kind
            )));
        }
        if self.matrix.is_none() && !self.backbone.kind.supports(self.variant()) {
            return Err(Error::UnsupportedVariant(format!(
                "{} does not support {}",
                self.backbone.kind,
                self.variant()
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form with `seed` and `matrix`
    /// removed, so the seeds of one configuration share a hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = v.as_object_mut() {
            map.remove("seed");
            map.remove("matrix");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// The runs of a sweep, in backbone, variant, regime, seed order. A
    /// config without `[matrix]` expands to itself.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let axes = self.matrix.clone().unwrap_or_default();
        fn or<T>(v: Vec<T>, d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v
            }
        }
        let backbones = or(axes.backbones, self.backbone.kind);
        let variants = or(axes.variants, self.variant());
        let regimes = if axes.regimes.is_empty() {
            vec![self.regime.clone()]
        } else {
            axes.regimes
        };
        let seeds = or(axes.seeds, self.seed);
        let mut out = Vec::new();
        for &kind in &backbones {
            for &variant in &variants {
                for regime in &regimes {
                    for &seed in &seeds {
                        let mut c = self.clone();
                        c.matrix = None;
                        c.backbone.kind = kind;
                        c.citycond.variant = variant;
                        c.regime = regime.clone();
                        c.seed = seed;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

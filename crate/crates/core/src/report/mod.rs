//! Seed aggregation, table rendering, plot data and attention summaries.
//!
//! Aggregation groups run records by backbone, variant and setting (full
//! data, a low-data fraction, or a transfer direction) and reduces every
//! metric to mean and sample standard deviation over seeds. Renderers only
//! format what the table holds; nothing is recomputed at report time.

mod attention;
mod render;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use attention::{attention_csv, attention_report, AttentionRow, AttentionSummary};
pub use render::{
    adaptation_csv, lowdata_csv, read_table, render_csv, render_structured, render_text, report,
    table_from_csv, table_from_structured, ReportFormat,
};

use crate::backbones::BackboneKind;
use crate::citycond::Variant;
use crate::engine::metrics::{mean_std, METRIC_NAMES};
use crate::engine::{Metrics, Regime, RunResult, RunStatus};
use crate::error::{Error, Result};

/// Which metric block of a record a column reads.
pub const SPLITS: [&str; 4] = ["val", "test", "pre", "post"];

/// The regime part of a grouping key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    Full,
    Lowdata {
        frac: f64,
    },
    Transfer {
        train_city: String,
        test_city: String,
    },
}

impl Setting {
    pub fn of(regime: &Regime) -> Self {
        match regime {
            Regime::Full => Setting::Full,
            Regime::Lowdata { frac } => Setting::Lowdata { frac: *frac },
            Regime::Crosscity { source, target, .. } => Setting::Transfer {
                train_city: source.clone(),
                test_city: target.clone(),
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Setting::Full => "full",
            Setting::Lowdata { .. } => "lowdata",
            Setting::Transfer { .. } => "transfer",
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Setting::Full => 0,
            Setting::Lowdata { .. } => 1,
            Setting::Transfer { .. } => 2,
        }
    }

    fn order(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Setting::Lowdata { frac: a }, Setting::Lowdata { frac: b }) => a.total_cmp(b),
            (
                Setting::Transfer {
                    train_city: a,
                    test_city: b,
                },
                Setting::Transfer {
                    train_city: c,
                    test_city: d,
                },
            ) => (a, b).cmp(&(c, d)),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    /// Fraction of training windows used; full data counts as 1.
    pub fn fraction(&self) -> Option<f64> {
        match self {
            Setting::Full => Some(1.0),
            Setting::Lowdata { frac } => Some(*frac),
            Setting::Transfer { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

/// One group of runs that differ only by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub backbone: BackboneKind,
    pub variant: Variant,
    pub setting: Setting,
    /// Seeds whose runs finished and contribute to every cell.
    pub seeds: Vec<u64>,
    /// Seeds seen elsewhere in the input with no usable run in this group.
    pub missing_seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
    /// Keyed `"{split}.{metric}"`, e.g. `"test.mse"`.
    pub cells: BTreeMap<String, Cell>,
}

impl Row {
    pub fn n(&self) -> usize {
        self.seeds.len()
    }

    pub fn cell(&self, column: &str) -> Option<Cell> {
        self.cells.get(column).copied()
    }

    /// Short warnings shown next to the row.
    pub fn flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        if self.n() == 1 {
            flags.push("n=1".to_string());
        }
        if !self.missing_seeds.is_empty() {
            let s: Vec<String> = self.missing_seeds.iter().map(u64::to_string).collect();
            flags.push(format!("missing seed {}", s.join(",")));
        }
        if self.config_hashes.len() > 1 {
            flags.push("configs differ".to_string());
        }
        flags
    }

    fn key_order(&self, other: &Self) -> Ordering {
        self.setting
            .order(&other.setting)
            .then(self.backbone.cmp(&other.backbone))
            .then(self.variant.cmp(&other.variant))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub step: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Mean adaptation curve of one transfer group, on the primary metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub backbone: BackboneKind,
    pub variant: Variant,
    pub train_city: String,
    pub test_city: String,
    pub points: Vec<CurveCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    /// Cell keys present in at least one row, in report order.
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<CurveSeries>,
}

impl AggregateTable {
    pub fn find(
        &self,
        backbone: BackboneKind,
        variant: Variant,
        setting: &Setting,
    ) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.backbone == backbone && r.variant == variant && r.setting == *setting)
    }
}

fn split_metrics<'a>(r: &'a RunResult, split: &str) -> Option<&'a Metrics> {
    match split {
        "val" => r.val.as_ref(),
        "test" => r.test.as_ref(),
        "pre" => r.transfer.as_ref().map(|t| &t.pre),
        "post" => r.transfer.as_ref().map(|t| &t.post),
        _ => None,
    }
}

fn column_value(r: &RunResult, column: &str) -> Option<f64> {
    let (split, metric) = column.split_once('.')?;
    split_metrics(r, split)?.get(metric)
}

/// Every possible column, in report order.
pub fn all_columns() -> impl Iterator<Item = String> {
    SPLITS
        .into_iter()
        .flat_map(|s| METRIC_NAMES.into_iter().map(move |m| format!("{s}.{m}")))
}

/// Mean and sample std of values sorted by seed, so the result does not
/// depend on input order.
fn reduce(mut values: Vec<(u64, f64)>) -> Option<Cell> {
    values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let v: Vec<f64> = values.into_iter().map(|(_, v)| v).collect();
    mean_std(&v).map(|(mean, std)| Cell { mean, std })
}

/// Groups results and reduces every metric over seeds.
///
/// Only runs with status `ok` contribute. A cell is filled only when every
/// contributing run has that metric, so a group is never averaged over fewer
/// runs than its `seeds` list says.
pub fn aggregate(results: &[RunResult]) -> Result<AggregateTable> {
    let first = results
        .first()
        .ok_or_else(|| Error::data("no results to aggregate"))?;
    if let Some(r) = results
        .iter()
        .find(|r| r.schema_version != first.schema_version)
    {
        return Err(Error::Schema(format!(
            "results mix schema versions {} and {}",
            first.schema_version, r.schema_version
        )));
    }
    let expected: BTreeSet<u64> = results.iter().map(|r| r.seed).collect();

    let mut groups: Vec<(Row, Vec<&RunResult>)> = Vec::new();
    for r in results {
        let setting = Setting::of(&r.regime);
        let pos = groups.iter().position(|(g, _)| {
            g.backbone == r.backbone && g.variant == r.variant && g.setting == setting
        });
        let i = pos.unwrap_or_else(|| {
            groups.push((
                Row {
                    backbone: r.backbone,
                    variant: r.variant,
                    setting,
                    seeds: Vec::new(),
                    missing_seeds: Vec::new(),
                    config_hashes: Vec::new(),
                    cells: BTreeMap::new(),
                },
                Vec::new(),
            ));
            groups.len() - 1
        });
        groups[i].1.push(r);
    }

    let mut rows = Vec::with_capacity(groups.len());
    let mut curves = Vec::new();
    for (mut row, members) in groups {
        let ok: Vec<&RunResult> = members
            .iter()
            .copied()
            .filter(|r| r.status == RunStatus::Ok)
            .collect();
        row.seeds = ok.iter().map(|r| r.seed).collect();
        row.seeds.sort_unstable();
        let present: BTreeSet<u64> = row.seeds.iter().copied().collect();
        row.missing_seeds = expected.difference(&present).copied().collect();
        row.config_hashes = members
            .iter()
            .map(|r| r.config_hash.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for column in all_columns() {
            let values: Option<Vec<(u64, f64)>> = ok
                .iter()
                .map(|r| column_value(r, &column).map(|v| (r.seed, v)))
                .collect();
            if let Some(cell) = values.filter(|v| !v.is_empty()).and_then(reduce) {
                row.cells.insert(column, cell);
            }
        }
        if let Setting::Transfer {
            train_city,
            test_city,
        } = &row.setting
        {
            curves.push(CurveSeries {
                backbone: row.backbone,
                variant: row.variant,
                train_city: train_city.clone(),
                test_city: test_city.clone(),
                points: curve_points(&ok),
            });
        }
        rows.push(row);
    }
    rows.sort_by(Row::key_order);
    curves.sort_by(|a, b| {
        (&a.train_city, &a.test_city, a.backbone, a.variant).cmp(&(
            &b.train_city,
            &b.test_city,
            b.backbone,
            b.variant,
        ))
    });
    let columns = all_columns()
        .filter(|c| rows.iter().any(|r| r.cells.contains_key(c)))
        .collect();
    Ok(AggregateTable {
        columns,
        rows,
        curves,
    })
}

/// Per-step mean of the primary metric over runs that reached that step.
fn curve_points(runs: &[&RunResult]) -> Vec<CurveCell> {
    let mut by_step: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
    for r in runs {
        for p in r.transfer.iter().flat_map(|t| &t.curve) {
            if let Some(v) = p.metrics.primary() {
                by_step.entry(p.step).or_default().push((r.seed, v));
            }
        }
    }
    by_step
        .into_iter()
        .filter_map(|(step, values)| {
            let n = values.len();
            reduce(values).map(|c| CurveCell {
                step,
                n,
                mean: c.mean,
                std: c.std,
            })
        })
        .collect()
}

//! Text, CSV and JSON renderings of an [`AggregateTable`], plus plot data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{AggregateTable, Cell, Row, Setting};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Structured,
}

impl ReportFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Text => "table.txt",
            ReportFormat::Csv => "table.csv",
            ReportFormat::Structured => "table.json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "structured" | "json" => Ok(ReportFormat::Structured),
            other => Err(Error::Usage(format!(
                "unknown report format {other:?} (expected text, csv or structured)"
            ))),
        }
    }
}

const EMPTY: &str = "--";

fn cell_text(cell: Option<Cell>) -> String {
    match cell {
        Some(c) => format!("{:.4} ± {:.4}", c.mean, c.std),
        None => EMPTY.to_string(),
    }
}

fn metric_header(metric: &str) -> String {
    metric.to_uppercase().replace("_NORMALIZED", " (norm)")
}

/// Left-aligned columns separated by two spaces.
fn layout(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let s: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers);
    out += &line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in rows {
        out += &line(r);
    }
    out
}

fn notes(row: &Row) -> String {
    row.flags().join("; ")
}

/// Headline test metrics that appear in any of `rows`.
fn test_metrics(table: &AggregateTable, rows: &[&Row]) -> Vec<String> {
    ["mse", "mae", "ade", "fde"]
        .into_iter()
        .filter(|m| {
            let c = format!("test.{m}");
            table.columns.contains(&c) && rows.iter().any(|r| r.cells.contains_key(&c))
        })
        .map(String::from)
        .collect()
}

fn primary(row: &Row, split: &str) -> Option<Cell> {
    row.cell(&format!("{split}.mse"))
        .or_else(|| row.cell(&format!("{split}.ade")))
}

/// Human-readable tables: one per setting kind present.
pub fn render_text(table: &AggregateTable) -> String {
    let mut sections = Vec::new();
    for (kind, title) in [
        ("full", "Full data"),
        ("lowdata", "Low data"),
        ("transfer", "Cross-city transfer"),
    ] {
        let rows: Vec<&Row> = table
            .rows
            .iter()
            .filter(|r| r.setting.name() == kind)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let (headers, body): (Vec<String>, Vec<Vec<String>>) = if kind == "transfer" {
            let headers = [
                "train_city",
                "test_city",
                "model",
                "Pre",
                "Post",
                "n",
                "notes",
            ]
            .map(String::from)
            .to_vec();
            let body = rows
                .iter()
                .map(|r| {
                    let Setting::Transfer {
                        train_city,
                        test_city,
                    } = &r.setting
                    else {
                        unreachable!()
                    };
                    vec![
                        train_city.clone(),
                        test_city.clone(),
                        format!("{}+{}", r.backbone, r.variant),
                        cell_text(primary(r, "pre")),
                        cell_text(primary(r, "post")),
                        r.n().to_string(),
                        notes(r),
                    ]
                })
                .collect();
            (headers, body)
        } else {
            let metrics = test_metrics(table, &rows);
            let mut headers = vec!["backbone".to_string(), "model".to_string()];
            if kind == "lowdata" {
                headers.push("fraction".into());
            }
            headers.extend(metrics.iter().map(|m| metric_header(m)));
            headers.extend(["n".to_string(), "notes".to_string()]);
            let body = rows
                .iter()
                .map(|r| {
                    let mut cells = vec![r.backbone.to_string(), r.variant.to_string()];
                    if let Setting::Lowdata { frac } = r.setting {
                        cells.push(frac.to_string());
                    }
                    cells.extend(
                        metrics
                            .iter()
                            .map(|m| cell_text(r.cell(&format!("test.{m}")))),
                    );
                    cells.extend([r.n().to_string(), notes(r)]);
                    cells
                })
                .collect();
            (headers, body)
        };
        sections.push(format!("{title}\n\n{}", layout(&headers, &body)));
    }
    sections.join("\n")
}

const ID_COLUMNS: [&str; 10] = [
    "backbone",
    "variant",
    "setting",
    "frac",
    "train_city",
    "test_city",
    "n",
    "seeds",
    "missing_seeds",
    "config_hashes",
];

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::data(format!("table csv: {e}"))
}

/// One line per row. Lists are `;`-separated and floats use the shortest
/// representation that parses back to the same value.
pub fn render_csv(table: &AggregateTable) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<String> = ID_COLUMNS.map(String::from).to_vec();
    for c in &table.columns {
        header.push(format!("{c}.mean"));
        header.push(format!("{c}.std"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in &table.rows {
        let (frac, train, test) = match &r.setting {
            Setting::Full => (String::new(), String::new(), String::new()),
            Setting::Lowdata { frac } => (frac.to_string(), String::new(), String::new()),
            Setting::Transfer {
                train_city,
                test_city,
            } => (String::new(), train_city.clone(), test_city.clone()),
        };
        let mut rec = vec![
            r.backbone.to_string(),
            r.variant.to_string(),
            r.setting.name().to_string(),
            frac,
            train,
            test,
            r.n().to_string(),
            join(&r.seeds),
            join(&r.missing_seeds),
            join(&r.config_hashes),
        ];
        for c in &table.columns {
            match r.cell(c) {
                Some(cell) => rec.extend([cell.mean.to_string(), cell.std.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

fn split_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|v| v.parse().map_err(|e| csv_err(format!("{v:?}: {e}"))))
        .collect()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|e| csv_err(format!("{s:?}: {e}")))
}

/// Parses the output of [`render_csv`]. Adaptation curves are not part of
/// the CSV form and come back empty.
pub fn table_from_csv(text: &str) -> Result<AggregateTable> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(String::from)
        .collect();
    if header.len() < ID_COLUMNS.len() || header[..ID_COLUMNS.len()] != ID_COLUMNS {
        return Err(csv_err("unexpected header"));
    }
    let metric_cols = &header[ID_COLUMNS.len()..];
    if metric_cols.len() % 2 != 0 {
        return Err(csv_err("metric columns must come in mean/std pairs"));
    }
    let mut columns = Vec::new();
    for pair in metric_cols.chunks(2) {
        let c = pair[0]
            .strip_suffix(".mean")
            .ok_or_else(|| csv_err(format!("bad column {}", pair[0])))?;
        if pair[1] != format!("{c}.std") {
            return Err(csv_err(format!("bad column {}", pair[1])));
        }
        columns.push(c.to_string());
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let setting = match f(2) {
            "full" => Setting::Full,
            "lowdata" => Setting::Lowdata {
                frac: parse_f64(f(3))?,
            },
            "transfer" => Setting::Transfer {
                train_city: f(4).to_string(),
                test_city: f(5).to_string(),
            },
            other => return Err(csv_err(format!("unknown setting {other:?}"))),
        };
        let mut cells = BTreeMap::new();
        for (k, c) in columns.iter().enumerate() {
            let (m, s) = (f(ID_COLUMNS.len() + 2 * k), f(ID_COLUMNS.len() + 2 * k + 1));
            if !m.is_empty() {
                cells.insert(
                    c.clone(),
                    Cell {
                        mean: parse_f64(m)?,
                        std: parse_f64(s)?,
                    },
                );
            }
        }
        let row = Row {
            backbone: f(0).parse()?,
            variant: f(1).parse()?,
            setting,
            seeds: split_list(f(7))?,
            missing_seeds: split_list(f(8))?,
            config_hashes: split_list(f(9))?,
            cells,
        };
        if f(6) != row.n().to_string() {
            return Err(csv_err(format!(
                "n = {} does not match the seed list",
                f(6)
            )));
        }
        rows.push(row);
    }
    Ok(AggregateTable {
        columns,
        rows,
        curves: Vec::new(),
    })
}

pub fn render_structured(table: &AggregateTable) -> Result<String> {
    serde_json::to_string_pretty(table)
        .map(|s| s + "\n")
        .map_err(|e| Error::data(e.to_string()))
}

pub fn table_from_structured(text: &str) -> Result<AggregateTable> {
    serde_json::from_str(text).map_err(|e| Error::data(format!("table json: {e}")))
}

/// Reads a table written as `.csv` or JSON (any other extension).
pub fn read_table(path: &Path) -> Result<AggregateTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "csv") {
        table_from_csv(&text)
    } else {
        table_from_structured(&text)
    }
}

/// `(fraction, mean, std)` of the primary test metric for every
/// backbone/variant series, full data counted as fraction 1.
pub fn lowdata_csv(table: &AggregateTable) -> String {
    let mut points: Vec<(&Row, f64, &str, Cell)> = table
        .rows
        .iter()
        .filter_map(|r| {
            let frac = r.setting.fraction()?;
            let (metric, cell) = match (r.cell("test.mse"), r.cell("test.ade")) {
                (Some(c), _) => ("mse", c),
                (None, Some(c)) => ("ade", c),
                _ => return None,
            };
            Some((r, frac, metric, cell))
        })
        .collect();
    points.sort_by(|a, b| {
        (a.0.backbone, a.0.variant)
            .cmp(&(b.0.backbone, b.0.variant))
            .then(a.1.total_cmp(&b.1))
    });
    let mut out = String::from("backbone,variant,fraction,metric,mean,std,n\n");
    for (r, frac, metric, c) in points {
        out += &format!(
            "{},{},{frac},{metric},{},{},{}\n",
            r.backbone,
            r.variant,
            c.mean,
            c.std,
            r.n()
        );
    }
    out
}

/// `(step, mean, std)` adaptation curves per transfer group.
pub fn adaptation_csv(table: &AggregateTable) -> String {
    let mut out = String::from("backbone,variant,train_city,test_city,step,mean,std,n\n");
    for s in &table.curves {
        for p in &s.points {
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                s.backbone, s.variant, s.train_city, s.test_city, p.step, p.mean, p.std, p.n
            );
        }
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the table in `format` plus the two plot-data files into `dir`.
/// Returns the paths written.
pub fn report(table: &AggregateTable, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::data("nothing to report: the table has no rows"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = match format {
        ReportFormat::Text => render_text(table),
        ReportFormat::Csv => render_csv(table)?,
        ReportFormat::Structured => render_structured(table)?,
    };
    Ok(vec![
        write(dir, format.file_name(), &body)?,
        write(dir, "lowdata.csv", &lowdata_csv(table))?,
        write(dir, "adaptation.csv", &adaptation_csv(table))?,
    ])
}

//! CSV ingestion and export.
//!
//! Series files have a header `timestamp,<node>,<node>,...` and one row per
//! time step. With `d_x > 1` each node spans `d_x` consecutive columns named
//! `<node>.0`, `<node>.1`, .... Empty cells and `NA`/`NaN`/`null` are
//! missing; they are forward-filled, then back-filled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CitySeries;
use crate::backbones::Adjacency;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Columns per node.
    pub features: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { features: 1 }
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null" | "NULL")
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(path, 0, format!("{other:?}")),
        })
}

fn records(path: &Path) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec));
    }
    Ok(out)
}

/// Reads one city's series. `id` and `name` label the result.
pub fn load_csv(path: &Path, schema: CsvSchema, id: usize, name: &str) -> Result<CitySeries> {
    let rows = records(path)?;
    let Some(((_, header), body)) = rows.split_first() else {
        return Err(parse_err(path, 1, "empty file"));
    };
    let width = header.len();
    let d_x = schema.features.max(1);
    if width < 2 || (width - 1) % d_x != 0 {
        return Err(parse_err(
            path,
            1,
            format!(
                "{} value columns do not split into nodes of {d_x}",
                width - 1
            ),
        ));
    }
    let n = (width - 1) / d_x;
    let node_ids: Vec<String> = (0..n)
        .map(|i| {
            let h = header[1 + i * d_x].trim();
            if d_x > 1 {
                h.strip_suffix(".0").unwrap_or(h).to_string()
            } else {
                h.to_string()
            }
        })
        .collect();
    if body.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let cols = width - 1;
    let mut cells: Vec<Option<f64>> = Vec::with_capacity(body.len() * cols);
    let mut timestamps = Vec::with_capacity(body.len());
    for (line, rec) in body {
        if rec.len() != width {
            return Err(parse_err(
                path,
                *line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        timestamps.push(rec[0].trim().to_string());
        for cell in rec.iter().skip(1) {
            if is_missing(cell) {
                cells.push(None);
            } else {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, *line, format!("not a number: {cell:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, *line, format!("non-finite value {cell:?}")));
                }
                cells.push(Some(v));
            }
        }
    }
    let t = body.len();
    let mut values = vec![0.0; t * cols];
    for c in 0..cols {
        let first = (0..t).find_map(|r| cells[r * cols + c]).ok_or_else(|| {
            Error::data(format!(
                "{}: column for node {} has no values",
                path.display(),
                node_ids[c / d_x]
            ))
        })?;
        let mut last = first;
        for r in 0..t {
            if let Some(v) = cells[r * cols + c] {
                last = v;
            }
            values[r * cols + c] = last;
        }
    }
    let mut series = CitySeries::new(id, name, Tensor::new(vec![t, n, d_x], values)?)?;
    series.node_ids = node_ids;
    series.timestamps = timestamps;
    Ok(series)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    })
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::data(format!("writing {}: {e}", path.display()))
}

/// Writes the series values (shortest round-trip float formatting).
pub fn write_csv(series: &CitySeries, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let d_x = series.features();
    let mut header = vec!["timestamp".to_string()];
    for id in &series.node_ids {
        if d_x == 1 {
            header.push(id.clone());
        } else {
            header.extend((0..d_x).map(|k| format!("{id}.{k}")));
        }
    }
    w.write_record(&header).map_err(write_err(path))?;
    let cols = series.nodes() * d_x;
    for (t, row) in series.values.data().chunks(cols).enumerate() {
        let mut rec = Vec::with_capacity(cols + 1);
        rec.push(
            series
                .timestamps
                .get(t)
                .cloned()
                .unwrap_or_else(|| t.to_string()),
        );
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(write_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Square weight matrix with a `node,<id>,...` header and one labelled row
/// per node.
pub fn write_adjacency_csv(adjacency: &Adjacency, node_ids: &[String], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let n = adjacency.nodes();
    let mut header = vec!["node".to_string()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header).map_err(write_err(path))?;
    for (i, row) in adjacency.weights().data().chunks(n).enumerate() {
        let mut rec = vec![node_ids[i].clone()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(write_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_adjacency_csv(path: &Path) -> Result<Adjacency> {
    let rows = records(path)?;
    let Some(((_, header), body)) = rows.split_first() else {
        return Err(parse_err(path, 1, "empty file"));
    };
    let n = header.len().saturating_sub(1);
    if n == 0 || body.len() != n {
        return Err(parse_err(
            path,
            1,
            format!("adjacency needs {n} rows, found {}", body.len()),
        ));
    }
    let mut data = Vec::with_capacity(n * n);
    for (line, rec) in body {
        if rec.len() != n + 1 {
            return Err(parse_err(
                path,
                *line,
                format!("expected {} fields, found {}", n + 1, rec.len()),
            ));
        }
        for cell in rec.iter().skip(1) {
            data.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, *line, format!("not a number: {cell:?}")))?,
            );
        }
    }
    Adjacency::from_weights(Tensor::new(vec![n, n], data)?)
}

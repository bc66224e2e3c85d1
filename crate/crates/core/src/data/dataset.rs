//! On-disk dataset directories.
//!
//! ```text
//! dataset.toml          manifest
//! <city>.csv            one series per city
//! <city>_adj.csv        optional adjacency
//! ground_truth.toml     present for generated traffic
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::csv_io::{load_csv, read_adjacency_csv, write_adjacency_csv, write_csv, CsvSchema};
use super::{CitySeries, GroundTruth};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "dataset.toml";
pub const GROUND_TRUTH: &str = "ground_truth.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Traffic,
    Trajectory,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCity {
    name: String,
    series: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adjacency: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: DatasetKind,
    features: usize,
    #[serde(rename = "city")]
    cities: Vec<ManifestCity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCityDataset {
    pub kind: DatasetKind,
    pub cities: Vec<CitySeries>,
    pub ground_truth: Option<GroundTruth>,
}

impl MultiCityDataset {
    pub fn new(kind: DatasetKind, cities: Vec<CitySeries>) -> Result<Self> {
        if cities.is_empty() {
            return Err(Error::data("dataset has no cities"));
        }
        let d_x = cities[0].features();
        if let Some(c) = cities.iter().find(|c| c.features() != d_x) {
            return Err(Error::data(format!(
                "city {} has {} features, expected {d_x}",
                c.name,
                c.features()
            )));
        }
        if kind == DatasetKind::Trajectory && d_x != 2 {
            return Err(Error::data("trajectory datasets need 2 features (x, y)"));
        }
        Ok(MultiCityDataset {
            kind,
            cities,
            ground_truth: None,
        })
    }

    pub fn features(&self) -> usize {
        self.cities[0].features()
    }

    pub fn city_index(&self, name: &str) -> Result<usize> {
        self.cities
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::config(format!("unknown city {name:?}")))
    }

    pub fn city_names(&self) -> Vec<String> {
        self.cities.iter().map(|c| c.name.clone()).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.cities.iter().map(CitySeries::len).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.cities.len());
        for city in &self.cities {
            let series = format!("{}.csv", city.name);
            write_csv(city, &dir.join(&series))?;
            let adjacency = match &city.adjacency {
                Some(adj) => {
                    let file = format!("{}_adj.csv", city.name);
                    write_adjacency_csv(adj, &city.node_ids, &dir.join(&file))?;
                    Some(file)
                }
                None => None,
            };
            entries.push(ManifestCity {
                name: city.name.clone(),
                series,
                adjacency,
            });
        }
        let manifest = Manifest {
            kind: self.kind,
            features: self.features(),
            cities: entries,
        };
        write_toml(&dir.join(MANIFEST), &manifest)?;
        if let Some(gt) = &self.ground_truth {
            write_toml(&dir.join(GROUND_TRUTH), gt)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest: Manifest = read_toml(&path)?;
        let schema = CsvSchema {
            features: manifest.features,
        };
        let mut cities = Vec::with_capacity(manifest.cities.len());
        for (id, entry) in manifest.cities.iter().enumerate() {
            let mut series = load_csv(&dir.join(&entry.series), schema, id, &entry.name)?;
            if let Some(file) = &entry.adjacency {
                let adj = read_adjacency_csv(&dir.join(file))?;
                if adj.nodes() != series.nodes() {
                    return Err(Error::data(format!(
                        "city {}: adjacency has {} nodes, series has {}",
                        entry.name,
                        adj.nodes(),
                        series.nodes()
                    )));
                }
                series.adjacency = Some(adj);
            }
            cities.push(series);
        }
        let mut ds = MultiCityDataset::new(manifest.kind, cities)?;
        let gt = dir.join(GROUND_TRUTH);
        if gt.exists() {
            ds.ground_truth = Some(read_toml(&gt)?);
        }
        Ok(ds)
    }
}

pub(crate) fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        toml::to_string(value).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e
            .span()
            .map_or(0, |s| text[..s.start].lines().count().max(1) as u64),
        message: e.message().to_string(),
    })
}

//! The results CSV and the resume manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Column order of `results.csv`. Bump [`SCHEMA_VERSION`] on any change.
pub const HEADER: [&str; 10] = [
    "method",
    "n",
    "p",
    "c",
    "replication",
    "iteration",
    "value_mean",
    "value_stderr",
    "wall_ms",
    "seed",
];
pub const SCHEMA_VERSION: u32 = 1;

pub const METHOD_POLAR: &str = "polar";
pub const METHOD_DTRQ: &str = "dtr-q";
pub const METHOD_BEHAVIOR: &str = "behavior";
pub const METHOD_ORACLE: &str = "dp-oracle";
pub const METHOD_ERROR: &str = "error";

/// One CSV row. Baseline rows leave `c` empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub n: usize,
    pub p: f64,
    pub c: Option<f64>,
    pub replication: usize,
    pub iteration: usize,
    pub value_mean: f64,
    pub value_stderr: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&tmp)?;
        w.write_record(HEADER)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(CliError::Config(format!(
            "{} has header {header:?}, expected {HEADER:?}",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(CliError::from))
        .collect()
}

/// Identity of one `(p, n, replication)` cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub p_index: usize,
    pub n_index: usize,
    pub replication: usize,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!("p{}-n{}-r{}", self.p_index, self.n_index, self.replication)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub rows: Vec<ResultRow>,
    pub error: Option<String>,
}

/// Completed cells and their rows; `results.csv` is regenerated from it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// Hash of the configuration the cells were computed under.
    pub config_hash: String,
    pub cells: BTreeMap<String, CellRecord>,
}

impl Manifest {
    pub fn new(config_hash: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash,
            cells: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever the column set changes; recorded in run manifests.
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_COLUMNS: [&str; 7] = ["step", "epoch", "lr", "l_inv", "l_equi", "l_total", "throughput"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_inv: f64,
    /// Empty for runs without the equivariance module.
    pub l_equi: Option<f64>,
    pub l_total: f64,
    /// Source images per second.
    pub throughput: f64,
}

/// Append-only CSV; the header is written when the file is new.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(METRICS_COLUMNS).map_err(|e| csv_err(path, e))?;
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<MetricsRow>> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.iter().ne(METRICS_COLUMNS) {
            return Err(Error::Checkpoint(format!("{} has columns {headers:?}", path.display())));
        }
        reader
            .deserialize()
            .collect::<std::result::Result<Vec<MetricsRow>, _>>()
            .map_err(|e| csv_err(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

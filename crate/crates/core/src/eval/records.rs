//! Per-epoch metrics files: CSV with a header, one row appended and flushed
//! per epoch. Floats are written in shortest round-trip form, so files parse
//! back to bitwise-equal values.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{EpochMetrics, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub variant: Variant,
    pub group_size: usize,
    pub n_dwt: usize,
    pub seed: u64,
    pub lr: f64,
    pub source_loss: f64,
    pub target_loss: f64,
    pub total_loss: f64,
    /// Fractions in `[0, 1]`.
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

impl MetricsRow {
    pub fn from_epoch(m: &EpochMetrics, variant: Variant, group_size: usize, n_dwt: usize, seed: u64) -> Self {
        MetricsRow {
            epoch: m.epoch,
            variant,
            group_size,
            n_dwt,
            seed,
            lr: m.lr,
            source_loss: m.source_loss,
            target_loss: m.target_loss,
            total_loss: m.total_loss,
            source_accuracy: m.source_accuracy,
            target_accuracy: m.target_accuracy,
        }
    }
}

/// Wall-clock time per epoch, kept apart from [`MetricsRow`] so metrics files
/// are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub epoch: usize,
    pub wall_seconds: f64,
}

/// Append-only CSV writer that flushes after every row.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(CsvLog {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path)
}

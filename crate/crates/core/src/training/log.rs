//! CSV metric log, one row per epoch.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::EpochRecord;

pub const LOG_HEADER: [&str; 7] = [
    "epoch",
    "phase",
    "s",
    "train_loss",
    "val_metric",
    "reward_mean",
    "baseline_mse",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn row(r: &EpochRecord) -> [String; 7] {
    [
        r.epoch.to_string(),
        r.phase.to_string(),
        r.s.map(|s| s.to_string()).unwrap_or_default(),
        format!("{:.6}", r.train_loss),
        opt(r.val_metric),
        opt(r.reward_mean),
        opt(r.baseline_mse),
    ]
}

/// Streams rows to disk as epochs finish, flushing after each.
pub struct MetricLogWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricLogWriter {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(file),
        };
        w.write_raw(&LOG_HEADER.map(String::from))?;
        Ok(w)
    }

    fn write_raw(&mut self, fields: &[String; 7]) -> Result<()> {
        let to_io = |e: csv::Error| std::io::Error::other(e.to_string());
        self.inner
            .write_record(fields)
            .map_err(|e| Error::io(&self.path, to_io(e)))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        self.write_raw(&row(record))
    }
}

pub fn write_metric_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = MetricLogWriter::create(path)?;
    records.iter().try_for_each(|r| w.append(r))
}

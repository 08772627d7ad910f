//! Metrics output: one JSON record per line plus a final summary document.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ecacl_core::train::{MetricsRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Append-only JSON-lines writer.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("records always serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub step: u64,
    pub split: String,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_class_accuracy: f64,
    pub overall_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<TrainConfig>,
}

impl Summary {
    pub fn new(record: &MetricsRecord, config: Option<&TrainConfig>) -> Self {
        Self {
            step: record.step,
            split: record.split.clone(),
            per_class_accuracy: record.per_class_accuracy.clone(),
            mean_class_accuracy: record.mean_class_accuracy,
            overall_accuracy: record.overall_accuracy,
            config: config.cloned(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("summaries always serialize");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

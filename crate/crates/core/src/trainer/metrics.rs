use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    /// One optimizer update.
    Step,
    /// End-of-epoch evaluation with hard codes.
    Validation,
}

/// One line of the metrics stream. Loss terms are unweighted and averaged
/// per batch symbol; `total_loss` is the weighted objective that was
/// differentiated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub step: u64,
    pub epoch: usize,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odg_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distillation_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
}

impl MetricRecord {
    pub(crate) fn validation(step: u64, epoch: usize, tau: f64, loss: f64, metric: Option<f64>) -> Self {
        Self {
            kind: RecordKind::Validation,
            step,
            epoch,
            tau,
            task_loss: None,
            entropy: None,
            odg_loss: None,
            autoencoder_loss: None,
            distillation_loss: None,
            total_loss: None,
            grad_norm: None,
            val_loss: Some(loss),
            val_metric: metric,
        }
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut step = MetricRecord::validation(3, 1, 0.5, 0.25, None);
        step.kind = RecordKind::Step;
        step.val_loss = None;
        step.task_loss = Some(0.1 + 0.2);
        step.entropy = Some(1.0 / 3.0);
        let recs = vec![step, MetricRecord::validation(4, 1, 0.4, 0.125, Some(0.9))];
        write_metrics(&path, &recs).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with(r#"{"kind":"step","step":3"#));
    }
}

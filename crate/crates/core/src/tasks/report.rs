use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codebook::{embedding_layer_bits, FullBitsConvention, LayerSize};
use crate::{Error, Result};

/// Outcome of one method on one task. Size fields are derived from
/// `layer`; [`RunReport::check`] recomputes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub config: Value,
    pub layer: LayerSize,
    pub params: u64,
    pub bits: u64,
    pub full_bits: u64,
    /// `full_bits / bits`.
    pub compression_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nn_overlap: Option<f64>,
    /// Left unset unless timing is requested, so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

fn full_reference(layer: &LayerSize, convention: FullBitsConvention) -> Option<LayerSize> {
    match *layer {
        LayerSize::Full { .. } => Some(*layer),
        LayerSize::Kd { .. } => None,
        LayerSize::LowRank { vocab, dim, .. } => Some(LayerSize::Full { vocab, dim, convention }),
        LayerSize::Scalar { vocab, dim, .. } => Some(LayerSize::Full { vocab, dim, convention }),
    }
}

impl RunReport {
    /// Sizes `layer` against a full `vocab×dim` float matrix.
    pub fn new(method: impl Into<String>, config: Value, layer: LayerSize, dim: usize, convention: FullBitsConvention) -> Self {
        let vocab = match layer {
            LayerSize::Kd { vocab, .. }
            | LayerSize::Full { vocab, .. }
            | LayerSize::Scalar { vocab, .. }
            | LayerSize::LowRank { vocab, .. } => vocab,
        };
        let full = full_reference(&layer, convention).unwrap_or(LayerSize::Full { vocab, dim, convention });
        let bits = embedding_layer_bits(&layer);
        let full_bits = embedding_layer_bits(&full);
        Self {
            method: method.into(),
            config,
            layer,
            params: layer.params(),
            bits,
            full_bits,
            compression_ratio: full_bits as f64 / bits as f64,
            task_metric: None,
            task_loss: None,
            reconstruction_error: None,
            nn_overlap: None,
            wall_time_s: None,
        }
    }

    /// Recomputes the size fields from `layer` and checks the shape keys of
    /// the config echo (`vocab`, `k`, `dims`, `code_dim`) against it.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format { what: "run report", message: format!("{}: {m}", self.method) });
        if self.params != self.layer.params() {
            return bad(format!("params {} but layer implies {}", self.params, self.layer.params()));
        }
        let bits = embedding_layer_bits(&self.layer);
        if self.bits != bits {
            return bad(format!("bits {} but layer implies {bits}", self.bits));
        }
        let ratio = self.full_bits as f64 / bits as f64;
        if self.compression_ratio != ratio {
            return bad(format!("compression ratio {} but sizes imply {ratio}", self.compression_ratio));
        }
        let expected: Vec<(&str, usize)> = match self.layer {
            LayerSize::Kd { vocab, k, dims, code_dim, .. } => {
                vec![("vocab", vocab), ("k", k), ("dims", dims), ("code_dim", code_dim)]
            }
            LayerSize::Full { vocab, .. } | LayerSize::Scalar { vocab, .. } | LayerSize::LowRank { vocab, .. } => {
                vec![("vocab", vocab)]
            }
        };
        for (key, want) in expected {
            if let Some(v) = self.config.get(key) {
                if v.as_u64() != Some(want as u64) {
                    return bad(format!("config {key}={v} disagrees with layer value {want}"));
                }
            }
        }
        Ok(())
    }
}

pub fn write_reports(path: &Path, reports: &[RunReport]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[RunReport]) -> String {
    let header = ["method", "params", "bits", "ratio", "metric", "loss", "recon", "nn"].map(String::from);
    let mut rows = vec![header.to_vec()];
    for r in reports {
        rows.push(vec![
            r.method.clone(),
            r.params.to_string(),
            r.bits.to_string(),
            format!("{:.2}x", r.compression_ratio),
            opt(r.task_metric, 4),
            opt(r.task_loss, 4),
            opt(r.reconstruction_error, 5),
            opt(r.nn_overlap, 3),
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                let pad = w - cell.chars().count();
                if c == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn full_report() -> RunReport {
        let layer = LayerSize::Full { vocab: 10_000, dim: 200, convention: FullBitsConvention::Matrix };
        RunReport::new("full", json!({"vocab": 10_000}), layer, 200, FullBitsConvention::Matrix)
    }

    #[test]
    fn full_embedding_bits_column() {
        let r = full_report();
        assert_eq!(r.bits, 64_000_000);
        assert_eq!(r.compression_ratio, 1.0);
        let table = render_table(&[r]);
        assert!(table.contains("64000000"));
        assert!(table.lines().nth(2).unwrap().split_whitespace().any(|c| c == "-"));
    }

    #[test]
    fn structured_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let mut a = full_report();
        a.task_metric = Some(0.1 + 0.2);
        let layer = LayerSize::Kd { vocab: 10_000, k: 32, dims: 32, code_dim: 200, composer_params: 0 };
        let mut b = RunReport::new("kd", json!({"k": 32, "dims": 32}), layer, 200, FullBitsConvention::Matrix);
        b.reconstruction_error = Some(1.0 / 3.0);
        write_reports(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_reports(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn corrupted_reports_fail_the_check() {
        let layer = LayerSize::Kd { vocab: 100, k: 4, dims: 3, code_dim: 8, composer_params: 0 };
        let good = RunReport::new("kd", json!({"k": 4, "dims": 3}), layer, 8, FullBitsConvention::Matrix);
        good.check().unwrap();
        let mut tampered = good.clone();
        tampered.bits += 1;
        assert!(tampered.check().is_err());
        let mut wrong_config = good.clone();
        wrong_config.config = json!({"k": 8, "dims": 3});
        assert!(wrong_config.check().is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::report::RunReport;
use crate::Error;

/// Configuration axis varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    K,
    D,
    CodeDim,
    Composer,
    /// Guidance mode: `none`, `odg` or `pdg`.
    Guidance,
    /// Cumulative training-feature stages, from plain relaxation to full
    /// pre-trained distillation.
    Ablation,
}

impl SweepAxis {
    pub fn key(&self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::D => "dims",
            SweepAxis::CodeDim => "code_dim",
            SweepAxis::Composer => "composer",
            SweepAxis::Guidance => "guidance",
            SweepAxis::Ablation => "ablation",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "k" | "K" => Ok(SweepAxis::K),
            "d" | "D" | "dims" => Ok(SweepAxis::D),
            "code-dim" | "code_dim" | "d'" => Ok(SweepAxis::CodeDim),
            "composer" => Ok(SweepAxis::Composer),
            "guidance" => Ok(SweepAxis::Guidance),
            "ablation" => Ok(SweepAxis::Ablation),
            other => Err(Error::invalid(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Reports of the values that ran, and the errors of those that did not.
#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub reports: Vec<RunReport>,
    pub failures: Vec<(String, Error)>,
}

/// Runs `run` once per value in order; a failing value is recorded and the
/// sweep continues.
pub fn sweep<F>(axis: SweepAxis, values: &[String], mut run: F) -> SweepOutcome
where
    F: FnMut(SweepAxis, &str) -> crate::Result<RunReport>,
{
    let mut out = SweepOutcome::default();
    for v in values {
        match run(axis, v) {
            Ok(r) => out.reports.push(r),
            Err(e) => {
                log::warn!("sweep value {v} failed: {e}");
                out.failures.push((v.clone(), e));
            }
        }
    }
    out
}

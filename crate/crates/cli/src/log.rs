//! JSON-lines training log.

use std::fs;
use std::io::Write;
use std::path::Path;

use era_core::train::{LossValues, StepReport};
use era_core::Result;
use serde::{Deserialize, Serialize};

pub const LOG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl BetaSummary {
    pub fn of(beta: &[f64]) -> Option<Self> {
        if beta.is_empty() {
            return None;
        }
        Some(Self {
            min: beta.iter().copied().fold(f64::INFINITY, f64::min),
            mean: beta.iter().sum::<f64>() / beta.len() as f64,
            max: beta.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub schema: u32,
    pub iteration: u64,
    pub lr_scale: f64,
    pub train: LossValues,
    pub grad_norm: f64,
    pub val: Option<LossValues>,
    pub beta: Option<BetaSummary>,
    pub meta_grad_norm: Option<f64>,
    pub meta_discrepancy: Option<f64>,
}

impl LogLine {
    pub fn from_report(r: &StepReport) -> Self {
        let elro = r.elro.as_ref();
        Self {
            schema: LOG_SCHEMA,
            iteration: r.iteration,
            lr_scale: r.lr_scale,
            train: r.train,
            grad_norm: r.grad_norm,
            val: elro.map(|e| e.val),
            beta: elro.and_then(|e| BetaSummary::of(&e.beta_after)),
            meta_grad_norm: elro.map(|e| e.meta_grad.iter().map(|g| g * g).sum::<f64>().sqrt()),
            meta_discrepancy: elro.and_then(|e| e.meta_discrepancy),
        }
    }
}

/// Keeps only lines of iterations before `iteration`, dropping anything
/// written after the checkpoint being resumed (and unparsable tails).
pub fn truncate(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        match serde_json::from_str::<LogLine>(line) {
            Ok(l) if l.iteration < iteration => {
                kept.push_str(line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    era_core::checkpoint::write_atomic(path, kept.as_bytes())
}

pub fn append(file: &mut fs::File, line: &LogLine) -> Result<()> {
    let mut text = serde_json::to_string(line).expect("log line serialises");
    text.push('\n');
    file.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| era_core::Error::Format {
                what: "log line",
                detail: e.to_string(),
            })
        })
        .collect()
}

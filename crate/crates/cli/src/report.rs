//! Evaluation report written by `era eval`.

use std::fmt::Write as _;

use era_core::config::{hex, RunConfig};
use era_core::eval::{Evaluation, RatioAccuracy};
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub config_hash: String,
    pub architecture_hash: String,
    pub seed: u64,
    pub task_seed: u64,
    pub variant: String,
    pub checkpoint_iteration: u64,
    pub split: String,
}

impl RunMetadata {
    pub fn new(cfg: &RunConfig, checkpoint_iteration: u64, split: &str) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hex(&cfg.run_hash()),
            architecture_hash: hex(&cfg.architecture_hash()),
            seed: cfg.seed,
            task_seed: cfg.task.seed,
            variant: cfg.model.variant.name().to_string(),
            checkpoint_iteration,
            split: split.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub auc: f64,
    pub samples: usize,
    pub ratios: Vec<RatioAccuracy>,
}

impl EvalReport {
    pub fn new(metadata: RunMetadata, e: &Evaluation) -> Self {
        Self {
            schema_version: REPORT_SCHEMA,
            metadata,
            auc: e.auc,
            samples: e.samples,
            ratios: e.ratios.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Markdown table header for accuracies at ratios `1/n .. n/n`.
pub fn ratio_header(first: &str, segments: usize) -> String {
    let mut head = format!("| {first} | AUC |");
    let mut rule = String::from("|---|---|");
    for i in 1..=segments {
        let _ = write!(head, " {}% |", 100 * i / segments);
        rule.push_str("---|");
    }
    format!("{head}\n{rule}")
}

pub fn ratio_row(label: &str, auc: f64, accuracies: &[f64]) -> String {
    let mut row = format!("| {label} | {auc:.2} |");
    for a in accuracies {
        let _ = write!(row, " {a:.2} |");
    }
    row
}

pub fn summary_table(report: &EvalReport) -> String {
    let accs: Vec<f64> = report.ratios.iter().map(|r| r.accuracy).collect();
    format!(
        "{}\n{}",
        ratio_header("variant", accs.len()),
        ratio_row(&report.metadata.variant, report.auc, &accs)
    )
}

//! One-axis sweeps. Every row is an independent run from its own config and
//! the base seed, so any row can be reproduced alone with `era train`.

use era_core::config::RunConfig;
use era_core::data::{generate, Split};
use era_core::eval::{evaluate, Evaluation};
use era_core::model::Variant;
use era_core::train::Trainer;
use era_core::Result;
use serde::{Deserialize, Serialize};

use crate::args::Axis;
use crate::report::{ratio_header, ratio_row};

pub const ABLATION_SCHEMA: u32 = 1;
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: String,
    pub auc: f64,
    pub accuracies: Vec<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub axis: String,
    pub seed: u64,
    pub task_seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let segments = self.rows.first().map_or(0, |r| r.accuracies.len());
        let mut out = ratio_header(&self.axis, segments);
        for r in &self.rows {
            out.push('\n');
            out.push_str(&ratio_row(&r.label, r.auc, &r.accuracies));
        }
        out
    }
}

/// Labelled configurations of one sweep.
pub fn cells(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::ExpertRatio => [(0.0, "0:100"), (0.2, "20:80"), (0.6, "60:40"), (1.0, "100:0")]
            .into_iter()
            .map(|(r, label)| {
                (
                    label.to_string(),
                    with(&|c| {
                        c.model.variant = Variant::Era;
                        c.model.expert_ratio = r;
                    }),
                )
            })
            .collect(),
        Axis::BankSize => {
            let mut rows = vec![("baseline".to_string(), with(&|c| c.model.variant = Variant::Baseline))];
            for m in [1usize, 2, 5, 10] {
                rows.push((
                    format!("M={m}"),
                    with(&|c| {
                        c.model.variant = Variant::Era;
                        c.model.bank_size = m;
                    }),
                ));
            }
            rows
        }
        Axis::ReplacementFraction => [0.0, 0.25, 0.5, 1.0]
            .into_iter()
            .map(|f| {
                (
                    format!("f={f}"),
                    with(&|c| {
                        c.model.replacement_fraction = f;
                        c.model.variant = if f == 0.0 { Variant::Baseline } else { Variant::Era };
                    }),
                )
            })
            .collect(),
        Axis::GammaS => [0.05, 0.1, 0.2, 0.3]
            .into_iter()
            .map(|g| {
                (
                    format!("gamma_s={g}"),
                    with(&|c| {
                        c.model.variant = Variant::Era;
                        c.loss.gamma_s = g;
                    }),
                )
            })
            .collect(),
        Axis::Variant => [Variant::ExtraChannel, Variant::ExpertAvg, Variant::Era]
            .into_iter()
            .map(|v| (v.display_name().to_string(), with(&|c| c.model.variant = v)))
            .collect(),
    }
}

/// Trains `cfg` from scratch and evaluates it on the test split.
pub fn run_cell(cfg: &RunConfig) -> Result<(Trainer, Evaluation)> {
    let data = generate(&cfg.task)?;
    let mut trainer = Trainer::new(cfg, data)?;
    trainer.run(|_, _| Ok(()))?;
    let e = evaluate(&trainer.net, &trainer.data, Split::Test, EVAL_CHUNK)?;
    Ok((trainer, e))
}

pub fn row(label: &str, cfg: &RunConfig, e: &Evaluation) -> AblationRow {
    AblationRow {
        label: label.to_string(),
        variant: cfg.model.variant.name().to_string(),
        auc: e.auc,
        accuracies: e.ratios.iter().map(|r| r.accuracy).collect(),
        config_hash: era_core::config::hex(&cfg.run_hash()),
    }
}

/// Runs every cell, calling `progress` after each.
pub fn sweep(base: &RunConfig, axis: Axis, mut progress: impl FnMut(&AblationRow)) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (label, cfg) in cells(base, axis) {
        let (_, e) = run_cell(&cfg)?;
        let r = row(&label, &cfg, &e);
        progress(&r);
        rows.push(r);
    }
    Ok(AblationReport {
        schema_version: ABLATION_SCHEMA,
        axis: axis.name().to_string(),
        seed: base.seed,
        task_seed: base.task.seed,
        rows,
    })
}

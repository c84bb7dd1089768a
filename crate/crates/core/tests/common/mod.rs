#![allow(dead_code)]

use era_core::config::RunConfig;
use era_core::data::{generate, TaskSpec};
use era_core::model::BackboneConfig;
use era_core::train::{StepReport, Trainer};

/// A run small enough to train in well under a second.
pub fn small_run(elro: bool, freeze_beta: bool) -> RunConfig {
    let mut c = RunConfig {
        seed: 5,
        task: TaskSpec {
            classes: 4,
            frames: 16,
            segments: 4,
            features: 3,
            divergence_frame: 10,
            knot_spacing: 4,
            train_size: 96,
            val_size: 16,
            test_size: 32,
            ..TaskSpec::default()
        },
        model: BackboneConfig {
            widths: vec![6, 8, 8],
            strides: vec![1, 2, 1],
            classes: 4,
            replacement_fraction: 0.34,
            expert_ratio: 0.5,
            bank_size: 3,
            key_dim: Some(8),
            ..BackboneConfig::default()
        },
        ..RunConfig::default()
    };
    c.train.batch_size = 8;
    c.train.iterations = 12;
    c.train.elro = elro;
    c.train.freeze_beta = freeze_beta;
    c
}

pub fn trainer(cfg: &RunConfig) -> Trainer {
    Trainer::new(cfg, generate(&cfg.task).unwrap()).unwrap()
}

pub fn run(cfg: &RunConfig) -> (Trainer, Vec<StepReport>) {
    let mut t = trainer(cfg);
    let mut reports = Vec::new();
    t.run(|_, r| {
        reports.push(r.clone());
        Ok(())
    })
    .unwrap();
    (t, reports)
}

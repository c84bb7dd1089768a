//! Accuracy at every observation ratio and the AUC summary.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::era::SelectionStats;
use crate::error::{Error, Result};
use crate::model::Network;

/// Arithmetic mean of per-ratio accuracies.
pub fn auc(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::Invalid("AUC of an empty accuracy list".into()));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioAccuracy {
    pub segment: usize,
    pub ratio: f64,
    /// Percent in `[0, 100]`.
    pub accuracy: f64,
    /// Selections of every retrieving module at this ratio.
    pub histograms: Vec<ModuleHistogram>,
}

/// Selections of one ERA module over the evaluated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleHistogram {
    pub module: usize,
    pub layer: String,
    pub stats: SelectionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ratios: Vec<RatioAccuracy>,
    pub auc: f64,
    /// `confusion[ratio][true][predicted]`
    #[serde(skip)]
    pub confusion: Vec<Vec<Vec<u64>>>,
    #[serde(skip)]
    pub predictions: Vec<Vec<usize>>,
    pub samples: usize,
}

impl Evaluation {
    pub fn accuracy_at(&self, ratio: f64) -> Option<f64> {
        self.ratios
            .iter()
            .find(|r| (r.ratio - ratio).abs() < 1e-9)
            .map(|r| r.accuracy)
    }
}

/// Index of the largest logit in each row (ties to the lowest index).
pub fn predictions(logits: &[f64], classes: usize) -> Vec<usize> {
    logits.chunks(classes).map(crate::tensor::argmax).collect()
}

/// Evaluates `net` in eval mode on a split at every ratio `i / N`.
pub fn evaluate(net: &Network, data: &Dataset, split: Split, chunk: usize) -> Result<Evaluation> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    let classes = net.config.classes;
    if data.classes != classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, network predicts {classes}",
            data.classes
        )));
    }
    let modules = net.retrieving_modules();
    let mut ratios = Vec::with_capacity(data.segments);
    let mut confusion = Vec::with_capacity(data.segments);
    let mut all_predictions = Vec::with_capacity(data.segments);
    for segment in 1..=data.segments {
        let mut histograms: Vec<ModuleHistogram> = modules
            .iter()
            .enumerate()
            .map(|(i, m)| ModuleHistogram {
                module: i,
                layer: m.name.clone(),
                stats: SelectionStats::new(m.banks.len(), m.config.bank_size),
            })
            .collect();
        let mut conf = vec![vec![0u64; classes]; classes];
        let mut preds = Vec::with_capacity(samples.len());
        for block in samples.chunks(chunk.max(1)) {
            let refs: Vec<_> = block.iter().collect();
            let x = data.input_batch(net.config.input, &refs, &vec![segment; block.len()])?;
            let (logits, trace) = net.predict_with_trace(&x)?;
            let routed = trace.modules.iter().filter(|t| !t.records.is_empty());
            for (h, t) in histograms.iter_mut().zip(routed) {
                h.stats.add(t);
            }
            for (s, p) in block.iter().zip(predictions(logits.data(), classes)) {
                conf[s.label][p] += 1;
                preds.push(p);
            }
        }
        let correct: u64 = (0..classes).map(|c| conf[c][c]).sum();
        ratios.push(RatioAccuracy {
            segment,
            ratio: segment as f64 / data.segments as f64,
            accuracy: 100.0 * correct as f64 / samples.len() as f64,
            histograms,
        });
        confusion.push(conf);
        all_predictions.push(preds);
    }
    let accs: Vec<f64> = ratios.iter().map(|r| r.accuracy).collect();
    Ok(Evaluation {
        auc: auc(&accs)?,
        ratios,
        confusion,
        predictions: all_predictions,
        samples: samples.len(),
    })
}

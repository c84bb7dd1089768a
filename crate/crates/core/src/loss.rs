//! Classification loss with an expert-diversity term.
//!
//! The total objective is `L = L_CE - gamma_s * L_s`, where `L_s` sums the
//! squared distance between every ordered pair of expert kernels within a
//! bank, over all banks of all ERA modules. Keys do not enter `L_s`.

use serde::{Deserialize, Serialize};

use crate::era::EraModule;
use crate::error::{Error, Result};
use crate::tensor::{ParamVars, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma_s: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma_s: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_s >= 0.0 && self.gamma_s.is_finite()) {
            return Err(Error::config("gamma_s", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Batch-mean cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, labels)?)
}

/// `L_s` over every bank of `modules`. Banks with a single expert contribute
/// nothing; an empty module list yields a constant zero.
pub fn similarity_loss(tape: &mut Tape, vars: &ParamVars, modules: &[&EraModule]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for module in modules {
        for p in 0..module.banks.len() {
            if module.config.bank_size < 2 {
                continue;
            }
            let kernels = module.stacked_kernels(tape, vars, p)?;
            let d = tape.pairwise_sq_dist(kernels)?;
            total = Some(match total {
                Some(t) => tape.add(t, d)?,
                None => d,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(crate::tensor::Tensor::scalar(0.0)),
    })
}

/// Individual terms of the objective, kept for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub cross_entropy: Var,
    pub similarity: Var,
}

/// `L_CE - gamma_s * L_s`.
pub fn total_loss(tape: &mut Tape, logits: Var, labels: &[usize], vars: &ParamVars, modules: &[&EraModule], cfg: &LossConfig) -> Result<LossTerms> {
    let ce = cross_entropy(tape, logits, labels)?;
    let ls = similarity_loss(tape, vars, modules)?;
    let total = if cfg.gamma_s == 0.0 {
        ce
    } else {
        let scaled = tape.scale(ls, cfg.gamma_s);
        tape.sub(ce, scaled)?
    };
    Ok(LossTerms {
        total,
        cross_entropy: ce,
        similarity: ls,
    })
}

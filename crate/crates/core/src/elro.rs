//! Expert learning-rate optimisation.
//!
//! One iteration has three steps:
//!
//! 1. **Virtual training** on `D_train`: `w_hat = w - a * grad_w`,
//!    `E_hat = E - s * beta * grad_E`, with gradients at the current
//!    parameters and freshly sampled selection noise (recorded).
//! 2. **Meta step** on a disjoint `D_val`: the validation loss at
//!    `(w_hat, E_hat)` is differentiated with respect to every expert's
//!    `beta`, and `beta <- max(0, beta - a * dL_val/dbeta)`.
//! 3. **Real training** on `D_train` with the new `beta`, gradients taken
//!    again at the original parameters with the recorded noise replayed.
//!
//! Here `s` is the learning-rate schedule multiplier and `a = s * alpha`.
//! Because `E_hat` is linear in `beta` and `w_hat` does not depend on it,
//! the meta-gradient has the closed form `-s * <g_E, h_E>` where `g_E` is
//! the training gradient of the expert (key and kernel) and `h_E` the
//! validation gradient at the interim point. A second path differentiates
//! through the update on a tape; the two are compared on request.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{ExpertId, NetRouting, Network, RoutingTrace};
use crate::rng::Rng;
use crate::tensor::gradcheck::relative_error;
use crate::tensor::{ParamId, ParamVars, Tape, Tensor};
use crate::train::{gradients_at, param_values, GradEval, LossValues, Objective};

/// Per-expert learning rates for every ERA expert in a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaTable {
    pub alpha: f64,
    pub ids: Vec<ExpertId>,
    pub beta: Vec<f64>,
    /// `(key, kernel)` parameters of each entry.
    #[serde(skip)]
    pub params: Vec<[ParamId; 2]>,
    /// For every parameter of the network, the expert it belongs to.
    #[serde(skip)]
    pub owner: Vec<Option<usize>>,
}

impl BetaTable {
    /// One entry, initialised to `alpha`, per expert of every retrieving
    /// bank that holds at least two experts. Other experts train at `alpha`.
    pub fn new(net: &Network, alpha: f64) -> Self {
        let modules = net.era_modules();
        let experts: Vec<_> = net
            .experts()
            .into_iter()
            .filter(|(id, _)| {
                let m = modules[id.module];
                m.retrieves() && m.config.bank_size >= 2
            })
            .collect();
        let mut owner = vec![None; net.params.len()];
        let mut params = Vec::with_capacity(experts.len());
        for (k, (_, e)) in experts.iter().enumerate() {
            owner[e.key.0] = Some(k);
            owner[e.kernel.0] = Some(k);
            params.push([e.key, e.kernel]);
        }
        Self {
            alpha,
            ids: experts.iter().map(|(id, _)| *id).collect(),
            beta: vec![alpha; experts.len()],
            params,
            owner,
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn get(&self, id: ExpertId) -> Option<f64> {
        self.ids.iter().position(|&i| i == id).map(|k| self.beta[k])
    }

    /// Learning rate applied to parameter `p` at schedule multiplier `scale`.
    pub fn rate(&self, p: usize, scale: f64) -> f64 {
        match self.owner[p] {
            Some(k) => scale * self.beta[k],
            None => self.alpha * scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.beta.iter().position(|b| !(*b >= 0.0)) {
            return Err(Error::Invalid(format!("beta for {} is {}", self.ids[k].label(), self.beta[k])));
        }
        Ok(())
    }
}

/// Parameters after the virtual step; never written back to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct InterimModel {
    pub values: Vec<Tensor>,
}

/// `values - rate * grads`, parameter by parameter.
pub fn sgd_values(values: &[Tensor], grads: &[Tensor], beta: &BetaTable, scale: f64) -> Vec<Tensor> {
    values
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(p, (v, g))| {
            let mut out = v.clone();
            out.sub_scaled(g, beta.rate(p, scale));
            out
        })
        .collect()
}

/// In-place SGD update of the network parameters.
pub fn apply_update(net: &mut Network, beta: &BetaTable, grads: &[Tensor], scale: f64) {
    for (p, g) in grads.iter().enumerate() {
        let lr = beta.rate(p, scale);
        net.params.value_mut(ParamId(p)).sub_scaled(g, lr);
    }
}

/// Step 1. Returns the interim parameters and the gradients they came from.
pub fn virtual_train(
    net: &Network,
    beta: &BetaTable,
    objective: &Objective,
    x: &Tensor,
    labels: &[usize],
    noise: &mut Rng,
    scale: f64,
) -> Result<(InterimModel, GradEval)> {
    if labels.is_empty() {
        return Err(Error::Invalid("virtual_train: empty batch".into()));
    }
    let values = param_values(net);
    let g = gradients_at(net, objective, &values, x, labels, NetRouting::Sample(noise))?;
    Ok((
        InterimModel {
            values: sgd_values(&values, &g.grads, beta, scale),
        },
        g,
    ))
}

/// Outcome of the meta step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaStep {
    pub beta: Vec<f64>,
    pub meta_grad: Vec<f64>,
    pub val_loss: LossValues,
    pub val_trace: RoutingTrace,
    /// Largest relative difference between the closed form and autodiff.
    pub discrepancy: Option<f64>,
}

/// Closed-form meta-gradient `-s * <g_e, h_e>` for every expert.
pub fn closed_form_meta_gradient(beta: &BetaTable, train_grads: &[Tensor], val_grads: &[Tensor], scale: f64) -> Vec<f64> {
    beta.params
        .iter()
        .map(|ps| -scale * ps.iter().map(|p| train_grads[p.0].dot(&val_grads[p.0])).sum::<f64>())
        .collect()
}

/// Meta-gradient by differentiating the validation loss through
/// `E_hat = E - s * beta * g` on a tape. Validation selections are held at
/// `val_trace`.
pub fn autodiff_meta_gradient(
    net: &Network,
    beta: &BetaTable,
    objective: &Objective,
    interim: &InterimModel,
    train_grads: &[Tensor],
    x: &Tensor,
    labels: &[usize],
    val_trace: &RoutingTrace,
    scale: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let betas: Vec<_> = beta.beta.iter().map(|&b| tape.leaf(Tensor::scalar(b))).collect();
    let original = param_values(net);
    let mut vars = Vec::with_capacity(original.len());
    for (p, v) in original.into_iter().enumerate() {
        let var = match beta.owner[p] {
            Some(k) => {
                let rate = tape.scale(betas[k], scale);
                let g = tape.constant(train_grads[p].clone());
                let step = tape.scalar_mul(rate, g)?;
                let e = tape.constant(v);
                tape.sub(e, step)?
            }
            None => tape.constant(interim.values[p].clone()),
        };
        vars.push(var);
    }
    let vars = ParamVars::from_vec(vars);
    let xv = tape.constant(x.clone());
    let (total, _, _) = objective.record(net, &mut tape, &vars, xv, labels, NetRouting::Anchored(val_trace))?;
    let g = tape.backward(total)?;
    Ok(betas.iter().map(|&b| g.wrt(b, &[1]).item()).collect())
}

/// `max(0, beta - alpha * scale * meta_grad)` entry by entry.
pub fn updated_beta(beta: &BetaTable, meta_grad: &[f64], scale: f64) -> Vec<f64> {
    let lr = beta.alpha * scale;
    beta.beta
        .iter()
        .zip(meta_grad)
        .map(|(b, g)| (b - lr * g).max(0.0))
        .collect()
}

/// Step 2. `beta' = max(0, beta - a * dL_val/dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn meta_expert_opt(
    net: &Network,
    beta: &BetaTable,
    objective: &Objective,
    interim: &InterimModel,
    train: &GradEval,
    x: &Tensor,
    labels: &[usize],
    val_noise: &mut Rng,
    scale: f64,
    check_tolerance: Option<f64>,
) -> Result<MetaStep> {
    if labels.is_empty() {
        return Err(Error::Invalid("meta_expert_opt: empty validation batch".into()));
    }
    let val_objective = objective.validation();
    let h = gradients_at(net, &val_objective, &interim.values, x, labels, NetRouting::Sample(val_noise))?;
    let meta_grad = closed_form_meta_gradient(beta, &train.grads, &h.grads, scale);
    let discrepancy = match check_tolerance {
        Some(tol) => {
            let auto = autodiff_meta_gradient(net, beta, &val_objective, interim, &train.grads, x, labels, &h.trace, scale)?;
            let worst = meta_grad
                .iter()
                .zip(&auto)
                .map(|(c, a)| relative_error(*c, *a, 1e-15))
                .fold(0.0, f64::max);
            if worst > tol {
                return Err(Error::Invalid(format!(
                    "meta-gradient paths disagree: relative error {worst:e} exceeds {tol:e}"
                )));
            }
            Some(worst)
        }
        None => None,
    };
    Ok(MetaStep {
        beta: updated_beta(beta, &meta_grad, scale),
        meta_grad,
        val_loss: h.loss,
        val_trace: h.trace,
        discrepancy,
    })
}

/// Step 3. Gradients are recomputed at the current (original) parameters
/// with the virtual step's selection noise replayed, unless `reuse` is
/// given.
pub fn model_train_step(
    net: &mut Network,
    beta: &BetaTable,
    objective: &Objective,
    x: &Tensor,
    labels: &[usize],
    virtual_step: &GradEval,
    reuse: bool,
    scale: f64,
) -> Result<()> {
    if reuse {
        apply_update(net, beta, &virtual_step.grads, scale);
        return Ok(());
    }
    let values = param_values(net);
    let g = gradients_at(net, objective, &values, x, labels, NetRouting::Replay(&virtual_step.trace))?;
    if g.trace != virtual_step.trace {
        return Err(Error::Invalid("model_train_step: replayed selections differ from the virtual step".into()));
    }
    apply_update(net, beta, &g.grads, scale);
    Ok(())
}

/// Log record of one ELRO iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElroReport {
    pub val: LossValues,
    pub beta_before: Vec<f64>,
    pub beta_after: Vec<f64>,
    pub meta_grad: Vec<f64>,
    pub expert_grad_norm: f64,
    pub meta_discrepancy: Option<f64>,
}

pub struct IterationInputs<'a> {
    pub train_x: &'a Tensor,
    pub train_labels: &'a [usize],
    pub val_x: &'a Tensor,
    pub val_labels: &'a [usize],
    pub noise: &'a mut Rng,
    pub val_noise: &'a mut Rng,
    pub scale: f64,
    pub reuse_gradients: bool,
    pub check_meta: Option<f64>,
    pub freeze_beta: bool,
}

pub struct IterationOutput {
    pub train: LossValues,
    pub grad_norm: f64,
    pub report: ElroReport,
}

/// Rejects batches that share a sample.
pub fn assert_disjoint(train: &Batch, val: &Batch) -> Result<()> {
    let mut a = train.indices.clone();
    a.sort_unstable();
    if let Some(i) = val.indices.iter().find(|i| a.binary_search(i).is_ok()) {
        return Err(Error::Invalid(format!("sample {i} is in both D_train and D_val")));
    }
    Ok(())
}

/// All three steps on pre-drawn batches.
pub fn elro_iteration(net: &mut Network, beta: &mut BetaTable, objective: &Objective, inp: IterationInputs<'_>) -> Result<IterationOutput> {
    let (interim, g) = virtual_train(net, beta, objective, inp.train_x, inp.train_labels, inp.noise, inp.scale)?;
    let meta = meta_expert_opt(
        net,
        beta,
        objective,
        &interim,
        &g,
        inp.val_x,
        inp.val_labels,
        inp.val_noise,
        inp.scale,
        inp.check_meta,
    )?;
    let before = beta.beta.clone();
    if !inp.freeze_beta {
        beta.beta = meta.beta.clone();
    }
    model_train_step(net, beta, objective, inp.train_x, inp.train_labels, &g, inp.reuse_gradients, inp.scale)?;
    let expert_grad_norm = beta
        .params
        .iter()
        .flatten()
        .map(|p| g.grads[p.0].norm_sq())
        .sum::<f64>()
        .sqrt();
    Ok(IterationOutput {
        train: g.loss,
        grad_norm: g.norm(),
        report: ElroReport {
            val: meta.val_loss,
            beta_before: before,
            beta_after: beta.beta.clone(),
            meta_grad: meta.meta_grad,
            expert_grad_norm,
            meta_discrepancy: meta.discrepancy,
        },
    })
}

//! Training objective, SGD updates and the run loop.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Batch, BatchStream, Dataset};
use crate::elro::{self, BetaTable, ElroReport};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::model::{InputKind, NetRouting, Network, RoutingTrace};
use crate::rng::{self, Rng};
use crate::tensor::{ParamVars, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Base learning rate `alpha`; also the initial expert rate and the
    /// meta step size.
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub elro: bool,
    /// Run the ELRO steps but keep every beta at its initial value.
    pub freeze_beta: bool,
    /// Iterations at which the learning-rate scale is multiplied by `lr_decay`.
    pub lr_milestones: Vec<u64>,
    pub lr_decay: f64,
    /// L2 penalty on expert kernels of banks with at least two experts.
    pub weight_decay: f64,
    /// Expert kernels (banks with at least two experts) are projected back
    /// onto this L2 ball after every real update.
    pub expert_max_norm: Option<f64>,
    /// Reuse the virtual step's gradients for the real update instead of
    /// recomputing them. The result is bitwise identical.
    pub reuse_virtual_gradients: bool,
    /// Verify the closed-form meta-gradient against autodiff every this
    /// many iterations (0 disables the check).
    pub meta_check_every: u64,
    pub meta_check_tolerance: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            batch_size: 32,
            iterations: 1500,
            elro: true,
            freeze_beta: false,
            lr_milestones: vec![1000],
            lr_decay: 0.1,
            weight_decay: 1e-4,
            expert_max_norm: Some(2.0),
            reuse_virtual_gradients: false,
            meta_check_every: 1,
            meta_check_tolerance: 1e-8,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config("lr_decay", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.expert_max_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("expert_max_norm", "must be positive"));
            }
        }
        if !(self.meta_check_tolerance > 0.0) {
            return Err(Error::config("meta_check_tolerance", "must be positive"));
        }
        Ok(())
    }

    /// Multiplier applied to every learning rate at `iteration`.
    pub fn lr_scale(&self, iteration: u64) -> f64 {
        self.lr_milestones
            .iter()
            .filter(|&&m| iteration >= m)
            .fold(1.0, |s, _| s * self.lr_decay)
    }
}

/// Loss terms evaluated on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cross_entropy: f64,
    pub similarity: f64,
}

/// `L_CE - gamma_s * L_s + (lambda / 2) * sum ||m||^2` on the tape.
pub struct Objective {
    pub loss: LossConfig,
    pub weight_decay: f64,
}

impl Objective {
    pub fn new(loss: &LossConfig, train: &TrainConfig) -> Self {
        Self {
            loss: *loss,
            weight_decay: train.weight_decay,
        }
    }

    /// Cross-entropy alone; the meta step scores the interim model with it.
    pub fn validation(&self) -> Self {
        Self {
            loss: LossConfig { gamma_s: 0.0 },
            weight_decay: 0.0,
        }
    }

    pub fn record(
        &self,
        net: &Network,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        labels: &[usize],
        routing: NetRouting<'_>,
    ) -> Result<(Var, LossVars, RoutingTrace)> {
        let (logits, trace) = net.forward(tape, vars, x, routing)?;
        let modules = net.era_modules();
        let terms = total_loss(tape, logits, labels, vars, &modules, &self.loss)?;
        let mut total = terms.total;
        if self.weight_decay > 0.0 {
            let mut penalty: Option<Var> = None;
            for m in &modules {
                if m.config.bank_size < 2 {
                    continue;
                }
                for (_, _, e) in m.experts() {
                    let k = vars[e.kernel];
                    let sq = tape.mul(k, k)?;
                    let s = tape.sum(sq);
                    penalty = Some(match penalty {
                        Some(p) => tape.add(p, s)?,
                        None => s,
                    });
                }
            }
            if let Some(p) = penalty {
                let scaled = tape.scale(p, 0.5 * self.weight_decay);
                total = tape.add(total, scaled)?;
            }
        }
        Ok((
            total,
            LossVars {
                cross_entropy: terms.cross_entropy,
                similarity: terms.similarity,
            },
            trace,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cross_entropy: Var,
    pub similarity: Var,
}

/// Loss value, gradient for every parameter (store order) and the routing
/// trace of one forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEval {
    pub loss: LossValues,
    pub grads: Vec<Tensor>,
    pub trace: RoutingTrace,
}

impl GradEval {
    pub fn norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }
}

/// Evaluate the objective and its gradient at `values`.
pub fn gradients_at(
    net: &Network,
    objective: &Objective,
    values: &[Tensor],
    x: &Tensor,
    labels: &[usize],
    routing: NetRouting<'_>,
) -> Result<GradEval> {
    if labels.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::from_vec(values.iter().map(|v| tape.leaf(v.clone())).collect());
    let xv = tape.constant(x.clone());
    let (total, parts, trace) = objective.record(net, &mut tape, &vars, xv, labels, routing)?;
    let g = tape.backward(total)?;
    let grads = values
        .iter()
        .zip(vars.as_slice())
        .map(|(v, &var)| g.wrt(var, v.shape()))
        .collect();
    Ok(GradEval {
        loss: LossValues {
            total: tape.value(total).item(),
            cross_entropy: tape.value(parts.cross_entropy).item(),
            similarity: tape.value(parts.similarity).item(),
        },
        grads,
        trace,
    })
}

pub fn param_values(net: &Network) -> Vec<Tensor> {
    net.params.iter().map(|(_, p)| p.value.clone()).collect()
}

/// Input tensor and labels for a batch of split samples.
pub fn prepare_batch(data: &Dataset, samples: &[crate::data::SequenceSample], kind: InputKind, batch: &Batch) -> Result<(Tensor, Vec<usize>)> {
    let refs: Vec<_> = batch.indices.iter().map(|&i| &samples[i]).collect();
    let x = data.input_batch(kind, &refs, &batch.segments)?;
    let labels = refs.iter().map(|s| s.label).collect();
    Ok((x, labels))
}

/// Rescale expert kernels of banks with at least two experts onto the ball
/// of radius `max_norm`.
pub fn project_expert_kernels(net: &mut Network, max_norm: f64) {
    let ids: Vec<_> = net
        .era_modules()
        .into_iter()
        .filter(|m| m.config.bank_size >= 2)
        .flat_map(|m| m.experts().map(|(_, _, e)| e.kernel).collect::<Vec<_>>())
        .collect();
    for id in ids {
        let v = net.params.value_mut(id);
        let n = v.norm_sq().sqrt();
        if n > max_norm {
            let s = max_norm / n;
            v.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub lr_scale: f64,
    pub train: LossValues,
    pub grad_norm: f64,
    pub elro: Option<ElroReport>,
}

/// Serialisable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(r: &Rng) -> Self {
        Self {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        use rand::SeedableRng;
        let mut r = Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// A training run: network, expert learning rates, data and random streams.
#[derive(Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub net: Network,
    pub beta: BetaTable,
    pub data: Dataset,
    pub batches: BatchStream,
    pub noise_rng: Rng,
    pub val_noise_rng: Rng,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: &RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let net = Network::build(&config.model, config.input_shape(), config.seed)?;
        let beta = BetaTable::new(&net, config.train.alpha);
        let batches = BatchStream::new(
            data.train.len(),
            config.train.batch_size,
            data.segments,
            config.seed,
            config.train.elro,
        )?;
        Ok(Self {
            config: config.clone(),
            net,
            beta,
            data,
            batches,
            noise_rng: rng::stream(rng::derive(config.seed, 0x4000), 0),
            val_noise_rng: rng::stream(rng::derive(config.seed, 0x4000), 1),
            iteration: 0,
        })
    }

    pub fn objective(&self) -> Objective {
        Objective::new(&self.config.loss, &self.config.train)
    }

    /// One plain SGD step or one ELRO iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let pair = self.batches.next_pair();
        let kind = self.config.model.input;
        let (x, labels) = prepare_batch(&self.data, &self.data.train, kind, &pair.train)?;
        let scale = self.config.train.lr_scale(self.iteration);
        let objective = self.objective();
        // with no beta entries the three ELRO steps reduce to one SGD step
        let report = if self.config.train.elro && !self.beta.is_empty() {
            let val = pair
                .val
                .as_ref()
                .ok_or_else(|| Error::Invalid("ELRO needs a validation batch".into()))?;
            elro::assert_disjoint(&pair.train, val)?;
            let (xv, lv) = prepare_batch(&self.data, &self.data.train, kind, val)?;
            let check = self.config.train.meta_check_every > 0 && self.iteration % self.config.train.meta_check_every == 0;
            let out = elro::elro_iteration(
                &mut self.net,
                &mut self.beta,
                &objective,
                elro::IterationInputs {
                    train_x: &x,
                    train_labels: &labels,
                    val_x: &xv,
                    val_labels: &lv,
                    noise: &mut self.noise_rng,
                    val_noise: &mut self.val_noise_rng,
                    scale,
                    reuse_gradients: self.config.train.reuse_virtual_gradients,
                    check_meta: check.then_some(self.config.train.meta_check_tolerance),
                    freeze_beta: self.config.train.freeze_beta,
                },
            )?;
            StepReport {
                iteration: self.iteration,
                lr_scale: scale,
                train: out.train,
                grad_norm: out.grad_norm,
                elro: Some(out.report),
            }
        } else {
            let values = param_values(&self.net);
            let g = gradients_at(&self.net, &objective, &values, &x, &labels, NetRouting::Sample(&mut self.noise_rng))?;
            elro::apply_update(&mut self.net, &self.beta, &g.grads, scale);
            StepReport {
                iteration: self.iteration,
                lr_scale: scale,
                train: g.loss,
                grad_norm: g.norm(),
                elro: None,
            }
        };
        if let Some(c) = self.config.train.expert_max_norm {
            project_expert_kernels(&mut self.net, c);
        }
        self.iteration += 1;
        if !report.train.total.is_finite() {
            return Err(Error::Invalid(format!("training diverged at iteration {}", report.iteration)));
        }
        Ok(report)
    }

    /// Run until `config.train.iterations`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.train.iterations {
            let r = self.step()?;
            on_step(self, &r)?;
        }
        Ok(())
    }

    pub fn rng_states(&self) -> Vec<(String, RngState)> {
        vec![
            ("batch".into(), RngState::capture(&self.batches.batch_rng)),
            ("ratio".into(), RngState::capture(&self.batches.ratio_rng)),
            ("val".into(), RngState::capture(&self.batches.val_rng)),
            ("noise".into(), RngState::capture(&self.noise_rng)),
            ("val_noise".into(), RngState::capture(&self.val_noise_rng)),
        ]
    }

    pub fn set_rng_states(&mut self, states: &[(String, RngState)]) -> Result<()> {
        for (name, s) in states {
            let slot = match name.as_str() {
                "batch" => &mut self.batches.batch_rng,
                "ratio" => &mut self.batches.ratio_rng,
                "val" => &mut self.batches.val_rng,
                "noise" => &mut self.noise_rng,
                "val_noise" => &mut self.val_noise_rng,
                other => {
                    return Err(Error::Format {
                        what: "checkpoint",
                        detail: format!("unknown rng stream `{other}`"),
                    })
                }
            };
            *slot = s.restore();
        }
        Ok(())
    }
}

//! Expert retrieval and assembly convolution.
//!
//! An [`EraModule`] replaces a convolution with `N_out` output channels. The
//! first `N_out - d` channels use a shared (non-expert) kernel block. Each of
//! the remaining `d` channels has an [`ExpertBank`] of `M` candidate
//! experts, each a `(key, kernel)` pair. For every sample and bank, a query
//! is computed from the pooled input, matched against the keys by dot
//! product, and the best-scoring expert's kernel is retrieved. The retrieved
//! kernels are concatenated after the non-expert block and the sample is
//! convolved with its own assembled kernel.
//!
//! Retrieval is a straight-through relaxed argmax: the forward value is a
//! hard one-hot selection, the backward pass uses the Gumbel-softmax
//! Jacobian. Kernel gradients are therefore exactly zero for experts that no
//! sample selected, while keys and query mappers still receive gradient
//! through the relaxation.

use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{argmax, softmax, ParamId, ParamStore, ParamVars, SelectionAnchor, Tape, Tensor, Var};

/// Spatial layout of a convolution: one entry per spatial axis (1 or 2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvSpec {
    /// Stride 1 with "same" padding for odd kernels.
    pub fn same(kernel: &[usize]) -> Self {
        Self {
            kernel: kernel.to_vec(),
            stride: vec![1; kernel.len()],
            padding: kernel.iter().map(|k| k / 2).collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if !(1..=2).contains(&r) || self.stride.len() != r || self.padding.len() != r {
            return Err(Error::config("kernel", "expected 1 or 2 spatial axes with matching stride/padding"));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::config("kernel", "kernel sizes and strides must be positive"));
        }
        Ok(())
    }

    /// Kernel tensor shape for `out` output channels over `c_in` inputs.
    pub fn kernel_shape(&self, out: usize, c_in: usize) -> Vec<usize> {
        let mut s = vec![out, c_in];
        s.extend_from_slice(&self.kernel);
        s
    }

    /// Convolve with a shared `[O, C, ...]` kernel.
    pub fn apply(&self, tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
        Ok(match self.rank() {
            1 => tape.conv1d(x, kernel, self.stride[0], self.padding[0])?,
            _ => tape.conv2d(
                x,
                kernel,
                (self.stride[0], self.stride[1]),
                (self.padding[0], self.padding[1]),
            )?,
        })
    }

    /// Convolve each sample with its own `[B, O, C, ...]` kernel.
    pub fn apply_per_sample(&self, tape: &mut Tape, x: Var, kernels: Var) -> Result<Var> {
        Ok(match self.rank() {
            1 => tape.conv1d_per_sample(x, kernels, self.stride[0], self.padding[0])?,
            _ => tape.conv2d_per_sample(
                x,
                kernels,
                (self.stride[0], self.stride[1]),
                (self.padding[0], self.padding[1]),
            )?,
        })
    }
}

/// Draws a He-normal static kernel. Shared with plain convolutions so that a
/// single-expert ERA module starts from exactly the same weights.
pub fn init_static_kernel(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng::normal(rng, std))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub conv: ConvSpec,
    /// Expert channel count `d`.
    pub expert_channels: usize,
    /// Candidates per bank `M`.
    pub bank_size: usize,
    /// Key and query dimensionality `K`.
    pub key_dim: usize,
    pub gumbel_temperature: f64,
}

impl EraConfig {
    /// Defaults: `d = max(1, round(ratio * n_out))` (0 when `ratio == 0`),
    /// `M = 5`, `K = 64` shrunk to `min(64, 4 * n_in)` for `n_out < 64`,
    /// temperature 1.
    pub fn with_ratio(n_in: usize, n_out: usize, conv: ConvSpec, expert_ratio: f64) -> Self {
        let d = if expert_ratio <= 0.0 {
            0
        } else {
            ((expert_ratio * n_out as f64).round() as usize).clamp(1, n_out)
        };
        let key_dim = if n_out < 64 { 64.min(4 * n_in) } else { 64 };
        Self {
            n_in,
            n_out,
            conv,
            expert_channels: d,
            bank_size: 5,
            key_dim,
            gumbel_temperature: 1.0,
        }
    }

    pub fn nonexpert_channels(&self) -> usize {
        self.n_out - self.expert_channels
    }

    /// Flattened length of one expert kernel (`C_in * b_h * b_w`).
    pub fn expert_kernel_len(&self) -> usize {
        self.n_in * self.conv.kernel_volume()
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        if self.n_in == 0 || self.n_out == 0 {
            return Err(Error::config("channels", "n_in and n_out must be positive"));
        }
        if self.expert_channels > self.n_out {
            return Err(Error::config("expert_channels", format!("d = {} exceeds n_out = {}", self.expert_channels, self.n_out)));
        }
        if self.bank_size == 0 {
            return Err(Error::config("bank_size", "M must be at least 1"));
        }
        if self.key_dim == 0 {
            return Err(Error::config("key_dim", "K must be positive"));
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return Err(Error::config("gumbel_temperature", "must be positive"));
        }
        Ok(())
    }

    /// Enforces `K < C_in * spatial_volume` for a given input extent.
    pub fn validate_for_input(&self, spatial: &[usize]) -> Result<()> {
        let volume: usize = self.n_in * spatial.iter().product::<usize>();
        if self.expert_channels > 0 && self.key_dim >= volume {
            return Err(Error::config(
                "key_dim",
                format!("K = {} must be smaller than C_in*H*W = {volume}", self.key_dim),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expert {
    pub key: ParamId,
    pub kernel: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertBank {
    pub index: usize,
    pub experts: Vec<Expert>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryMapper {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// How a module combines the experts of a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assembly {
    /// Key-query retrieval of a single expert per sample.
    Retrieve,
    /// Uniform average over all experts; no routing.
    Average,
}

/// One sample's routing decision in one bank.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub sample: usize,
    pub bank: usize,
    pub index: usize,
    pub scores: Vec<f64>,
    /// `softmax((scores + noise) / temperature)`.
    pub relaxed: Vec<f64>,
    pub noise: Option<Vec<f64>>,
}

impl SelectionRecord {
    pub fn logits(&self) -> Vec<f64> {
        match &self.noise {
            Some(n) => self.scores.iter().zip(n).map(|(s, g)| s + g).collect(),
            None => self.scores.clone(),
        }
    }
}

/// All selection records a module produced in one forward pass, stored
/// bank-major (`records[bank * batch + sample]`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModuleTrace {
    pub batch: usize,
    pub records: Vec<SelectionRecord>,
}

impl ModuleTrace {
    pub fn record(&self, bank: usize, sample: usize) -> &SelectionRecord {
        &self.records[bank * self.batch + sample]
    }

    fn bank_noise(&self, bank: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for b in 0..self.batch {
            match &self.record(bank, b).noise {
                Some(n) => out.extend_from_slice(n),
                None => return Err(Error::Invalid("replayed trace carries no noise".into())),
            }
        }
        Ok(out)
    }

    fn bank_anchor(&self, bank: usize) -> SelectionAnchor {
        let mut anchor = SelectionAnchor {
            indices: Vec::with_capacity(self.batch),
            soft: Vec::new(),
        };
        for b in 0..self.batch {
            let r = self.record(bank, b);
            anchor.indices.push(r.index);
            anchor.soft.extend_from_slice(&r.relaxed);
        }
        anchor
    }

    /// Restrict to the given samples (renumbered in the given order).
    pub fn select_samples(&self, samples: &[usize]) -> Self {
        let banks = if self.batch == 0 { 0 } else { self.records.len() / self.batch };
        let mut records = Vec::with_capacity(banks * samples.len());
        for p in 0..banks {
            for (new, &old) in samples.iter().enumerate() {
                let mut r = self.record(p, old).clone();
                r.sample = new;
                records.push(r);
            }
        }
        Self {
            batch: samples.len(),
            records,
        }
    }
}

/// Routing behaviour of one forward pass through a module.
pub enum ModuleRouting<'a> {
    /// Noiseless argmax, no gradient path through the selection.
    Eval,
    /// Draw fresh Gumbel noise.
    Sample(&'a mut Rng),
    /// Reuse previously drawn noise; selections are recomputed.
    Replay(&'a ModuleTrace),
    /// Reuse noise and freeze selections at the recorded anchor.
    Anchored(&'a ModuleTrace),
}

/// Selection mode for [`select_expert`].
pub enum SelectMode<'a> {
    Eval,
    Train { noise: &'a [f64] },
    Anchored { noise: &'a [f64], anchor: &'a SelectionAnchor },
}

/// Relaxed argmax over rows of `scores [B, M]`.
///
/// Returns the selection weights `y` (forward value one-hot), the selected
/// indices, and the relaxed probabilities per row.
pub fn select_expert(tape: &mut Tape, scores: Var, mode: SelectMode<'_>, temperature: f64) -> Result<(Var, Vec<usize>, Vec<f64>)> {
    let shape = tape.shape(scores).to_vec();
    let m = shape[1];
    let sv = tape.value(scores).data().to_vec();
    if sv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite matching scores".into()));
    }
    match mode {
        SelectMode::Eval => {
            let mut onehot = Tensor::zeros(&shape);
            let mut indices = Vec::with_capacity(shape[0]);
            let mut relaxed = Vec::with_capacity(sv.len());
            for (r, row) in sv.chunks(m).enumerate() {
                let i = argmax(row);
                onehot.data_mut()[r * m + i] = 1.0;
                indices.push(i);
                relaxed.extend(softmax(row, temperature));
            }
            Ok((tape.constant(onehot), indices, relaxed))
        }
        SelectMode::Train { noise } => {
            let (y, idx) = tape.straight_through(scores, noise, temperature, None)?;
            let relaxed = relaxed_rows(&sv, noise, m, temperature);
            Ok((y, idx, relaxed))
        }
        SelectMode::Anchored { noise, anchor } => {
            let (y, idx) = tape.straight_through(scores, noise, temperature, Some(anchor))?;
            let relaxed = relaxed_rows(&sv, noise, m, temperature);
            Ok((y, idx, relaxed))
        }
    }
}

fn relaxed_rows(scores: &[f64], noise: &[f64], m: usize, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = scores.iter().zip(noise).map(|(s, g)| s + g).collect();
    logits.chunks(m).flat_map(|row| softmax(row, temperature)).collect()
}

/// Draw `n` i.i.d. Gumbel(0, 1) values.
pub fn gumbel_noise(rng: &mut Rng, n: usize) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    (0..n).map(|_| g.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EraModule {
    pub name: String,
    pub config: EraConfig,
    pub assembly: Assembly,
    /// `None` when every channel is an expert channel.
    pub nonexpert: Option<ParamId>,
    pub banks: Vec<ExpertBank>,
    pub mappers: Vec<QueryMapper>,
}

impl EraModule {
    /// Register all parameters under `name`.
    ///
    /// The non-expert rows and the first expert of every bank are the rows
    /// of a static kernel drawn from `static_rng`, so an `M = 1` module
    /// starts identical to the convolution it replaces. The remaining
    /// experts come from `expert_rng`, keys and query mappers from
    /// `routing_rng`.
    pub fn new(
        name: &str,
        config: EraConfig,
        assembly: Assembly,
        store: &mut ParamStore,
        static_rng: &mut Rng,
        expert_rng: &mut Rng,
        routing_rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (c, d, m, k) = (config.n_in, config.expert_channels, config.bank_size, config.key_dim);
        let ne = config.nonexpert_channels();
        let kl = config.expert_kernel_len();
        let full = init_static_kernel(static_rng, &config.conv.kernel_shape(config.n_out, c));
        let nonexpert = if ne > 0 {
            let rows = Tensor::new(config.conv.kernel_shape(ne, c), full.data()[..ne * kl].to_vec())?;
            Some(store.register(format!("{name}.nonexpert"), rows)?)
        } else {
            None
        };
        let per_kernel_shape = config.conv.kernel_shape(1, c)[1..].to_vec();
        let key_std = (1.0 / k as f64).sqrt();
        let map_std = (1.0 / c as f64).sqrt();
        let mut banks = Vec::with_capacity(d);
        let mut mappers = Vec::with_capacity(d);
        for p in 0..d {
            let weight = store.register(
                format!("{name}.bank{p}.query.weight"),
                Tensor::from_fn(&[k, c], |_| rng::normal(routing_rng, map_std)),
            )?;
            let bias = store.register(format!("{name}.bank{p}.query.bias"), Tensor::zeros(&[k]))?;
            mappers.push(QueryMapper { weight, bias });
            let mut experts = Vec::with_capacity(m);
            for i in 0..m {
                let kernel = if i == 0 {
                    let start = (ne + p) * kl;
                    Tensor::new(per_kernel_shape.clone(), full.data()[start..start + kl].to_vec())?
                } else {
                    let mut shape = vec![1];
                    shape.extend_from_slice(&per_kernel_shape);
                    init_static_kernel(expert_rng, &shape).reshaped(&per_kernel_shape)?
                };
                let kernel = store.register(format!("{name}.bank{p}.expert{i}.kernel"), kernel)?;
                let key = store.register(
                    format!("{name}.bank{p}.expert{i}.key"),
                    Tensor::from_fn(&[k], |_| rng::normal(routing_rng, key_std)),
                )?;
                experts.push(Expert { key, kernel });
            }
            banks.push(ExpertBank { index: p, experts });
        }
        Ok(Self {
            name: name.to_string(),
            config,
            assembly,
            nonexpert,
            banks,
            mappers,
        })
    }

    pub fn retrieves(&self) -> bool {
        self.assembly == Assembly::Retrieve && !self.banks.is_empty()
    }

    /// Query `q^p = W_p * pool(X) + b_p`, shape `[B, K]`.
    pub fn compute_query(&self, tape: &mut Tape, vars: &ParamVars, pooled: Var, bank: usize) -> Result<Var> {
        let m = &self.mappers[bank];
        Ok(tape.linear(pooled, vars[m.weight], vars[m.bias])?)
    }

    /// Keys of a bank stacked as `[M, K]`.
    pub fn stacked_keys(&self, tape: &mut Tape, vars: &ParamVars, bank: usize) -> Result<Var> {
        let k = self.config.key_dim;
        let rows = self.banks[bank]
            .experts
            .iter()
            .map(|e| tape.reshape(vars[e.key], &[1, k]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.concat(&rows, 0)?)
    }

    /// Kernels of a bank flattened and stacked as `[M, C_in * b_h * b_w]`.
    pub fn stacked_kernels(&self, tape: &mut Tape, vars: &ParamVars, bank: usize) -> Result<Var> {
        let kl = self.config.expert_kernel_len();
        let rows = self.banks[bank]
            .experts
            .iter()
            .map(|e| tape.reshape(vars[e.kernel], &[1, kl]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.concat(&rows, 0)?)
    }

    /// Scores `s_i = q^T k_i`, shape `[B, M]`.
    pub fn match_scores(&self, tape: &mut Tape, vars: &ParamVars, query: Var, bank: usize) -> Result<Var> {
        let keys = self.stacked_keys(tape, vars, bank)?;
        if tape.shape(query)[1] != tape.shape(keys)[1] {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "match_scores",
                lhs: tape.shape(query).to_vec(),
                rhs: tape.shape(keys).to_vec(),
            }
            .into());
        }
        Ok(tape.matmul_nt(query, keys)?)
    }

    /// `W_expert [B, d, C_in * b_h * b_w]` from per-bank selection weights.
    pub fn assemble_expert_block(&self, tape: &mut Tape, vars: &ParamVars, weights: &[Var]) -> Result<Var> {
        if weights.len() != self.banks.len() {
            return Err(Error::Invalid(format!(
                "assemble_expert_block: {} weight sets for {} banks",
                weights.len(),
                self.banks.len()
            )));
        }
        let kl = self.config.expert_kernel_len();
        let mut parts = Vec::with_capacity(weights.len());
        for (p, &y) in weights.iter().enumerate() {
            let bank = self.stacked_kernels(tape, vars, p)?;
            let mixed = tape.mix(y, bank)?;
            let b = tape.shape(mixed)[0];
            parts.push(tape.reshape(mixed, &[b, 1, kl])?);
        }
        Ok(tape.concat(&parts, 1)?)
    }

    /// `W_ERA [B, N_out, C_in, ...]`: non-expert rows first, then the expert block.
    pub fn assemble_era_kernel(&self, tape: &mut Tape, vars: &ParamVars, expert_block: Option<Var>, batch: usize) -> Result<Var> {
        let cfg = &self.config;
        let kl = cfg.expert_kernel_len();
        let mut parts = Vec::with_capacity(2);
        if let Some(ne) = self.nonexpert {
            let flat = tape.reshape(vars[ne], &[cfg.nonexpert_channels(), kl])?;
            parts.push(tape.broadcast_batch(flat, batch)?);
        }
        if let Some(block) = expert_block {
            let s = tape.shape(block).to_vec();
            if s != [batch, cfg.expert_channels, kl] {
                return Err(crate::tensor::TensorError::ShapeMismatch {
                    op: "assemble_era_kernel",
                    lhs: s,
                    rhs: vec![batch, cfg.expert_channels, kl],
                }
                .into());
            }
            parts.push(block);
        }
        let kernel = tape.concat(&parts, 1)?;
        let mut shape = vec![batch];
        shape.extend(cfg.conv.kernel_shape(cfg.n_out, cfg.n_in));
        Ok(tape.reshape(kernel, &shape)?)
    }

    /// Per-sample dynamic convolution. Returns the output and the routing
    /// trace (empty for averaging modules and for `d = 0`).
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var, routing: ModuleRouting<'_>) -> Result<(Var, ModuleTrace)> {
        let xs = tape.shape(x).to_vec();
        let cfg = &self.config;
        if xs.len() != cfg.conv.rank() + 2 || xs[1] != cfg.n_in {
            return Err(Error::Invalid(format!(
                "{}: expected input [B, {}, ..] of rank {}, got {xs:?}",
                self.name,
                cfg.n_in,
                cfg.conv.rank() + 2
            )));
        }
        let batch = xs[0];
        let m = cfg.bank_size;
        let mut trace = ModuleTrace {
            batch,
            records: Vec::new(),
        };
        let block = if self.banks.is_empty() {
            None
        } else {
            let mut weights = Vec::with_capacity(self.banks.len());
            match self.assembly {
                Assembly::Average => {
                    for _ in &self.banks {
                        weights.push(tape.constant(Tensor::full(&[batch, m], 1.0 / m as f64)));
                    }
                }
                Assembly::Retrieve => {
                    let pooled = tape.mean_pool_spatial(x)?;
                    let mut routing = routing;
                    for p in 0..self.banks.len() {
                        let q = self.compute_query(tape, vars, pooled, p)?;
                        let s = self.match_scores(tape, vars, q, p)?;
                        let (y, indices, relaxed, noise) = match &mut routing {
                            ModuleRouting::Sample(r) => {
                                let noise = gumbel_noise(r, batch * m);
                                let (y, i, rel) =
                                    select_expert(tape, s, SelectMode::Train { noise: &noise }, cfg.gumbel_temperature)?;
                                (y, i, rel, Some(noise))
                            }
                            ModuleRouting::Replay(t) => {
                                let noise = t.bank_noise(p)?;
                                let (y, i, rel) =
                                    select_expert(tape, s, SelectMode::Train { noise: &noise }, cfg.gumbel_temperature)?;
                                (y, i, rel, Some(noise))
                            }
                            ModuleRouting::Anchored(t) => {
                                let noise = t.bank_noise(p)?;
                                let anchor = t.bank_anchor(p);
                                let (y, i, rel) = select_expert(
                                    tape,
                                    s,
                                    SelectMode::Anchored {
                                        noise: &noise,
                                        anchor: &anchor,
                                    },
                                    cfg.gumbel_temperature,
                                )?;
                                (y, i, rel, Some(noise))
                            }
                            ModuleRouting::Eval => {
                                let (y, i, rel) = select_expert(tape, s, SelectMode::Eval, cfg.gumbel_temperature)?;
                                (y, i, rel, None)
                            }
                        };
                        let sv = tape.value(s).data().to_vec();
                        for (b, &index) in indices.iter().enumerate() {
                            trace.records.push(SelectionRecord {
                                sample: b,
                                bank: p,
                                index,
                                scores: sv[b * m..(b + 1) * m].to_vec(),
                                relaxed: relaxed[b * m..(b + 1) * m].to_vec(),
                                noise: noise.as_ref().map(|n| n[b * m..(b + 1) * m].to_vec()),
                            });
                        }
                        weights.push(y);
                    }
                }
            }
            Some(self.assemble_expert_block(tape, vars, &weights)?)
        };
        let kernel = self.assemble_era_kernel(tape, vars, block, batch)?;
        let y = cfg.conv.apply_per_sample(tape, x, kernel)?;
        Ok((y, trace))
    }

    /// Every expert of this module as `(bank, expert index, expert)`.
    pub fn experts(&self) -> impl Iterator<Item = (usize, usize, &Expert)> {
        self.banks
            .iter()
            .flat_map(|b| b.experts.iter().enumerate().map(move |(i, e)| (b.index, i, e)))
    }
}

/// Per-expert selection counts and per-bank load entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// `counts[bank][expert]`
    pub counts: Vec<Vec<u64>>,
    /// Natural-log entropy of each bank's selection distribution.
    pub entropy: Vec<f64>,
}

impl SelectionStats {
    pub fn new(banks: usize, bank_size: usize) -> Self {
        Self {
            counts: vec![vec![0; bank_size]; banks],
            entropy: vec![0.0; banks],
        }
    }

    pub fn add(&mut self, trace: &ModuleTrace) {
        for r in &trace.records {
            self.counts[r.bank][r.index] += 1;
        }
        self.refresh_entropy();
    }

    fn refresh_entropy(&mut self) {
        self.entropy = self.counts.iter().map(|c| count_entropy(c)).collect();
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Build from a non-empty set of traces.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a ModuleTrace>, banks: usize, bank_size: usize) -> Result<Self> {
        let mut stats = Self::new(banks, bank_size);
        let mut any = false;
        for t in traces {
            any |= !t.records.is_empty();
            stats.add(t);
        }
        if !any {
            return Err(Error::Invalid("selection_stats needs at least one record".into()));
        }
        Ok(stats)
    }
}

/// Entropy of the empirical distribution given by `counts`.
pub fn count_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

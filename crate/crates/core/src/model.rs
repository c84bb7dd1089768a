//! Convolutional classifier backbone with optional ERA replacement.
//!
//! A network is a stack of `conv -> bias -> ReLU` layers followed by global
//! mean pooling and a linear head. A fraction of the conv layers can be
//! swapped for ERA modules or for one of two parameter-matched static
//! stand-ins used in ablations:
//!
//! * `ExtraChannel`: a wider static conv followed by a linear `1x1`
//!   projection back to the layer width.
//! * `ExpertAvg`: the ERA structure with every bank replaced by the uniform
//!   average of its experts.

use serde::{Deserialize, Serialize};

use crate::era::{init_static_kernel, Assembly, ConvSpec, EraConfig, EraModule, Expert, ModuleRouting, ModuleTrace};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Era,
    Baseline,
    ExtraChannel,
    ExpertAvg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Era, Variant::Baseline, Variant::ExtraChannel, Variant::ExpertAvg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Era => "era",
            Variant::Baseline => "baseline",
            Variant::ExtraChannel => "extra-channel",
            Variant::ExpertAvg => "expert-avg",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Era => "ERA",
            Variant::Baseline => "Baseline",
            Variant::ExtraChannel => "Extra-Channel",
            Variant::ExpertAvg => "Expert-Avg",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}` (expected era, baseline, extra-channel or expert-avg)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// `[B, F + 1, T]`: features plus an observation mask as channels.
    Sequence1d,
    /// `[B, 2, T, F]`: values and mask as two image channels.
    Grid2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    /// Per-layer stride along the time axis (missing entries mean 1).
    pub strides: Vec<usize>,
    pub input: InputKind,
    pub classes: usize,
    pub replacement_fraction: f64,
    pub variant: Variant,
    pub expert_ratio: f64,
    pub bank_size: usize,
    /// `None` picks the scaled default from [`EraConfig::with_ratio`].
    pub key_dim: Option<usize>,
    pub gumbel_temperature: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32, 64],
            kernel_size: 3,
            strides: vec![1, 2, 1, 2],
            input: InputKind::Sequence1d,
            classes: 8,
            replacement_fraction: 0.25,
            variant: Variant::Era,
            expert_ratio: 0.2,
            bank_size: 5,
            key_dim: None,
            gumbel_temperature: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("widths", "need at least one layer, all widths positive"));
        }
        if self.kernel_size == 0 {
            return Err(Error::config("kernel_size", "must be positive"));
        }
        if self.strides.contains(&0) {
            return Err(Error::config("strides", "strides must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        if !(0.0..=1.0).contains(&self.replacement_fraction) {
            return Err(Error::config("replacement_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.expert_ratio) {
            return Err(Error::config("expert_ratio", "must lie in [0, 1]"));
        }
        if self.bank_size == 0 {
            return Err(Error::config("bank_size", "must be at least 1"));
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return Err(Error::config("gumbel_temperature", "must be positive"));
        }
        if self.variant != Variant::Baseline && self.replaced_layers().is_empty() {
            return Err(Error::config(
                "replacement_fraction",
                format!(
                    "{} replaces no layer at this fraction; use a positive fraction or variant = \"baseline\"",
                    self.variant.name()
                ),
            ));
        }
        Ok(())
    }

    /// 0-based indices of the layers to replace: `ceil(f * L)` layers spread
    /// evenly, the `k`-th at `floor((k + 1/2) * L / count)`.
    pub fn replaced_layers(&self) -> Vec<usize> {
        replacement_positions(self.widths.len(), self.replacement_fraction)
    }

    fn stride(&self, layer: usize) -> usize {
        self.strides.get(layer).copied().unwrap_or(1)
    }

    fn conv_spec(&self, layer: usize) -> ConvSpec {
        let k = self.kernel_size;
        match self.input {
            InputKind::Sequence1d => ConvSpec {
                kernel: vec![k],
                stride: vec![self.stride(layer)],
                padding: vec![k / 2],
            },
            InputKind::Grid2d => ConvSpec {
                kernel: vec![k, k],
                stride: vec![self.stride(layer), 1],
                padding: vec![k / 2, k / 2],
            },
        }
    }

    fn era_config(&self, n_in: usize, n_out: usize, conv: ConvSpec) -> EraConfig {
        let mut c = EraConfig::with_ratio(n_in, n_out, conv, self.expert_ratio);
        c.bank_size = self.bank_size;
        if let Some(k) = self.key_dim {
            c.key_dim = k;
        }
        c.gumbel_temperature = self.gumbel_temperature;
        c
    }
}

pub fn replacement_positions(layers: usize, fraction: f64) -> Vec<usize> {
    if fraction <= 0.0 || layers == 0 {
        return Vec::new();
    }
    let count = ((fraction * layers as f64 - 1e-9).ceil() as usize).clamp(1, layers);
    (0..count)
        .map(|k| ((2 * k + 1) * layers) / (2 * count))
        .collect()
}

/// Channel count and spatial extent of the network input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub spatial: Vec<usize>,
}

impl InputShape {
    pub fn for_task(kind: InputKind, frames: usize, features: usize) -> Self {
        match kind {
            InputKind::Sequence1d => Self {
                channels: features + 1,
                spatial: vec![frames],
            },
            InputKind::Grid2d => Self {
                channels: 2,
                spatial: vec![frames, features],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Static { kernel: ParamId },
    Era(EraModule),
    ExtraChannel { kernel: ParamId, projection: ParamId, extra: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    pub conv: ConvSpec,
    pub kind: LayerKind,
    pub bias: ParamId,
}

/// Identifies one expert across the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertId {
    /// Index among the network's ERA modules.
    pub module: usize,
    pub bank: usize,
    pub expert: usize,
}

impl ExpertId {
    pub fn label(&self) -> String {
        format!("era{}.bank{}.expert{}", self.module, self.bank, self.expert)
    }
}

/// One routing choice for the whole network; per-module traces are kept in
/// ERA-module order.
pub enum NetRouting<'a> {
    Eval,
    Sample(&'a mut Rng),
    Replay(&'a RoutingTrace),
    Anchored(&'a RoutingTrace),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingTrace {
    pub modules: Vec<ModuleTrace>,
}

impl RoutingTrace {
    pub fn select_samples(&self, samples: &[usize]) -> Self {
        Self {
            modules: self.modules.iter().map(|m| m.select_samples(samples)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: BackboneConfig,
    pub input: InputShape,
    pub params: ParamStore,
    pub layers: Vec<Layer>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// Per-layer seed, so every layer draws its weights independently of the
/// variant chosen for the others.
fn layer_seed(seed: u64, layer: usize) -> u64 {
    rng::derive(seed, 0x1000 + layer as u64)
}

impl Network {
    pub fn build(config: &BackboneConfig, input: InputShape, seed: u64) -> Result<Self> {
        config.validate()?;
        if input.spatial.len() != config.conv_spec(0).rank() || input.channels == 0 {
            return Err(Error::config("input", format!("input shape {input:?} does not fit {:?}", config.input)));
        }
        let replaced = config.replaced_layers();
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.widths.len());
        let mut n_in = input.channels;
        let mut spatial = input.spatial.clone();
        for (l, &n_out) in config.widths.iter().enumerate() {
            let conv = config.conv_spec(l);
            let name = format!("layer{l}");
            let base = layer_seed(seed, l);
            let mut static_rng = rng::stream(base, 0);
            let variant = if replaced.contains(&l) { config.variant } else { Variant::Baseline };
            let kind = match variant {
                Variant::Baseline => {
                    let k = init_static_kernel(&mut static_rng, &conv.kernel_shape(n_out, n_in));
                    LayerKind::Static {
                        kernel: params.register(format!("{name}.conv.weight"), k)?,
                    }
                }
                Variant::Era | Variant::ExpertAvg => {
                    let ec = config.era_config(n_in, n_out, conv.clone());
                    ec.validate_for_input(&spatial)?;
                    let assembly = if variant == Variant::Era { Assembly::Retrieve } else { Assembly::Average };
                    LayerKind::Era(EraModule::new(
                        &format!("{name}.era"),
                        ec,
                        assembly,
                        &mut params,
                        &mut static_rng,
                        &mut rng::stream(base, 1),
                        &mut rng::stream(base, 2),
                    )?)
                }
                Variant::ExtraChannel => {
                    let ec = config.era_config(n_in, n_out, conv.clone());
                    let extra = extra_channels_for(&ec)?;
                    let k = init_static_kernel(&mut static_rng, &conv.kernel_shape(n_out + extra, n_in));
                    let mut proj_rng = rng::stream(base, 1);
                    let std = (1.0 / (n_out + extra) as f64).sqrt();
                    let mut pshape = vec![n_out, n_out + extra];
                    pshape.extend(std::iter::repeat_n(1, conv.rank()));
                    let proj = Tensor::from_fn(&pshape, |_| rng::normal(&mut proj_rng, std));
                    LayerKind::ExtraChannel {
                        kernel: params.register(format!("{name}.conv.weight"), k)?,
                        projection: params.register(format!("{name}.proj.weight"), proj)?,
                        extra,
                    }
                }
            };
            let bias = params.register(format!("{name}.bias"), Tensor::zeros(&[n_out]))?;
            spatial = spatial
                .iter()
                .enumerate()
                .map(|(a, &len)| {
                    let padded = len + 2 * conv.padding[a];
                    if padded < conv.kernel[a] {
                        Err(Error::config("widths", format!("layer {l} kernel exceeds input extent {len}")))
                    } else {
                        Ok((padded - conv.kernel[a]) / conv.stride[a] + 1)
                    }
                })
                .collect::<Result<_>>()?;
            layers.push(Layer {
                name,
                n_in,
                n_out,
                conv,
                kind,
                bias,
            });
            n_in = n_out;
        }
        let mut head_rng = rng::stream(rng::derive(seed, 0x2000), 0);
        let std = (1.0 / n_in as f64).sqrt();
        let head_weight = params.register("head.weight", Tensor::from_fn(&[config.classes, n_in], |_| rng::normal(&mut head_rng, std)))?;
        let head_bias = params.register("head.bias", Tensor::zeros(&[config.classes]))?;
        let net = Self {
            config: config.clone(),
            input,
            params,
            layers,
            head_weight,
            head_bias,
        };
        if matches!(config.variant, Variant::Era | Variant::ExtraChannel | Variant::ExpertAvg) {
            net.audit_parameter_match()?;
        }
        Ok(net)
    }

    /// Checks that the ERA, Extra-Channel and Expert-Avg forms of every
    /// replaced layer carry the same number of scalars.
    fn audit_parameter_match(&self) -> Result<()> {
        for layer in &self.layers {
            if matches!(layer.kind, LayerKind::Static { .. }) {
                continue;
            }
            let ec = self.config.era_config(layer.n_in, layer.n_out, layer.conv.clone());
            let era = era_parameter_count(&ec);
            let matched = match layer.kind {
                LayerKind::ExtraChannel { extra, .. } => extra_channel_parameter_count(&ec, extra),
                _ => era,
            };
            let actual = self.layer_parameter_count(layer);
            if era != matched || actual != era + layer.n_out {
                return Err(Error::Invalid(format!(
                    "{}: parameter audit failed (era {era}, variant {matched}, built {actual})",
                    layer.name
                )));
            }
        }
        Ok(())
    }

    pub fn layer_parameter_count(&self, layer: &Layer) -> usize {
        let prefix = format!("{}.", layer.name);
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(&prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn era_modules(&self) -> Vec<&EraModule> {
        self.layers
            .iter()
            .filter_map(|l| match &l.kind {
                LayerKind::Era(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    /// Modules that route per sample (excludes Expert-Avg).
    pub fn retrieving_modules(&self) -> Vec<&EraModule> {
        self.era_modules().into_iter().filter(|m| m.retrieves()).collect()
    }

    /// Every expert with its network-wide identifier.
    pub fn experts(&self) -> Vec<(ExpertId, Expert)> {
        let mut out = Vec::new();
        for (mi, m) in self.era_modules().into_iter().enumerate() {
            for (bank, expert, e) in m.experts() {
                out.push((ExpertId { module: mi, bank, expert }, *e));
            }
        }
        out
    }

    /// `[B, C]` logits. The returned trace has one entry per ERA module.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var, routing: NetRouting<'_>) -> Result<(Var, RoutingTrace)> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != self.input.spatial.len() + 2 || xs[1] != self.input.channels || xs[2..] != self.input.spatial[..] {
            return Err(Error::Invalid(format!(
                "network expects input [B, {}, {:?}], got {xs:?}",
                self.input.channels, self.input.spatial
            )));
        }
        let mut routing = routing;
        let mut trace = RoutingTrace::default();
        let mut h = x;
        let mut era_index = 0;
        for layer in &self.layers {
            let y = match &layer.kind {
                LayerKind::Static { kernel } => layer.conv.apply(tape, h, vars[*kernel])?,
                LayerKind::ExtraChannel { kernel, projection, .. } => {
                    let wide = layer.conv.apply(tape, h, vars[*kernel])?;
                    let unit = ConvSpec {
                        kernel: vec![1; layer.conv.rank()],
                        stride: vec![1; layer.conv.rank()],
                        padding: vec![0; layer.conv.rank()],
                    };
                    unit.apply(tape, wide, vars[*projection])?
                }
                LayerKind::Era(module) => {
                    let r = match &mut routing {
                        NetRouting::Eval => ModuleRouting::Eval,
                        NetRouting::Sample(rng) => ModuleRouting::Sample(rng),
                        NetRouting::Replay(t) => ModuleRouting::Replay(module_trace(t, era_index)?),
                        NetRouting::Anchored(t) => ModuleRouting::Anchored(module_trace(t, era_index)?),
                    };
                    let (y, t) = module.forward(tape, vars, h, r)?;
                    trace.modules.push(t);
                    era_index += 1;
                    y
                }
            };
            let y = tape.add_channel_bias(y, vars[layer.bias])?;
            h = tape.relu(y);
        }
        let pooled = tape.mean_pool_spatial(h)?;
        let logits = tape.linear(pooled, vars[self.head_weight], vars[self.head_bias])?;
        Ok((logits, trace))
    }

    /// Eval-mode logits for an input batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = constant_vars(&mut tape, &self.params);
        let xv = tape.constant(x.clone());
        let (logits, _) = self.forward(&mut tape, &vars, xv, NetRouting::Eval)?;
        Ok(tape.value(logits).clone())
    }

    /// Eval-mode logits together with the selections made.
    pub fn predict_with_trace(&self, x: &Tensor) -> Result<(Tensor, RoutingTrace)> {
        let mut tape = Tape::new();
        let vars = constant_vars(&mut tape, &self.params);
        let xv = tape.constant(x.clone());
        let (logits, trace) = self.forward(&mut tape, &vars, xv, NetRouting::Eval)?;
        Ok((tape.value(logits).clone(), trace))
    }
}

fn module_trace(t: &RoutingTrace, index: usize) -> Result<&ModuleTrace> {
    t.modules
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("routing trace has no entry for ERA module {index}")))
}

/// Parameters as non-differentiable tape constants.
pub fn constant_vars(tape: &mut Tape, store: &ParamStore) -> ParamVars {
    ParamVars::from_vec(store.iter().map(|(_, p)| tape.constant(p.value.clone())).collect())
}

/// Scalars in an ERA layer, excluding the output bias.
pub fn era_parameter_count(c: &EraConfig) -> usize {
    let kl = c.expert_kernel_len();
    let (d, m, k) = (c.expert_channels, c.bank_size, c.key_dim);
    c.nonexpert_channels() * kl + d * m * (kl + k) + d * (k * c.n_in + k)
}

/// Scalars in an Extra-Channel layer with `extra` additional channels,
/// excluding the output bias.
pub fn extra_channel_parameter_count(c: &EraConfig, extra: usize) -> usize {
    (c.n_out + extra) * (c.expert_kernel_len() + c.n_out)
}

/// Additional channels that make an Extra-Channel layer match the ERA
/// layer exactly; errors when no integer width does.
pub fn extra_channels_for(c: &EraConfig) -> Result<usize> {
    let target = era_parameter_count(c);
    let per_channel = c.expert_kernel_len() + c.n_out;
    if target % per_channel != 0 || target / per_channel < c.n_out {
        return Err(Error::config(
            "variant",
            format!(
                "extra-channel cannot match the {target} ERA parameters of a {}->{} layer exactly \
                 (each channel costs {per_channel}); adjust key_dim, bank_size or expert_ratio",
                c.n_in, c.n_out
            ),
        ));
    }
    Ok(target / per_channel - c.n_out)
}

//! Self-checks on tiny shapes: finite-difference suites per module, expert
//! exclusivity and meta-gradient agreement.
//!
//! Routing is frozen at a sampled trace in anchored mode, which keeps the
//! hard one-hot forward value at the base point while making the relaxed
//! selection path visible to finite differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::elro::{autodiff_meta_gradient, closed_form_meta_gradient, sgd_values, virtual_train, BetaTable};
use crate::era::{Assembly, ConvSpec, EraConfig, EraModule, ModuleRouting};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::model::{BackboneConfig, InputKind, InputShape, NetRouting, Network, RoutingTrace, Variant};
use crate::rng;
use crate::tensor::gradcheck::relative_error;
use crate::tensor::{finite_diff_check, FdOptions, ParamStore, ParamVars, Tape, Tensor};
use crate::train::{gradients_at, param_values, Objective, TrainConfig};

/// Failure threshold of every finite-difference suite.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub module: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

impl SuiteReport {
    fn new(module: &str, max_rel_error: f64, coordinates: usize, tolerance: f64) -> Self {
        Self {
            module: module.to_string(),
            max_rel_error,
            coordinates,
            passed: max_rel_error < tolerance,
        }
    }
}

fn randn(seed: u64, tag: u64, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(rng::derive(seed, tag), 0);
    Tensor::from_fn(shape, |_| rng::normal(&mut r, 1.0))
}

/// Tiny backbone used by the network-level checks: three layers over a
/// 1-D input of 3 channels and 8 frames, ERA in the middle layer.
pub fn tiny_backbone(bank_size: usize) -> (BackboneConfig, InputShape) {
    let cfg = BackboneConfig {
        widths: vec![3, 4, 4],
        kernel_size: 3,
        strides: vec![1, 1, 1],
        input: InputKind::Sequence1d,
        classes: 4,
        replacement_fraction: 0.25,
        variant: Variant::Era,
        expert_ratio: 0.5,
        bank_size,
        key_dim: Some(4),
        gumbel_temperature: 1.0,
    };
    (cfg, InputShape::for_task(InputKind::Sequence1d, 8, 2))
}

/// Convolution, affine and pooling ops composed into one scalar.
pub fn tensor_suite(seed: u64, opts: &FdOptions) -> Result<SuiteReport> {
    let inputs = vec![
        randn(seed, 1, &[2, 2, 5]),
        randn(seed, 2, &[3, 2, 3]),
        randn(seed, 3, &[2, 2, 3, 4]),
        randn(seed, 4, &[2, 3, 2, 2, 2]),
        randn(seed, 5, &[4, 3]),
        randn(seed, 6, &[4]),
    ];
    let labels = [1usize, 3];
    let report = finite_diff_check(
        |t, v| {
            let y1 = t.conv1d(v[0], v[1], 1, 1)?;
            let y1 = t.relu(y1);
            let p1 = t.mean_pool_spatial(y1)?;
            let y2 = t.conv2d_per_sample(v[2], v[3], (1, 2), (1, 0))?;
            let p2 = t.mean_pool_spatial(y2)?;
            let h = t.add(p1, p2)?;
            let logits = t.linear(h, v[4], v[5])?;
            t.cross_entropy(logits, &labels)
        },
        &inputs,
        opts,
    )?;
    Ok(SuiteReport::new("tensor-core", report.max_rel_error, report.coordinates_checked, FD_TOLERANCE))
}

/// One ERA module with frozen selections, every parameter and the input.
pub fn era_suite(seed: u64, opts: &FdOptions) -> Result<SuiteReport> {
    let mut cfg = EraConfig::with_ratio(2, 3, ConvSpec::same(&[3]), 0.67);
    cfg.bank_size = 3;
    cfg.key_dim = 3;
    let mut store = ParamStore::new();
    let base = rng::derive(seed, 20);
    let module = EraModule::new(
        "era",
        cfg,
        Assembly::Retrieve,
        &mut store,
        &mut rng::stream(base, 0),
        &mut rng::stream(base, 1),
        &mut rng::stream(base, 2),
    )?;
    let x = randn(seed, 21, &[3, 2, 6]);
    let w = randn(seed, 22, &[3, 3, 6]);
    let trace = {
        let mut t = Tape::new();
        let vars = ParamVars::leaves(&mut t, &store);
        let xv = t.leaf(x.clone());
        let mut draw = rng::stream(base, 3);
        module.forward(&mut t, &vars, xv, ModuleRouting::Sample(&mut draw))?.1
    };
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    inputs.push(x);
    let report = finite_diff_check(
        |t, v| {
            let vars = ParamVars::from_vec(v[..n].to_vec());
            let (y, _) = module.forward(t, &vars, v[n], ModuleRouting::Anchored(&trace))?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok::<_, Error>(t.sum(p))
        },
        &inputs,
        opts,
    )?;
    Ok(SuiteReport::new("era", report.max_rel_error, report.coordinates_checked, FD_TOLERANCE))
}

/// `L_CE - gamma_s * L_s` with respect to kernels, keys and logits.
pub fn loss_suite(seed: u64, opts: &FdOptions) -> Result<SuiteReport> {
    let mut cfg = EraConfig::with_ratio(2, 2, ConvSpec::same(&[3]), 1.0);
    cfg.bank_size = 4;
    cfg.key_dim = 2;
    let mut store = ParamStore::new();
    let base = rng::derive(seed, 30);
    let module = EraModule::new(
        "era",
        cfg,
        Assembly::Retrieve,
        &mut store,
        &mut rng::stream(base, 0),
        &mut rng::stream(base, 1),
        &mut rng::stream(base, 2),
    )?;
    let n = store.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    inputs.push(randn(seed, 31, &[3, 5]));
    let report = finite_diff_check(
        |t, v| {
            let vars = ParamVars::from_vec(v[..n].to_vec());
            Ok::<_, Error>(total_loss(t, v[n], &[4, 0, 2], &vars, &[&module], &LossConfig { gamma_s: 0.1 })?.total)
        },
        &inputs,
        opts,
    )?;
    Ok(SuiteReport::new("loss", report.max_rel_error, report.coordinates_checked, FD_TOLERANCE))
}

/// A network, two disjoint random batches and a sampled training trace.
pub struct MetaInstance {
    pub net: Network,
    pub beta: BetaTable,
    pub objective: Objective,
    pub train_x: Tensor,
    pub train_labels: Vec<usize>,
    pub val_x: Tensor,
    pub val_labels: Vec<usize>,
    pub scale: f64,
    pub seed: u64,
}

impl MetaInstance {
    pub fn random(seed: u64) -> Result<Self> {
        let (cfg, input) = tiny_backbone(3);
        let net = Network::build(&cfg, input.clone(), seed)?;
        let mut beta = BetaTable::new(&net, 0.1);
        let mut r = rng::stream(rng::derive(seed, 40), 0);
        for b in &mut beta.beta {
            *b = 0.05 + 0.1 * r.random::<f64>();
        }
        let shape = [4, input.channels, input.spatial[0]];
        let labels = |r: &mut rng::Rng| (0..4).map(|_| r.random_range(0..cfg.classes)).collect::<Vec<_>>();
        Ok(Self {
            beta,
            objective: Objective {
                loss: LossConfig { gamma_s: 0.1 },
                weight_decay: TrainConfig::default().weight_decay,
            },
            train_x: randn(seed, 41, &shape),
            train_labels: labels(&mut r),
            val_x: randn(seed, 42, &shape),
            val_labels: labels(&mut r),
            scale: 1.0,
            seed,
            net,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaCheck {
    /// Closed form against differentiating through the update.
    pub autodiff_rel_error: f64,
    /// Closed form against central differences over beta.
    pub fd_rel_error: f64,
    pub experts: usize,
}

/// Compares the three meta-gradient paths on one instance.
pub fn meta_gradient_check(inst: &MetaInstance, opts: &FdOptions) -> Result<MetaCheck> {
    let MetaInstance {
        net,
        beta,
        objective,
        train_x,
        train_labels,
        val_x,
        val_labels,
        scale,
        seed,
    } = inst;
    let mut noise = rng::stream(rng::derive(*seed, 43), 0);
    let (interim, g) = virtual_train(net, beta, objective, train_x, train_labels, &mut noise, *scale)?;
    let mut val_noise = rng::stream(rng::derive(*seed, 44), 0);
    let objective = &objective.validation();
    let h = gradients_at(net, objective, &interim.values, val_x, val_labels, NetRouting::Sample(&mut val_noise))?;
    let closed = closed_form_meta_gradient(beta, &g.grads, &h.grads, *scale);
    let auto = autodiff_meta_gradient(net, beta, objective, &interim, &g.grads, val_x, val_labels, &h.trace, *scale)?;
    let autodiff_rel_error = closed
        .iter()
        .zip(&auto)
        .map(|(c, a)| relative_error(*c, *a, 1e-15))
        .fold(0.0, f64::max);

    let original = param_values(net);
    let fd_rel_error = fd_beta_error(net, beta, objective, &original, &g.grads, val_x, val_labels, &h.trace, *scale, &closed, opts)?;
    Ok(MetaCheck {
        autodiff_rel_error,
        fd_rel_error,
        experts: beta.len(),
    })
}

/// Central differences of the validation objective over each beta entry.
#[allow(clippy::too_many_arguments)]
fn fd_beta_error(
    net: &Network,
    beta: &BetaTable,
    objective: &Objective,
    original: &[Tensor],
    train_grads: &[Tensor],
    val_x: &Tensor,
    val_labels: &[usize],
    val_trace: &RoutingTrace,
    scale: f64,
    analytic: &[f64],
    opts: &FdOptions,
) -> Result<f64> {
    let val_at = |b: &[f64]| -> Result<f64> {
        let mut table = beta.clone();
        table.beta = b.to_vec();
        let values = sgd_values(original, train_grads, &table, scale);
        let mut t = Tape::new();
        let vars = ParamVars::from_vec(values.into_iter().map(|x| t.constant(x)).collect());
        let xv = t.constant(val_x.clone());
        let (total, _, _) = objective.record(net, &mut t, &vars, xv, val_labels, NetRouting::Anchored(val_trace))?;
        Ok(t.value(total).item())
    };
    let mut worst: f64 = 0.0;
    let mut b = beta.beta.clone();
    for k in 0..b.len() {
        let orig = b[k];
        b[k] = orig + opts.h;
        let plus = val_at(&b)?;
        b[k] = orig - opts.h;
        let minus = val_at(&b)?;
        b[k] = orig;
        let numeric = (plus - minus) / (2.0 * opts.h);
        worst = worst.max(relative_error(analytic[k] * opts.analytic_scale, numeric, opts.eps));
    }
    Ok(worst)
}

/// Meta-gradient suite for `gradcheck`.
pub fn elro_suite(seed: u64, opts: &FdOptions) -> Result<SuiteReport> {
    let inst = MetaInstance::random(seed)?;
    let c = meta_gradient_check(&inst, opts)?;
    let err = c.fd_rel_error.max(c.autodiff_rel_error);
    Ok(SuiteReport::new("elro", err, c.experts, FD_TOLERANCE))
}

/// Whole-network objective on a 4-sample batch, every parameter.
pub fn full_model_gradcheck(seed: u64, opts: &FdOptions) -> Result<SuiteReport> {
    let (cfg, input) = tiny_backbone(3);
    let mut net = Network::build(&cfg, input.clone(), seed)?;
    // zero biases leave pre-activations exactly on the ReLU kink wherever a
    // receptive field sees only dead units
    let mut jitter = rng::stream(rng::derive(seed, 52), 0);
    let biases: Vec<_> = net.layers.iter().map(|l| l.bias).chain([net.head_bias]).collect();
    for b in biases {
        net.params.value_mut(b).data_mut().iter_mut().for_each(|v| *v = rng::normal(&mut jitter, 0.1));
    }
    let objective = Objective {
        loss: LossConfig { gamma_s: 0.1 },
        weight_decay: 1e-4,
    };
    let x = randn(seed, 50, &[4, input.channels, input.spatial[0]]);
    let mut r = rng::stream(rng::derive(seed, 51), 0);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..cfg.classes)).collect();
    let trace = gradients_at(&net, &objective, &param_values(&net), &x, &labels, NetRouting::Sample(&mut r))?.trace;
    let report = finite_diff_check(
        |t, v| {
            let vars = ParamVars::from_vec(v.to_vec());
            let xv = t.constant(x.clone());
            let (total, _, _) = objective.record(&net, t, &vars, xv, &labels, NetRouting::Anchored(&trace))?;
            Ok::<_, Error>(total)
        },
        &param_values(&net),
        opts,
    )?;
    Ok(SuiteReport::new("model", report.max_rel_error, report.coordinates_checked, FD_TOLERANCE))
}

/// Every suite at `seed`.
pub fn run_all(seed: u64, opts: &FdOptions) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        tensor_suite(seed, opts)?,
        era_suite(seed, opts)?,
        loss_suite(seed, opts)?,
        elro_suite(seed, opts)?,
        full_model_gradcheck(seed, opts)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExclusivityReport {
    /// Experts that no sample selected.
    pub unselected: usize,
    /// Largest absolute kernel gradient among unselected experts.
    pub unselected_max_abs: f64,
    pub selected: usize,
    /// Largest deviation from the selecting-subset restriction.
    pub subset_max_abs_diff: f64,
}

/// Checks, on one random batch, that only selecting samples reach an
/// expert's kernel.
pub fn exclusivity_check(seed: u64, batch: usize) -> Result<ExclusivityReport> {
    let (mut cfg, input) = tiny_backbone(4);
    cfg.widths = vec![3, 6, 4];
    let net = Network::build(&cfg, input.clone(), rng::derive(seed, 60))?;
    let objective = Objective {
        loss: LossConfig { gamma_s: 0.0 },
        weight_decay: 0.0,
    };
    let x = randn(seed, 61, &[batch, input.channels, input.spatial[0]]);
    let mut r = rng::stream(rng::derive(seed, 62), 0);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..cfg.classes)).collect();
    let values = param_values(&net);
    let full = gradients_at(&net, &objective, &values, &x, &labels, NetRouting::Sample(&mut r))?;
    let mut rep = ExclusivityReport {
        unselected: 0,
        unselected_max_abs: 0.0,
        selected: 0,
        subset_max_abs_diff: 0.0,
    };
    let per_sample = x.len() / batch;
    for (id, e) in net.experts() {
        let tr = &full.trace.modules[id.module];
        let who: Vec<usize> = (0..batch).filter(|&b| tr.record(id.bank, b).index == id.expert).collect();
        let g = &full.grads[e.kernel.0];
        if who.is_empty() {
            rep.unselected += 1;
            rep.unselected_max_abs = rep.unselected_max_abs.max(g.data().iter().fold(0.0, |m, v| m.max(v.abs())));
            continue;
        }
        rep.selected += 1;
        let mut xs = Vec::with_capacity(who.len() * per_sample);
        for &b in &who {
            xs.extend_from_slice(&x.data()[b * per_sample..(b + 1) * per_sample]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = who.len();
        let sub_x = Tensor::new(shape, xs)?;
        let sub_labels: Vec<usize> = who.iter().map(|&b| labels[b]).collect();
        let sub_trace = full.trace.select_samples(&who);
        let sub = gradients_at(&net, &objective, &values, &sub_x, &sub_labels, NetRouting::Replay(&sub_trace))?;
        let ratio = who.len() as f64 / batch as f64;
        let diff = g
            .data()
            .iter()
            .zip(sub.grads[e.kernel.0].data())
            .map(|(a, b)| (a - ratio * b).abs())
            .fold(0.0, f64::max);
        rep.subset_max_abs_diff = rep.subset_max_abs_diff.max(diff);
    }
    Ok(rep)
}

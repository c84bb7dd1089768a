//! Fixtures shared by the benchmarks.

use era_core::config::RunConfig;
use era_core::data::generate;
use era_core::model::{NetRouting, Network, Variant};
use era_core::rng;
use era_core::tensor::{ParamVars, Tape, Tensor};
use era_core::train::Trainer;

pub use era_core;

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_fn(shape, |_| rng::normal(&mut r, 1.0))
}

/// Default-task network of the given variant.
pub fn network(variant: Variant) -> Network {
    let mut cfg = RunConfig::default();
    cfg.model.variant = variant;
    Network::build(&cfg.model, cfg.input_shape(), 0).expect("default config builds")
}

/// Default-task input batch of `batch` random sequences.
pub fn input(batch: usize) -> Tensor {
    let shape = RunConfig::default().input_shape();
    random_tensor(1, &[batch, shape.channels, shape.spatial[0]])
}

/// Forward and backward pass with sampled selection; returns the loss.
pub fn forward_backward(net: &Network, x: &Tensor, noise_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars = ParamVars::leaves(&mut tape, &net.params);
    let xv = tape.constant(x.clone());
    let mut noise = rng::stream(noise_seed, 0);
    let (y, _) = net
        .forward(&mut tape, &vars, xv, NetRouting::Sample(&mut noise))
        .expect("forward runs");
    let loss = tape.sum(y);
    let value = tape.value(loss).item();
    tape.backward(loss).expect("backward runs");
    value
}

/// A trainer on a reduced copy of the default task.
pub fn trainer(variant: Variant, elro: bool) -> Trainer {
    let mut cfg = RunConfig::default();
    cfg.model.variant = variant;
    cfg.train.elro = elro;
    cfg.train.reuse_virtual_gradients = true;
    cfg.train.meta_check_every = 0;
    cfg.task.train_size = 256;
    cfg.task.test_size = 64;
    let data = generate(&cfg.task).expect("task generates");
    Trainer::new(&cfg, data).expect("trainer builds")
}

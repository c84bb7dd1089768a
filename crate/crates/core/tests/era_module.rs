use era_core::era::{
    count_entropy, init_static_kernel, select_expert, Assembly, ConvSpec, EraConfig, EraModule, ModuleRouting,
    SelectMode, SelectionStats,
};
use era_core::rng;
use era_core::tensor::{finite_diff_check, softmax, FdOptions, ParamStore, ParamVars, Tape, Tensor};
use proptest::prelude::*;

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng::stream(seed, 99);
    Tensor::from_fn(shape, |_| rng::normal(&mut r, 1.0))
}

fn build(cfg: EraConfig, seed: u64, assembly: Assembly) -> (ParamStore, EraModule) {
    let mut store = ParamStore::new();
    let m = EraModule::new(
        "era",
        cfg,
        assembly,
        &mut store,
        &mut rng::stream(seed, 0),
        &mut rng::stream(seed, 1),
        &mut rng::stream(seed, 2),
    )
    .unwrap();
    (store, m)
}

#[test]
fn eval_selection_takes_largest_score() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.5]).unwrap());
    let (_, idx, _) = select_expert(&mut tape, s, SelectMode::Eval, 1.0).unwrap();
    assert_eq!(idx, vec![0]);
}

#[test]
fn eval_ties_break_to_lowest_index() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![2, 3], vec![0.3, 0.7, 0.7, 2.0, 2.0, 2.0]).unwrap());
    let (y, idx, _) = select_expert(&mut tape, s, SelectMode::Eval, 1.0).unwrap();
    assert_eq!(idx, vec![1, 0]);
    assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn frozen_noise_flips_selection_and_matches_softmax_jacobian() {
    let noise = [0.1, 2.0];
    let scores = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let s = tape.leaf(scores.clone());
    let (y, idx, _) = select_expert(&mut tape, s, SelectMode::Train { noise: &noise }, 1.0).unwrap();
    assert_eq!(idx, vec![1]);
    assert_eq!(tape.value(y).data(), &[0.0, 1.0]);
    // Backward through the hard sample equals the Jacobian of the relaxed
    // softmax. Compare against central differences of softmax itself.
    for j in 0..2 {
        let mut t = Tape::new();
        let s = t.leaf(scores.clone());
        let (y, _, _) = select_expert(&mut t, s, SelectMode::Train { noise: &noise }, 1.0).unwrap();
        let flat = t.reshape(y, &[2]).unwrap();
        let yj = t.index(flat, j).unwrap();
        let g = t.backward(yj).unwrap().wrt(s, &[1, 2]);
        for i in 0..2 {
            let h = 1e-6;
            let mut plus = vec![1.0 + noise[0], noise[1]];
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (softmax(&plus, 1.0)[j] - softmax(&minus, 1.0)[j]) / (2.0 * h);
            assert!((g.data()[i] - fd).abs() < 1e-6, "d y{j}/d s{i}: {} vs {fd}", g.data()[i]);
        }
    }
}

#[test]
fn temperature_and_scores_are_validated() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
    assert!(select_expert(&mut tape, s, SelectMode::Eval, 1.0).is_err());
    let s = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    assert!(select_expert(&mut tape, s, SelectMode::Train { noise: &[0.0, 0.0] }, 0.0).is_err());
}

fn static_equivalence(cfg: EraConfig, spatial: &[usize], seed: u64) {
    let (store, module) = build(cfg.clone(), seed, Assembly::Retrieve);
    let kernel = init_static_kernel(&mut rng::stream(seed, 0), &cfg.conv.kernel_shape(cfg.n_out, cfg.n_in));
    let mut xs = vec![3, cfg.n_in];
    xs.extend_from_slice(spatial);
    let x = random_tensor(seed + 1, &xs);

    let mut ta = Tape::new();
    let vars = ParamVars::leaves(&mut ta, &store);
    let xa = ta.leaf(x.clone());
    let mut draw = rng::stream(seed, 7);
    let (ya, trace) = module.forward(&mut ta, &vars, xa, ModuleRouting::Sample(&mut draw)).unwrap();
    let la = ta.sum(ya);
    let ga = ta.backward(la).unwrap();

    let mut tb = Tape::new();
    let kb = tb.leaf(kernel);
    let xb = tb.leaf(x.clone());
    let yb = cfg.conv.apply(&mut tb, xb, kb).unwrap();
    let lb = tb.sum(yb);
    let gb = tb.backward(lb).unwrap();

    assert_eq!(ta.value(ya).shape(), tb.value(yb).shape());
    assert!(ta.value(ya).max_abs_diff(tb.value(yb)) <= 1e-12);
    assert!(ga.wrt(xa, &xs).max_abs_diff(&gb.wrt(xb, &xs)) <= 1e-12);
    assert!(trace.records.iter().all(|r| r.index == 0));
}

#[test]
fn no_expert_channels_is_a_static_conv() {
    let mut cfg = EraConfig::with_ratio(3, 4, ConvSpec::same(&[3]), 0.0);
    cfg.key_dim = 4;
    static_equivalence(cfg, &[7], 11);
}

#[test]
fn single_expert_bank_is_a_static_conv() {
    let mut cfg = EraConfig::with_ratio(3, 4, ConvSpec::same(&[3]), 0.5);
    cfg.bank_size = 1;
    cfg.key_dim = 4;
    static_equivalence(cfg.clone(), &[7], 12);
    let mut cfg2 = EraConfig::with_ratio(2, 3, ConvSpec::same(&[3, 3]), 1.0);
    cfg2.bank_size = 1;
    cfg2.key_dim = 3;
    static_equivalence(cfg2, &[4, 5], 13);
}

#[test]
fn initial_kernels_share_the_static_stream() {
    let cfg = EraConfig::with_ratio(2, 4, ConvSpec::same(&[3]), 0.5);
    let (store, module) = build(cfg.clone(), 5, Assembly::Retrieve);
    let full = init_static_kernel(&mut rng::stream(5, 0), &[4, 2, 3]);
    let ne = store.value(module.nonexpert.unwrap());
    assert_eq!(ne.data(), &full.data()[..12]);
    let e0 = store.value(module.banks[1].experts[0].kernel);
    assert_eq!(e0.data(), &full.data()[18..]);
}

#[test]
fn unselected_kernels_receive_exactly_zero_gradient() {
    let mut cfg = EraConfig::with_ratio(2, 4, ConvSpec::same(&[3]), 0.5);
    cfg.bank_size = 6;
    cfg.key_dim = 4;
    let (store, module) = build(cfg, 3, Assembly::Retrieve);
    let x = random_tensor(4, &[2, 2, 9]);
    let mut tape = Tape::new();
    let vars = ParamVars::leaves(&mut tape, &store);
    let xv = tape.leaf(x);
    let mut draw = rng::stream(3, 9);
    let (y, trace) = module.forward(&mut tape, &vars, xv, ModuleRouting::Sample(&mut draw)).unwrap();
    let y2 = tape.mul(y, y).unwrap();
    let loss = tape.sum(y2);
    let grads = tape.backward(loss).unwrap();
    for (bank, i, e) in module.experts() {
        let chosen = (0..2).any(|b| trace.record(bank, b).index == i);
        let g = grads.wrt(vars[e.kernel], store.value(e.kernel).shape());
        if chosen {
            assert!(g.norm_sq() > 0.0);
        } else {
            assert!(g.data().iter().all(|&v| v == 0.0), "bank {bank} expert {i}");
        }
        // keys get gradient through the relaxation regardless
        assert!(grads.wrt(vars[e.key], &[4]).norm_sq() > 0.0);
    }
}

#[test]
fn replay_reproduces_sampled_forward() {
    let mut cfg = EraConfig::with_ratio(2, 4, ConvSpec::same(&[3]), 0.5);
    cfg.key_dim = 4;
    let (store, module) = build(cfg, 8, Assembly::Retrieve);
    let x = random_tensor(2, &[3, 2, 6]);
    let mut t1 = Tape::new();
    let v1 = ParamVars::leaves(&mut t1, &store);
    let x1 = t1.leaf(x.clone());
    let mut draw = rng::stream(1, 1);
    let (y1, trace) = module.forward(&mut t1, &v1, x1, ModuleRouting::Sample(&mut draw)).unwrap();
    let mut t2 = Tape::new();
    let v2 = ParamVars::leaves(&mut t2, &store);
    let x2 = t2.leaf(x);
    let (y2, trace2) = module.forward(&mut t2, &v2, x2, ModuleRouting::Replay(&trace)).unwrap();
    assert_eq!(t1.value(y1), t2.value(y2));
    assert_eq!(trace, trace2);
    let sub = trace.select_samples(&[2, 0]);
    assert_eq!(sub.batch, 2);
    assert_eq!(sub.record(1, 0).index, trace.record(1, 2).index);
    assert_eq!(sub.record(0, 1).noise, trace.record(0, 0).noise);
}

#[test]
fn averaging_uses_every_expert_and_records_nothing() {
    let mut cfg = EraConfig::with_ratio(2, 2, ConvSpec::same(&[1]), 0.5);
    cfg.bank_size = 2;
    cfg.key_dim = 1;
    let (mut store, module) = build(cfg, 1, Assembly::Average);
    let (e0, e1) = (module.banks[0].experts[0].kernel, module.banks[0].experts[1].kernel);
    *store.value_mut(e0) = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
    *store.value_mut(e1) = Tensor::new(vec![2, 1], vec![3.0, 2.0]).unwrap();
    *store.value_mut(module.nonexpert.unwrap()) = Tensor::new(vec![1, 2, 1], vec![0.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let vars = ParamVars::leaves(&mut tape, &store);
    let x = tape.leaf(Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap());
    let (y, trace) = module.forward(&mut tape, &vars, x, ModuleRouting::Eval).unwrap();
    // mean kernel [2, 1] applied to [1, 1]
    assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    assert!(trace.records.is_empty());
}

#[test]
fn rejects_wrong_input_channels() {
    let cfg = EraConfig::with_ratio(3, 4, ConvSpec::same(&[3]), 0.5);
    let (store, module) = build(cfg, 1, Assembly::Retrieve);
    let mut tape = Tape::new();
    let vars = ParamVars::leaves(&mut tape, &store);
    let x = tape.leaf(Tensor::zeros(&[1, 2, 5]));
    assert!(module.forward(&mut tape, &vars, x, ModuleRouting::Eval).is_err());
}

#[test]
fn selection_entropy_extremes() {
    let mut cfg = EraConfig::with_ratio(1, 1, ConvSpec::same(&[1]), 1.0);
    cfg.bank_size = 4;
    cfg.key_dim = 1;
    let (mut store, module) = build(cfg, 1, Assembly::Retrieve);
    let experts = module.banks[0].experts.clone();
    for (i, e) in experts.iter().enumerate() {
        *store.value_mut(e.key) = Tensor::new(vec![1], vec![if i == 2 { 5.0 } else { 0.0 }]).unwrap();
    }
    let q = module.mappers[0];
    *store.value_mut(q.weight) = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    *store.value_mut(q.bias) = Tensor::new(vec![1], vec![1.0]).unwrap();
    let mut tape = Tape::new();
    let vars = ParamVars::leaves(&mut tape, &store);
    let x = tape.leaf(random_tensor(1, &[8, 1, 1]));
    let (_, trace) = module.forward(&mut tape, &vars, x, ModuleRouting::Eval).unwrap();
    let stats = SelectionStats::from_traces([&trace], 1, 4).unwrap();
    assert_eq!(stats.counts, vec![vec![0, 0, 8, 0]]);
    assert_eq!(stats.entropy[0], 0.0);
    assert!((count_entropy(&[2, 2, 2, 2]) - 4f64.ln()).abs() < 1e-12);
    assert!(SelectionStats::from_traces(std::iter::empty(), 1, 4).is_err());
}

fn anchored_fd(seed: u64, spatial: Vec<usize>, kernel: Vec<usize>) -> f64 {
    let mut cfg = EraConfig::with_ratio(2, 3, ConvSpec::same(&kernel), 0.67);
    cfg.bank_size = 3;
    cfg.key_dim = 3;
    let (store, module) = build(cfg, seed, Assembly::Retrieve);
    let mut xs = vec![2, 2];
    xs.extend(spatial);
    let x = random_tensor(seed + 100, &xs);
    let target = {
        let mut t = Tape::new();
        let v = ParamVars::leaves(&mut t, &store);
        let xv = t.leaf(x.clone());
        let mut draw = rng::stream(seed, 3);
        module.forward(&mut t, &v, xv, ModuleRouting::Sample(&mut draw)).unwrap().1
    };
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    inputs.push(x);
    let n = store.len();
    let report = finite_diff_check(
        |tape, vars| {
            let pv = ParamVars::from_vec(vars[..n].to_vec());
            let (y, _) = module.forward(tape, &pv, vars[n], ModuleRouting::Anchored(&target))?;
            let sq = tape.mul(y, y)?;
            Ok::<_, era_core::Error>(tape.sum(sq))
        },
        &inputs,
        &FdOptions::default(),
    )
    .unwrap();
    report.max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn anchored_module_gradients_match_finite_differences(seed in 0u64..10_000, len in 4usize..8) {
        let err = anchored_fd(seed, vec![len], vec![3]);
        prop_assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn anchored_2d_module_gradients_match_finite_differences(seed in 0u64..10_000) {
        let err = anchored_fd(seed, vec![3, 4], vec![3, 3]);
        prop_assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn every_sample_selects_exactly_one_expert(seed in 0u64..10_000, batch in 1usize..5, m in 1usize..6) {
        let mut cfg = EraConfig::with_ratio(2, 4, ConvSpec::same(&[3]), 0.5);
        cfg.bank_size = m;
        cfg.key_dim = 4;
        let (store, module) = build(cfg, seed, Assembly::Retrieve);
        let mut tape = Tape::new();
        let vars = ParamVars::leaves(&mut tape, &store);
        let x = tape.leaf(random_tensor(seed, &[batch, 2, 5]));
        let mut draw = rng::stream(seed, 5);
        let (_, trace) = module.forward(&mut tape, &vars, x, ModuleRouting::Sample(&mut draw)).unwrap();
        prop_assert_eq!(trace.records.len(), batch * 2);
        for r in &trace.records {
            prop_assert!(r.index < m);
            let s: f64 = r.relaxed.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert_eq!(r.index, era_core::tensor::argmax(&r.logits()));
        }
    }
}

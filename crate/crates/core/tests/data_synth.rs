use era_core::data::{class_means, export_dataset, generate, import_dataset, input_tensor, make_partial, BatchStream, SequenceSample, TaskSpec};
use era_core::model::InputKind;

fn small_spec() -> TaskSpec {
    TaskSpec {
        train_size: 400,
        val_size: 40,
        test_size: 400,
        ..TaskSpec::default()
    }
}

#[test]
fn odd_class_count_is_rejected() {
    let spec = TaskSpec { classes: 7, ..TaskSpec::default() };
    assert!(generate(&spec).is_err());
    let spec = TaskSpec { segments: 7, ..TaskSpec::default() };
    assert!(generate(&spec).is_err());
}

#[test]
fn same_seed_same_dataset() {
    let a = generate(&small_spec()).unwrap();
    let b = generate(&small_spec()).unwrap();
    assert_eq!(a, b);
    let c = generate(&TaskSpec { seed: 1, ..small_spec() }).unwrap();
    assert_ne!(a.train[0].frames, c.train[0].frames);
}

#[test]
fn zero_offset_makes_paired_classes_identical_before_divergence() {
    let spec = TaskSpec { epsilon: 0.0, ..TaskSpec::default() };
    let m = class_means(&spec).unwrap();
    let early = spec.divergence_frame * spec.features;
    for g in 0..spec.clusters() {
        let (a, b) = (&m.means[2 * g][..early], &m.means[2 * g + 1][..early]);
        assert_eq!(a, b);
        let late_a = &m.means[2 * g][early..];
        let late_b = &m.means[2 * g + 1][early..];
        assert!(late_a.iter().zip(late_b).map(|(x, y)| (x - y).abs()).sum::<f64>() > 1.0);
    }
}

#[test]
fn early_offset_has_the_requested_norm() {
    let spec = TaskSpec::default();
    let m = class_means(&spec).unwrap();
    let f = spec.features;
    for g in 0..spec.clusters() {
        for t in 0..spec.divergence_frame {
            let d: f64 = (0..f)
                .map(|i| (m.means[2 * g][t * f + i] - m.means[2 * g + 1][t * f + i]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d - 2.0 * spec.epsilon).abs() < 1e-12, "{d}");
        }
    }
}

#[test]
fn partial_sequence_arithmetic() {
    let s = SequenceSample {
        frames: (0..40 * 3).map(f64::from).collect(),
        label: 0,
    };
    let p = make_partial(&s, 2, 40, 10, 3).unwrap();
    assert_eq!(p.observation_frame, 8);
    assert_eq!(p.frames.len(), 24);
    assert_eq!(p.ratio(), 0.2);
    let full = make_partial(&s, 10, 40, 10, 3).unwrap();
    assert_eq!(full.ratio(), 1.0);
    assert_eq!(full.frames, &s.frames[..]);
    for i in 1..=10 {
        let p = make_partial(&s, i, 40, 10, 3).unwrap();
        assert_eq!(p.ratio(), p.observation_frame as f64 / 40.0);
        assert_eq!(p.observation_frame, 4 * i);
    }
    assert!(make_partial(&s, 0, 40, 10, 3).is_err());
    assert!(make_partial(&s, 11, 40, 10, 3).is_err());
}

#[test]
fn inputs_are_zero_padded_with_a_mask() {
    let s = SequenceSample {
        frames: (0..4 * 2).map(|v| v as f64 + 1.0).collect(),
        label: 1,
    };
    let p = make_partial(&s, 1, 4, 2, 2).unwrap();
    let x = input_tensor(InputKind::Sequence1d, &[p.clone()]).unwrap();
    assert_eq!(x.shape(), &[1, 3, 4]);
    assert_eq!(x.data(), &[1.0, 3.0, 0.0, 0.0, 2.0, 4.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let g = input_tensor(InputKind::Grid2d, &[p]).unwrap();
    assert_eq!(g.shape(), &[1, 2, 4, 2]);
    assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(input_tensor(InputKind::Sequence1d, &[]).is_err());
}

/// Nearest class-mean classifier over the observed frames, means estimated
/// from the training split.
fn nearest_prototype_accuracy(spec: &TaskSpec, segment: usize) -> f64 {
    let data = generate(spec).unwrap();
    let len = segment * spec.frames / spec.segments * spec.features;
    let mut means = vec![vec![0.0; len]; spec.classes];
    let mut counts = vec![0usize; spec.classes];
    for s in &data.train {
        counts[s.label] += 1;
        for (m, v) in means[s.label].iter_mut().zip(&s.frames[..len]) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = data
        .test
        .iter()
        .filter(|s| {
            let dist = |m: &Vec<f64>| m.iter().zip(&s.frames[..len]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..spec.classes)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == s.label
        })
        .count();
    100.0 * correct as f64 / data.test.len() as f64
}

#[test]
fn full_sequences_are_easy_and_early_ones_are_not() {
    let spec = TaskSpec {
        train_size: 2048,
        test_size: 1024,
        ..TaskSpec::default()
    };
    let full = nearest_prototype_accuracy(&spec, spec.segments);
    let early = nearest_prototype_accuracy(&spec, 2);
    eprintln!("nearest-prototype accuracy: full {full:.2}%, 20% observed {early:.2}%");
    assert!(full >= 99.0, "full-sequence accuracy {full}");
    // thresholds from the oracle run with the default seed
    assert!(early < 90.0, "20% accuracy {early}");
    assert!(full - early > 10.0);
}

#[test]
fn batches_partition_when_half_sized() {
    let mut s = BatchStream::new(64, 32, 10, 3, true).unwrap();
    for _ in 0..20 {
        let pair = s.next_pair();
        let val = pair.val.unwrap();
        let mut all: Vec<usize> = pair.train.indices.iter().chain(&val.indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }
}

#[test]
fn batches_are_disjoint() {
    let mut s = BatchStream::new(300, 32, 10, 1, true).unwrap();
    for _ in 0..1000 {
        let pair = s.next_pair();
        let val = pair.val.unwrap();
        assert!(val.indices.iter().all(|i| !pair.train.indices.contains(i)));
        assert_eq!(pair.train.indices.len(), 32);
        assert!(pair.train.segments.iter().all(|&i| (1..=10).contains(&i)));
    }
    assert!(BatchStream::new(63, 32, 10, 1, true).is_err());
    assert!(BatchStream::new(63, 32, 10, 1, false).is_ok());
}

#[test]
fn training_batches_do_not_depend_on_pairing() {
    let mut a = BatchStream::new(300, 16, 10, 5, true).unwrap();
    let mut b = BatchStream::new(300, 16, 10, 5, false).unwrap();
    for _ in 0..50 {
        assert_eq!(a.next_pair().train, b.next_pair().train);
    }
}

#[test]
fn ratio_draws_are_uniform() {
    // chi-square goodness of fit over 10^4 draws with 9 degrees of freedom;
    // 27.88 is the 0.999 quantile.
    let mut s = BatchStream::new(100, 50, 10, 11, false).unwrap();
    let mut counts = [0usize; 10];
    for _ in 0..200 {
        for i in s.next_pair().train.segments {
            counts[i - 1] += 1;
        }
    }
    let expected = 1000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 27.88, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn container_round_trip_is_byte_exact() {
    let data = generate(&TaskSpec {
        train_size: 30,
        val_size: 5,
        test_size: 7,
        ..TaskSpec::default()
    })
    .unwrap();
    let mut bytes = Vec::new();
    export_dataset(&data, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"ERA1");
    assert_eq!(bytes.len(), 4 + 4 * 9 + 42 * (40 * 12 * 8 + 4));
    let back = import_dataset(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, data);
    let mut again = Vec::new();
    export_dataset(&back, &mut again).unwrap();
    assert_eq!(bytes, again);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(import_dataset(&mut bad.as_slice()).is_err());
    assert!(import_dataset(&mut &bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn skew_concentrates_training_clusters() {
    let spec = TaskSpec {
        dominant_cluster_share: Some(0.9),
        train_size: 2000,
        ..small_spec()
    };
    let data = generate(&spec).unwrap();
    let share = data.train.iter().filter(|s| s.cluster() == 0).count() as f64 / 2000.0;
    assert!((share - 0.9).abs() < 0.03, "{share}");
    let test_share = data.test.iter().filter(|s| s.cluster() == 0).count() as f64 / data.test.len() as f64;
    assert!(test_share < 0.4);
}

#[test]
fn nuisance_is_linear_in_its_basis() {
    let spec = TaskSpec {
        sigma: 0.0,
        epsilon: 0.0,
        ..TaskSpec::default()
    };
    let basis = era_core::data::nuisance_basis(&spec);
    assert_eq!(basis.len(), spec.frames);
    assert_eq!(basis[0].len(), spec.frames.div_ceil(2 * spec.knot_spacing) + 1);
    // the spline passes through the first and last knot
    assert!((basis[0][0] - 1.0).abs() < 1e-12);
    assert!((basis[spec.frames - 1][basis[0].len() - 1] - 1.0).abs() < 1e-12);
    // every row reproduces a constant knot vector exactly
    for row in &basis {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

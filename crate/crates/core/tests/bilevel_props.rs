use proptest::prelude::*;
use selfcal_core::autodiff::Tape;
use selfcal_core::bilevel::{
    hypergradient, outer_loss_with_targets, train_bo4sc, weighted_gd, BilevelConfig, SampleWeights,
    TapeBatch,
};
use selfcal_core::data::{gen_blobs, split, LabeledDataset, SplitSpec};
use selfcal_core::model::{init_params, predict, Activation, MlpArchitecture, MlpParams};

fn instance(seed: u64, n_train: usize, classes: usize) -> (LabeledDataset, LabeledDataset) {
    let d = gen_blobs(n_train + 6, classes, 2.0, seed).unwrap();
    let s = split(&d, SplitSpec::new(n_train, 4, 2), seed).unwrap();
    (s.train, s.val)
}

/// Central differences of the outer loss in each weight, holding the
/// correctness targets at those of the unperturbed solution.
fn finite_difference(
    arch: &MlpArchitecture,
    w: &SampleWeights,
    theta0: &MlpParams,
    cfg: &BilevelConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    targets: &[bool],
) -> Vec<f64> {
    let f = |values: Vec<f64>| {
        let w = SampleWeights::new(values).unwrap();
        let theta = weighted_gd(
            arch,
            theta0,
            train,
            &w,
            cfg.inner_steps,
            cfg.inner_lr,
            cfg.clamp_eps,
        )
        .unwrap();
        let mut tape = Tape::new();
        let nodes = theta.to_constants(&mut tape);
        let batch = TapeBatch::new(&mut tape, val);
        let out = outer_loss_with_targets(
            &mut tape,
            arch,
            &nodes,
            &batch,
            &val.labels,
            Some(targets),
            cfg.clamp_eps,
        )
        .unwrap();
        tape.value(out.loss).item().unwrap()
    };
    let h = 1e-4;
    (0..w.len())
        .map(|i| {
            let mut up = w.as_slice().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            (f(up) - f(down)) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hypergradient_matches_finite_differences(
        seed in 0u64..10_000,
        n_train in 3usize..=10,
        classes in 2usize..=3,
        hidden in 0usize..=3,
        steps in prop::sample::select(vec![1usize, 3, 5]),
        raw_w in prop::collection::vec(0.2f64..1.0, 10),
    ) {
        let hidden = if hidden == 0 { vec![] } else { vec![hidden] };
        let arch = MlpArchitecture::new(2, hidden, classes).with_activation(Activation::Tanh);
        prop_assert!(arch.num_params() <= 30);
        let (train, val) = instance(seed, n_train, classes);
        let theta0 = init_params(&arch, seed);
        let cfg = BilevelConfig { inner_steps: steps, inner_lr: 0.5, ..BilevelConfig::default() };
        let w = SampleWeights::new(raw_w[..n_train].to_vec()).unwrap();
        let hg = hypergradient(&arch, &w, &theta0, &cfg, &train, &val).unwrap();
        let targets: Vec<bool> = predict(&arch, &hg.params, &val.features)
            .unwrap()
            .iter()
            .zip(&val.labels)
            .map(|(o, &y)| o.predicted_class == y)
            .collect();
        let fd = finite_difference(&arch, &w, &theta0, &cfg, &train, &val, &targets);
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = hg.grad.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(err <= 1e-4 * scale, "relative error {} (scale {scale})", err / scale);
    }

    #[test]
    fn weights_projected_and_snapshots_counted(
        seed in 0u64..1000,
        iterations in 0usize..9,
        stride in 1usize..5,
        outer_lr in 0.0f64..500.0,
    ) {
        let arch = MlpArchitecture::new(2, vec![3], 3);
        let (train, val) = instance(seed, 8, 3);
        let cfg = BilevelConfig {
            inner_steps: 2,
            inner_lr: 0.5,
            outer_lr,
            outer_iterations: iterations,
            snapshot_stride: stride,
            ..BilevelConfig::default()
        };
        let out = train_bo4sc(&train, &val, &arch, &cfg, seed).unwrap();
        prop_assert_eq!(out.trace.snapshots.len(), iterations.div_ceil(stride));
        prop_assert_eq!(out.trace.records.len(), iterations);
        prop_assert!(out.weights.as_slice().iter().all(|w| (0.0..=1.0).contains(w)));
        for s in &out.trace.snapshots {
            prop_assert!(s.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        }
    }
}

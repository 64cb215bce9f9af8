use proptest::prelude::*;
use selfcal_core::calibration::{
    apply_isotonic, bin_predictions, ece, fit_isotonic, pav, PredictionRecord,
};

/// Least-squares monotone fit by trying every split into contiguous blocks.
fn brute_force_isotonic(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        let mut ok = true;
        let mut prev = f64::NEG_INFINITY;
        for end in 1..=n {
            let cut = end == n || mask & (1 << (end - 1)) != 0;
            if cut {
                let block = &y[start..end];
                let mean = block.iter().sum::<f64>() / block.len() as f64;
                if mean < prev - 1e-12 {
                    ok = false;
                    break;
                }
                prev = mean;
                fit.extend(std::iter::repeat_n(mean, block.len()));
                start = end;
            }
        }
        if !ok {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).map(|(f, v)| (f - v) * (f - v)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b - 1e-12) {
            best = Some((sse, fit));
        }
    }
    best.expect("the single-block fit is always monotone").1
}

fn record() -> impl Strategy<Value = PredictionRecord> {
    (0.0f64..=1.0, 0usize..3, 0usize..3)
        .prop_map(|(c, p, y)| PredictionRecord::new(c, p, y).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn pav_equals_brute_force(idx in prop::collection::vec(0usize..5, 1..=8)) {
        let y: Vec<f64> = idx.iter().map(|&k| k as f64 * 0.25).collect();
        let fit = pav(&y, &vec![1.0; y.len()]).unwrap();
        let oracle = brute_force_isotonic(&y);
        for (a, b) in fit.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-10, "{y:?}: {fit:?} vs {oracle:?}");
        }
    }

    #[test]
    fn bin_counts_cover_all_records(r in prop::collection::vec(record(), 0..200), m in 1usize..30) {
        let bins = bin_predictions(&r, m).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), r.len());
        for b in &bins {
            prop_assert!((0.0..=1.0).contains(&b.accuracy) && (0.0..=1.0).contains(&b.confidence));
        }
    }

    #[test]
    fn ece_permutation_invariant(mut r in prop::collection::vec(record(), 1..100), m in 1usize..20, rot in 0usize..100) {
        let before = ece(&r, m).unwrap();
        let k = rot % r.len();
        r.rotate_left(k);
        r.reverse();
        let after = ece(&r, m).unwrap();
        prop_assert!((before - after).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&before));
    }

    #[test]
    fn isotonic_fit_and_apply_are_monotone(r in prop::collection::vec(record(), 1..120), probes in prop::collection::vec(0.0f64..=1.0, 2..40)) {
        let map = fit_isotonic(&r).unwrap();
        for w in map.values.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for w in map.breakpoints.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        let mut probes = probes;
        probes.sort_by(f64::total_cmp);
        let out: Vec<f64> = probes.iter().map(|&p| apply_isotonic(&map, p)).collect();
        let lo = map.values[0];
        let hi = map.values[map.values.len() - 1];
        for w in out.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(out.iter().all(|&v| v >= lo && v <= hi));
    }
}

#[test]
fn calibrated_records_have_zero_ece() {
    // confidence 0.75 with 3 of 4 correct in each group, and so on per bin
    let mut r = Vec::new();
    for (conf, hits, total) in [(0.75, 3, 4), (0.5, 1, 2), (1.0, 5, 5), (0.2, 1, 5)] {
        for k in 0..total {
            r.push(PredictionRecord::new(conf, 0, usize::from(k >= hits)).unwrap());
        }
    }
    assert_eq!(ece(&r, 10).unwrap(), 0.0);
    assert_eq!(ece(&r, 15).unwrap(), 0.0);
}

#[test]
fn brute_force_oracle_fixtures() {
    assert_eq!(brute_force_isotonic(&[1.0, 0.0]), vec![0.5, 0.5]);
    let fit = brute_force_isotonic(&[0.2, 0.6, 0.4, 0.8]);
    for (a, b) in fit.iter().zip([0.2, 0.5, 0.5, 0.8]) {
        assert!((a - b).abs() < 1e-12);
    }
}

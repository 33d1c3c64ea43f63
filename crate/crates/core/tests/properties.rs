use hinova_core::baselines::{revise, Weibull};
use hinova_core::dataio::{read_capture, write_capture, Capture};
use hinova_core::detector::{kendall_tau, kendall_tau_brute, pair_counts, pair_counts_brute};
use hinova_core::eval::{auprc, auprc_brute, make_openset_folds};
use hinova_core::fingerprint::{
    build_fingerprints, build_pairwise_fingerprints, histogram, HiddenBank, HiddenSource, ModelOutputs,
};
use hinova_core::nn::{log_softmax, lstm_step, LstmParams, LstmState};
use hinova_core::preprocess::{
    featurize, slice_capture, FeatureConfig, FeatureSlice, RawSlice, SliceDataset, FEATURE_LEN, SLICE_LEN,
};
use hinova_core::seed::rng_for;
use num_complex::Complex32;
use proptest::prelude::*;
use rand::Rng;

fn tied(levels: u32, n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0..levels).prop_map(f64::from), n)
}

fn paired(levels: u32) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=60).prop_flat_map(move |n| (tied(levels, n..=n), tied(levels, n..=n)))
}

fn raw_slice(seed: u64) -> RawSlice {
    let mut rng = rng_for(&[seed]);
    RawSlice {
        i: (0..SLICE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
        q: (0..SLICE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
        device_id: 0,
        slice_index: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tau_is_symmetric((x, y) in paired(5)) {
        match (kendall_tau(&x, &y), kendall_tau(&y, &x)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert!(a.is_err() && b.is_err()),
        }
    }

    #[test]
    fn tau_ignores_increasing_transforms((x, y) in paired(6)) {
        let warped: Vec<f64> = x.iter().map(|v| v.powi(3) + (v / 3.0).exp()).collect();
        match (kendall_tau(&x, &y), kendall_tau(&warped, &y)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert!(a.is_err() && b.is_err()),
        }
    }

    #[test]
    fn tau_fast_equals_all_pairs((x, y) in paired(4)) {
        prop_assert_eq!(pair_counts(&x, &y), pair_counts_brute(&x, &y));
        match (kendall_tau(&x, &y), kendall_tau_brute(&x, &y)) {
            (Ok(a), Ok(b)) => prop_assert!((-1.0..=1.0).contains(&a) && (a - b).abs() < 1e-12),
            (a, b) => prop_assert!(a.is_err() && b.is_err()),
        }
    }

    #[test]
    fn auprc_matches_enumeration(
        pairs in prop::collection::vec((0u8..4, any::<bool>()), 2..=12)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.contains(&true) && labels.contains(&false));
        let fast = auprc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&fast));
        prop_assert!((fast - auprc_brute(&scores, &labels).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn histogram_conserves_counts(values in prop::collection::vec(-0.999f32..0.999, 0..200), bins in 1usize..40) {
        let h = histogram(&values, bins);
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().map(|&c| c as usize).sum::<usize>(), values.len());
    }

    #[test]
    fn log_softmax_rows_normalize(logits in prop::collection::vec(-50.0f64..50.0, 6..=30)) {
        let k = 3;
        let n = logits.len() / k;
        let out = log_softmax(&logits[..n * k], k);
        for row in out.chunks(k) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() < 1e-5);
        }
    }

    #[test]
    fn lstm_hidden_stays_open_unit(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = rng_for(&[seed]);
        let params = LstmParams::<f64>::new("lstm", 5, 4, 1.0, &mut rng);
        let mut state = LstmState::zeros(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-scale..scale)).collect();
            state = lstm_step(&params, &x, &state).unwrap().0;
            prop_assert!(state.h.iter().all(|h| h.abs() < 1.0));
            prop_assert!(state.c.iter().all(|c| c.is_finite()));
        }
    }

    #[test]
    fn openmax_probabilities_sum_to_one(
        logits in prop::collection::vec(-20.0f32..20.0, 2..=10),
        cdfs in prop::collection::vec(0.0f64..=1.0, 10),
        alpha in 1usize..=10,
    ) {
        let k = logits.len();
        let p = revise(&logits, &cdfs[..k], alpha.min(k));
        prop_assert_eq!(p.len(), k + 1);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn openmax_unknown_grows_with_distance(
        logits in prop::collection::vec(-10.0f32..10.0, 2..=8),
        cdfs in prop::collection::vec(0.0f64..=1.0, 8),
        shape in 0.3f64..8.0,
        scale in 0.1f64..10.0,
        d in 0.0f64..20.0,
        step in 0.0f64..20.0,
    ) {
        let k = logits.len();
        let top = (0..k).max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a))).unwrap();
        let tail = Weibull { shape, scale, shift: 0.0 };
        let (near, far) = (tail.cdf(d), tail.cdf(d + step));
        prop_assert!(far >= near);
        let mut c_near = cdfs[..k].to_vec();
        c_near[top] = near;
        let mut c_far = c_near.clone();
        c_far[top] = far;
        let alpha = k.min(3);
        prop_assert!(revise(&logits, &c_far, alpha)[k] >= revise(&logits, &c_near, alpha)[k]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn features_are_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let x = raw_slice(seed);
        let scaled = RawSlice {
            i: x.i.iter().map(|v| v * c).collect(),
            q: x.q.iter().map(|v| v * c).collect(),
            ..x.clone()
        };
        let cfg = FeatureConfig::default();
        let (a, b) = (featurize(&x, &cfg).unwrap(), featurize(&scaled, &cfg).unwrap());
        for (u, v) in a.features.iter().zip(&b.features) {
            prop_assert!((u - v).abs() <= 1e-5 * u.abs().max(1e-3));
        }
    }

    #[test]
    fn lag_zero_dominates(seed in any::<u64>()) {
        let cfg = FeatureConfig { normalize: false, ..FeatureConfig::default() };
        let f = featurize(&raw_slice(seed), &cfg).unwrap();
        for r in 0..2 {
            let row = f.row(r);
            prop_assert!(row.iter().all(|v| v.is_finite() && v.abs() <= row[0] * (1.0 + 1e-5)));
        }
    }

    #[test]
    fn slicing_partitions_the_capture(extra in 0usize..3 * SLICE_LEN, seed in any::<u64>()) {
        let mut rng = rng_for(&[seed]);
        let samples: Vec<Complex32> = (0..SLICE_LEN + extra)
            .map(|_| Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let capture = Capture::new(3, 1e6, samples.clone());
        let slices = slice_capture(&capture).unwrap();
        prop_assert_eq!(slices.len(), samples.len() / SLICE_LEN);
        let joined: Vec<(f64, f64)> = slices.iter().flat_map(|s| s.i.iter().copied().zip(s.q.iter().copied())).collect();
        let prefix: Vec<(f64, f64)> = samples[..joined.len()].iter().map(|s| (s.re as f64, s.im as f64)).collect();
        prop_assert_eq!(joined, prefix);
    }

    #[test]
    fn capture_round_trips(extra in 0usize..500, seed in any::<u64>(), rate in 1.0f64..1e7) {
        let mut rng = rng_for(&[seed]);
        let samples = (0..SLICE_LEN + extra)
            .map(|_| Complex32::new(rng.random_range(-1e3..1e3), rng.random_range(-1e-3..1e-3)))
            .collect();
        let capture = Capture::new(7, rate, samples);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.iq");
        write_capture(&capture, &path).unwrap();
        prop_assert_eq!(read_capture(&path).unwrap(), capture);
    }
}

/// Random outputs for `classes` known devices with hidden values in (−1, 1).
fn outputs(seed: u64, classes: usize, per_class: usize, hidden: usize, accuracy: f64) -> ModelOutputs {
    let mut rng = rng_for(&[seed]);
    let n = classes * per_class;
    let device_ids: Vec<u32> = (0..n).map(|i| (i / per_class) as u32 * 10).collect();
    let predictions: Vec<usize> = (0..n)
        .map(|i| {
            if rng.random_bool(accuracy) {
                i / per_class
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    let draw =
        |rng: &mut rand_chacha::ChaCha8Rng| (0..n * hidden).map(|_| rng.random_range(-0.999f32..0.999)).collect();
    ModelOutputs {
        device_ids,
        slice_indices: (0..n).collect(),
        n_classes: classes,
        logits: vec![0.0; n * classes],
        predictions,
        hidden,
        source: HiddenSource::Final,
        rows_per_slice: 1,
        previous: draw(&mut rng),
        current: draw(&mut rng),
    }
}

fn class_ids(classes: usize) -> Vec<u32> {
    (0..classes as u32).map(|c| c * 10).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fingerprint_rows_count_correct_slices(seed in any::<u64>(), classes in 2usize..5, bins in 1usize..30) {
        let out = outputs(seed, classes, 12, 6, 0.7);
        let ids = class_ids(classes);
        let bank = HiddenBank::from_outputs_allowing_empty(&out, &ids).unwrap();
        let prints = build_fingerprints(&bank, bins, false).unwrap();
        for (c, fp) in prints.iter().enumerate() {
            let correct = (0..out.len())
                .filter(|&i| out.device_ids[i] == ids[c] && out.predictions[i] == c)
                .count();
            prop_assert_eq!(fp.slices, correct);
            for node in 0..6 {
                prop_assert_eq!(fp.node(node).iter().sum::<f32>() as usize, correct);
            }
            prop_assert!(fp.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn misclassified_slices_change_nothing(seed in any::<u64>(), classes in 2usize..5) {
        let ids = class_ids(classes);
        let out = outputs(seed, classes, 10, 4, 0.6);
        let keep: Vec<usize> = (0..out.len())
            .filter(|&i| ids[out.predictions[i]] == out.device_ids[i])
            .collect();
        let m = out.hidden;
        let only_correct = ModelOutputs {
            device_ids: keep.iter().map(|&i| out.device_ids[i]).collect(),
            slice_indices: keep.clone(),
            logits: vec![0.0; keep.len() * classes],
            predictions: keep.iter().map(|&i| out.predictions[i]).collect(),
            previous: keep.iter().flat_map(|&i| out.previous[i * m..(i + 1) * m].to_vec()).collect(),
            current: keep.iter().flat_map(|&i| out.current[i * m..(i + 1) * m].to_vec()).collect(),
            ..out.clone()
        };
        let a = HiddenBank::from_outputs_allowing_empty(&out, &ids).unwrap();
        let b = HiddenBank::from_outputs_allowing_empty(&only_correct, &ids).unwrap();
        prop_assert_eq!(build_fingerprints(&a, 25, true).unwrap(), build_fingerprints(&b, 25, true).unwrap());
        prop_assert_eq!(
            build_pairwise_fingerprints(&a, 8, false).unwrap(),
            build_pairwise_fingerprints(&b, 8, false).unwrap()
        );
    }

    #[test]
    fn pairwise_marginal_is_single(seed in any::<u64>(), bins in 1usize..20, normalize in any::<bool>()) {
        let out = outputs(seed, 3, 15, 5, 0.8);
        let bank = HiddenBank::from_outputs_allowing_empty(&out, &class_ids(3)).unwrap();
        let single = build_fingerprints(&bank, bins, normalize).unwrap();
        let pairwise = build_pairwise_fingerprints(&bank, bins, normalize).unwrap();
        for (s, p) in single.iter().zip(&pairwise) {
            let marginal = p.marginal();
            prop_assert_eq!(&marginal.layout, &s.layout);
            for (u, v) in marginal.values.iter().zip(&s.values) {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn folds_never_leak(seed in any::<u64>(), per_device in 5usize..40, known in 2usize..8, unknown in 1usize..5) {
        let devices = known + unknown + 1;
        let slices = (0..devices as u32)
            .flat_map(|d| {
                (0..per_device).map(move |k| FeatureSlice { features: vec![0.0; FEATURE_LEN], device_id: d, slice_index: k })
            })
            .collect();
        let data = SliceDataset::from_slices(slices, FeatureConfig::default()).unwrap();
        let folds = make_openset_folds(&data, known, unknown, 5, seed).unwrap();
        prop_assert_eq!(folds.len(), 5);
        let mut tested = std::collections::HashSet::new();
        for f in &folds {
            f.check_hygiene().unwrap();
            prop_assert!(f.known.iter().all(|d| !f.unknown.contains(d)));
            let train: std::collections::HashSet<_> = f.train_ids().into_iter().collect();
            let test = f.test_ids();
            prop_assert!(test.iter().all(|id| !train.contains(id)));
            prop_assert!(train.iter().all(|(d, _)| f.known.contains(d)));
            let known_test = test.iter().filter(|(d, _)| f.known.contains(d)).count();
            prop_assert_eq!(known_test * unknown, (test.len() - known_test) * known);
            for id in test {
                prop_assert!(tested.insert(id), "slice tested twice");
            }
        }
    }
}

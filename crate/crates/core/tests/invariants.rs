//! Property tests for the invariants of scans, boxes, metrics and formats.

use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stsk::bbox::{ciou, giou, iou, BBox};
use stsk::eval::annotation::{format_boxes, parse_boxes};
use stsk::eval::metrics::{evaluate_errors, frame_errors, success_counts, success_thresholds, within_counts};
use stsk::fusion::{sts_mamba_forward, FusedSequence, SegmentMap};
use stsk::selfcheck::{brute_force_summary, random_blocks};
use stsk::ssm::{discretize_zoh, scan_convolutional, scan_recurrent, ContinuousSsm, DiscreteSsm, ScanState};
use stsk::synth::MotionSpec;
use stsk::tensor::Tensor;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn lti(n: usize, seed: u64) -> DiscreteSsm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stsk::selfcheck::random_lti(n, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn overlaps_stay_in_range_and_are_symmetric(a in bbox(), b in bbox()) {
        let i = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert_eq!(i, iou(&b, &a));
        let g = giou(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&g) && g <= i + 1e-15);
        prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
        prop_assert!(ciou(&a, &b) <= i + 1e-15);
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert_eq!(giou(&a, &a), 1.0);
    }

    #[test]
    fn overlaps_are_scale_and_translation_invariant(a in bbox(), b in bbox(), s in 0.25..4.0f64, dx in -30.0..30.0f64) {
        let (sa, sb) = (a.scaled(s).translated(dx, -dx), b.scaled(s).translated(dx, -dx));
        prop_assert!((iou(&a, &b) - iou(&sa, &sb)).abs() < 1e-9);
        prop_assert!((giou(&a, &b) - giou(&sa, &sb)).abs() < 1e-9);
    }

    #[test]
    fn scans_agree_and_resume(n in 1usize..=8, seed in 0u64..1000, xs in prop::collection::vec(-1.0..1.0f64, 1..=64), split in 0usize..64) {
        let d = lti(n, seed);
        let (rec, end) = scan_recurrent(&d, &xs, None).unwrap();
        let conv = scan_convolutional(&d, &xs).unwrap();
        for (a, b) in rec.iter().zip(&conv) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let k = split % xs.len();
        if k > 0 {
            let (head, mid) = scan_recurrent(&d, &xs[..k], None).unwrap();
            let (tail, end2) = scan_recurrent(&d, &xs[k..], Some(&mid)).unwrap();
            prop_assert_eq!([head, tail].concat(), rec);
            prop_assert_eq!(end2.h, end.h.clone());
            prop_assert_eq!(end2.step, xs.len());
        }
    }

    #[test]
    fn scan_is_linear_in_input_and_state(n in 1usize..=6, seed in 0u64..1000, xs in prop::collection::vec(-1.0..1.0f64, 1..=32), a in -3.0..3.0f64) {
        let d = lti(n, seed);
        let scaled: Vec<f64> = xs.iter().map(|x| a * x).collect();
        let (y, _) = scan_recurrent(&d, &xs, None).unwrap();
        let (ya, _) = scan_recurrent(&d, &scaled, None).unwrap();
        for (p, q) in y.iter().zip(&ya) {
            prop_assert!((a * p - q).abs() < 1e-9);
        }
        // a non-zero initial state adds its free response C A^t h0
        let h0 = DVector::from_fn(n, |i, _| (i as f64 + 1.0) * 0.1);
        let (yh, _) = scan_recurrent(&d, &xs, Some(&ScanState::from_vector(h0.clone()))).unwrap();
        let mut h = h0;
        for (t, (p, q)) in y.iter().zip(&yh).enumerate() {
            h = &d.a_bar * h;
            let free = d.c.dot(&h.transpose());
            prop_assert!((p + free - q).abs() < 1e-9, "t = {}", t);
        }
    }

    #[test]
    fn scalar_zoh_matches_closed_form(a in -3.0..3.0f64, b in -2.0..2.0f64, delta in 0.01..2.0f64) {
        let d = discretize_zoh(&ContinuousSsm::scalar(a, b, 1.0, delta).unwrap()).unwrap();
        let abar = (a * delta).exp();
        let bbar = if a == 0.0 { delta * b } else { (a * delta).exp_m1() / a * b };
        prop_assert!((d.a_bar[(0, 0)] - abar).abs() < 1e-9 * abar.max(1.0));
        prop_assert!((d.b_bar[0] - bbar).abs() < 1e-9 * bbar.abs().max(1.0));
    }

    #[test]
    fn diagonal_zoh_acts_per_mode(diag in prop::collection::vec(-2.0..-0.01f64, 1..=6), delta in 0.05..1.0f64) {
        let n = diag.len();
        let a = DMatrix::from_diagonal(&DVector::from_vec(diag.clone()));
        let b = DVector::from_element(n, 1.0);
        let d = discretize_zoh(&ContinuousSsm::new(a, b, RowDVector::from_element(n, 1.0), delta).unwrap()).unwrap();
        for (i, &ai) in diag.iter().enumerate() {
            prop_assert!((d.a_bar[(i, i)] - (ai * delta).exp()).abs() < 1e-12);
            prop_assert!((d.b_bar[i] - (ai * delta).exp_m1() / ai).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_outputs_are_causal(seed in 0u64..500, k in 0usize..20, bump in 0.1..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = random_blocks(6, 3, 2, &mut rng);
        let segments = SegmentMap::new(4, 10, 5);
        let f = FusedSequence {
            tokens: Tensor::randn(&[20, 6], 1.0, &mut rng),
            segments,
            stage: 0,
            frame_index: 1,
        };
        let mut g = f.clone();
        g.tokens.set(k, 0, g.tokens.at(k, 0) + bump);
        let (a, _) = sts_mamba_forward(&f, &blocks).unwrap();
        let (b, _) = sts_mamba_forward(&g, &blocks).unwrap();
        prop_assert_eq!(a.tokens.slice_rows(0, k), b.tokens.slice_rows(0, k));
    }

    #[test]
    fn success_curve_is_monotone_and_matches_brute_force(overlaps in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64], 1..60)) {
        let th = success_thresholds();
        let counts = success_counts(&overlaps, &th);
        for w in counts.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for (t, c) in th.iter().zip(&counts) {
            let brute = overlaps.iter().filter(|&&o| o > *t || o == 1.0).count();
            prop_assert_eq!(*c, brute);
        }
        let within = within_counts(&overlaps, &th);
        for w in within.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn summaries_match_brute_force(gt in prop::collection::vec(bbox(), 1..40), seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let absent: Vec<bool> = gt.iter().map(|_| rng.random_bool(0.2)).collect();
        let pred: Vec<BBox> = gt
            .iter()
            .map(|g| if rng.random_bool(0.3) { *g } else { g.translated(rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)) })
            .collect();
        let brute = brute_force_summary(&gt, &absent, &pred);
        let curve = evaluate_errors(&frame_errors(&gt, &absent, &pred)).ok().map(|r| r.summary);
        prop_assert_eq!(brute, curve);
    }

    #[test]
    fn box_files_round_trip(boxes in prop::collection::vec(bbox(), 0..30)) {
        let parsed = parse_boxes(&format_boxes(&boxes), Path::new("groundtruth.txt")).unwrap();
        prop_assert_eq!(parsed, boxes);
    }

    #[test]
    fn motion_specs_round_trip(len in 2usize..500, vx in -20.0..20.0f64, zoom in -0.05..0.05f64, seed in any::<u64>(), vary in any::<bool>()) {
        let s = MotionSpec { length: len, target_vx: vx, zoom_rate: zoom, seed, vary, bounce: !vary, ..MotionSpec::default() };
        prop_assert_eq!(MotionSpec::parse(&s.to_text()).unwrap(), s);
    }
}

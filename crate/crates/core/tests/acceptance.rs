//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line with its
//! measured values, then asserts.

use std::time::Instant;

use stsk::bbox::{giou, BBox};
use stsk::eval::attributes::{
    aspect_variation, fast_motion, out_of_view, scale_variation, small_object, Attribute, LengthClass,
};
use stsk::eval::{evaluate_benchmark, SequenceAnnotation, TrackResult};
use stsk::model::head::encode_target;
use stsk::model::loss::{compute_loss, GIOU_WEIGHT, L1_WEIGHT};
use stsk::model::train::{clip_starts, evaluate_loss, make_clip};
use stsk::model::{train_toy, HeadOutput, Model, ModelConfig, TrainConfig, TrainSequence};
use stsk::selfcheck::{
    causality_and_resumability, format_round_trips, gradient_check, loss_arithmetic, metric_oracle, oracle_pipeline,
    scan_equivalence, zoh_oracles, CheckOutcome,
};
use stsk::synth::{generate, MotionSpec, RenderedSequence};
use stsk::tensor::Tensor;
use stsk::tracker::{track_full_history, track_sequence};

fn report(id: u32, title: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("[acceptance {id:>2}] {verdict} {title}: {detail}");
}

fn report_checks(id: u32, title: &str, checks: &[CheckOutcome]) -> bool {
    let passed = checks.iter().all(|c| c.passed);
    let detail: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {}: {} ({:.2} s)", if c.passed { "ok" } else { "failed" }, c.name, c.detail, c.seconds))
        .collect();
    report(id, title, passed, &detail.join("; "));
    passed
}

fn to_train(s: &RenderedSequence) -> TrainSequence {
    TrainSequence {
        frames: s.frames.clone(),
        boxes: s.annotation.boxes.clone(),
        absent: s.annotation.absent.clone(),
        prompt: s.annotation.prompt.clone(),
    }
}

#[test]
fn criterion_01_scan_equivalence() {
    let start = Instant::now();
    let c = scan_equivalence(100, 1e-6, 1);
    let secs = start.elapsed().as_secs_f64();
    let ok = report_checks(1, "recurrent and convolutional scans agree", std::slice::from_ref(&c)) && secs < 10.0;
    assert!(ok, "{c} in {secs:.2} s");
}

#[test]
fn criterion_02_zoh_discretization() {
    let c = zoh_oracles(200, 1e-9, 2);
    assert!(report_checks(2, "zero-order hold closed forms and series", std::slice::from_ref(&c)), "{c}");
}

#[test]
fn criterion_03_causality_and_resumability() {
    let c = causality_and_resumability(50, 3);
    assert!(report_checks(3, "causal fused scan with exact handoff", std::slice::from_ref(&c)), "{c}");
}

#[test]
fn criterion_04_token_carries_all_history() {
    let spec = MotionSpec {
        length: 10,
        width: 160,
        height: 160,
        target_x: 60.0,
        target_y: 90.0,
        target_vx: 6.0,
        target_vy: -2.0,
        target_w: 16.0,
        target_h: 12.0,
        distractors: 3,
        camera_jitter: 1.0,
        seed: 4,
        ..MotionSpec::default()
    };
    let seq = generate(&spec, "seq_0000").unwrap();
    let model = Model::new(ModelConfig {
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    let init = seq.annotation.boxes[0];
    let prompt = &seq.annotation.prompt;
    let stepwise = track_sequence(&model, "seq_0000", &seq.frames, init, prompt).unwrap().boxes;
    let full = track_full_history(&model, &seq.frames, init, prompt).unwrap();
    let equal = stepwise == full && stepwise.len() == 10;
    let differing = stepwise.iter().zip(&full).filter(|(a, b)| a != b).count();
    report(
        4,
        "stepwise tracking equals full-history recomputation",
        equal,
        &format!("{} frames, {differing} differing boxes", stepwise.len()),
    );
    assert!(equal);
}

#[test]
fn criterion_05_gradient_check() {
    let start = Instant::now();
    let c = gradient_check(20, 1e-4, 1e-3, 5);
    let secs = start.elapsed().as_secs_f64();
    let ok = report_checks(5, "analytic gradients match central differences", std::slice::from_ref(&c)) && secs < 120.0;
    assert!(ok, "{c} in {secs:.2} s");
}

/// A head output whose box at the target cell is exactly `gt`, with
/// arbitrary scores.
fn head_predicting(gt: &BBox, grid: usize, out: usize, logits: Tensor) -> HeadOutput {
    let t = encode_target(gt, grid, out).unwrap();
    let cells = grid * grid;
    let mut offset = Tensor::filled(&[cells, 2], 0.5);
    let mut size = Tensor::filled(&[cells, 2], 0.2);
    offset.set(t.cell, 0, t.offset[0]);
    offset.set(t.cell, 1, t.offset[1]);
    size.set(t.cell, 0, t.size[0]);
    size.set(t.cell, 1, t.size[1]);
    HeadOutput {
        grid,
        logits,
        offset,
        size,
    }
}

#[test]
fn criterion_06_loss_arithmetic() {
    let hand = loss_arithmetic();
    let hand_gap = (giou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 2.0, 2.0)) - (1.0 / 7.0 - 2.0 / 9.0)).abs();

    // dyadic box: every corner is exact in binary
    let (grid, out) = (8, 128);
    let gt = BBox::new(24.0, 64.0, 32.0, 16.0);
    let logits = Tensor::from_vec(&[64, 1], (0..64).map(|i| (i as f64 * 0.37).sin() * 3.0).collect()).unwrap();
    let perfect = compute_loss(&head_predicting(&gt, grid, out, logits.clone()), &gt, out).unwrap();
    let zero_reg = perfect.l1 == 0.0 && perfect.giou == 0.0;

    let mut off = head_predicting(&gt, grid, out, logits);
    let cell = encode_target(&gt, grid, out).unwrap().cell;
    off.offset.set(cell, 0, 0.1);
    off.size.set(cell, 1, 0.6);
    let parts = compute_loss(&off, &gt, out).unwrap();
    let weighted = parts.cls + L1_WEIGHT * parts.l1 + GIOU_WEIGHT * parts.giou;
    let weight_gap = (parts.total - weighted).abs();
    let ok = hand.passed
        && hand_gap < 1e-12
        && zero_reg
        && weight_gap < 1e-12
        && L1_WEIGHT == 5.0
        && GIOU_WEIGHT == 2.0
        && parts.l1 > 0.0
        && parts.giou > 0.0;
    report(
        6,
        "GIoU hand case, perfect prediction, loss weighting",
        ok,
        &format!(
            "GIoU error {hand_gap:.2e}; perfect l1 {} giou {}; total - (cls + 5 l1 + 2 giou) = {weight_gap:.2e}",
            perfect.l1, perfect.giou
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_metric_oracles() {
    let curves = metric_oracle(100, 50, 7);
    let oracle = oracle_pipeline(10, 7);
    assert!(report_checks(7, "curve metrics equal brute force; oracle results score 1", &[curves, oracle]));
}

fn rule_cases() -> Vec<(&'static str, bool)> {
    let b = |x: f64, y: f64, w: f64, h: f64| BBox::new(x, y, w, h);
    let mut cases = Vec::new();
    // small object: 1% of a 100x100 frame is 100 px^2
    cases.push(("SO just below 1% area", small_object(&[b(0.0, 0.0, 9.99, 10.0)], 100, 100)));
    cases.push(("SO at exactly 1% area", !small_object(&[b(0.0, 0.0, 10.0, 10.0)], 100, 100)));
    // 22 px side on a large frame: area is tiny relative to the frame
    cases.push(("SO side just below 22", small_object(&[b(0.0, 0.0, 21.9, 21.9)], 4000, 4000)));
    cases.push(("SO side at 22", !small_object(&[b(0.0, 0.0, 22.0, 22.0)], 4000, 4000)));
    cases.push(("SO averages over frames", !small_object(&[b(0.0, 0.0, 2.0, 2.0), b(0.0, 0.0, 44.0, 44.0)], 4000, 4000)));
    // fast motion: step beyond the box side sqrt(w h) of the later frame
    let moves = |d: f64| vec![b(0.0, 0.0, 10.0, 10.0), b(d, 0.0, 10.0, 10.0)];
    cases.push(("FM step equal to side", !fast_motion(&moves(10.0), &[false, false])));
    cases.push(("FM step beyond side", fast_motion(&moves(10.01), &[false, false])));
    cases.push(("FM ignores absent neighbours", !fast_motion(&moves(50.0), &[false, true])));
    // scale and aspect ratios against the first frame
    let scaled = |s: f64| vec![b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0 * s, 10.0 * s)];
    cases.push(("SV ratio 2 inside", !scale_variation(&scaled(2.0))));
    cases.push(("SV ratio 0.5 inside", !scale_variation(&scaled(0.5))));
    cases.push(("SV ratio above 2", scale_variation(&scaled(2.01))));
    cases.push(("SV ratio below 0.5", scale_variation(&scaled(0.49))));
    let aspect = |r: f64| vec![b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 10.0 * r, 10.0)];
    cases.push(("ARV ratio 2 inside", !aspect_variation(&aspect(2.0))));
    cases.push(("ARV ratio 0.5 inside", !aspect_variation(&aspect(0.5))));
    cases.push(("ARV ratio above 2", aspect_variation(&aspect(2.1))));
    cases.push(("ARV ratio below 0.5", aspect_variation(&aspect(0.45))));
    // length classes
    cases.push(("LEN 600 is short", LengthClass::from_frames(600) == LengthClass::Short));
    cases.push(("LEN 601 is medium", LengthClass::from_frames(601) == LengthClass::Medium));
    cases.push(("LEN 1800 is medium", LengthClass::from_frames(1800) == LengthClass::Medium));
    cases.push(("LEN 1801 is long", LengthClass::from_frames(1801) == LengthClass::Long));
    // out of view: absence next to the border counts, absence mid-frame not
    let edge = vec![b(85.0, 40.0, 10.0, 10.0), BBox::default(), b(85.0, 40.0, 10.0, 10.0)];
    let middle = vec![b(45.0, 45.0, 10.0, 10.0), BBox::default(), b(45.0, 45.0, 10.0, 10.0)];
    cases.push(("OV absence at the border", out_of_view(&edge, &[false, true, false], 100, 100)));
    cases.push(("OV absence mid-frame", !out_of_view(&middle, &[false, true, false], 100, 100)));
    cases
}

/// Sequences that exercise every rule: zooms, stretches, speed, exits and
/// small targets.
fn soundness_spec(i: u64) -> MotionSpec {
    let mut s = MotionSpec {
        width: 160,
        height: 128,
        length: 24,
        target_x: 80.0,
        target_y: 64.0,
        seed: 800 + i,
        vary: true,
        distractors: (i % 3) as usize,
        noise: 0.2,
        ..MotionSpec::default()
    };
    match i % 5 {
        0 => {
            s.zoom_rate = 0.04;
            s.target_vx = 1.0;
        }
        1 => {
            s.aspect_rate = 0.07;
            s.target_vx = 2.0;
        }
        2 => {
            s.target_vx = 14.0;
            s.target_w = 10.0;
            s.target_h = 8.0;
        }
        3 => {
            s.target_vx = 6.0;
            s.length = 40;
            s.camera_jitter = 1.5;
        }
        _ => {
            s.target_w = 6.0;
            s.target_h = 5.0;
            s.target_vx = 3.0;
            s.accel_sigma = 0.5;
        }
    }
    s
}

#[test]
fn criterion_08_attribute_rules() {
    let cases = rule_cases();
    let failed: Vec<&str> = cases.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();

    let mut mismatches = Vec::new();
    let mut positives = [0usize; 6];
    for i in 0..50 {
        let spec = soundness_spec(i);
        let seq = generate(&spec, "seq").unwrap();
        let (a, t) = (&seq.annotation.attributes, seq.truth);
        let pairs = [
            ("SO", a.get(Attribute::SO), t.so),
            ("FM", a.get(Attribute::FM), t.fm),
            ("SV", a.get(Attribute::SV), t.sv),
            ("ARV", a.get(Attribute::ARV), t.arv),
            ("OV", a.get(Attribute::OV), t.ov),
            ("LEN", a.len == t.len, true),
        ];
        for (k, (name, flagged, truth)) in pairs.into_iter().enumerate() {
            positives[k] += truth as usize;
            if flagged != truth {
                mismatches.push(format!("seed {}: {name} flagged {flagged}, generator {truth}", spec.seed));
            }
        }
    }
    let exercised = positives[..5].iter().all(|&p| p > 0);
    let ok = failed.is_empty() && mismatches.is_empty() && exercised;
    report(
        8,
        "attribute rules and generator flag soundness",
        ok,
        &format!(
            "{} rule cases, failed {:?}; 50 sequences, positives SO/FM/SV/ARV/OV = {:?}, {} mismatches {:?}",
            cases.len(),
            failed,
            &positives[..5],
            mismatches.len(),
            mismatches.iter().take(3).collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}

fn overfit_run(seq: &TrainSequence) -> (Model, Vec<f64>, f64, f64) {
    let mut model = Model::new(ModelConfig {
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: 300,
        seed: 9,
        ..TrainConfig::default()
    };
    let data = std::slice::from_ref(seq);
    let clips: Vec<_> = clip_starts(data, cfg.clip_len)
        .into_iter()
        .map(|(_, a)| make_clip(&model, seq, a, cfg.clip_len, &cfg, None).unwrap())
        .collect();
    let before = evaluate_loss(&model, &clips).unwrap().total;
    let report = train_toy(&mut model, data, &cfg).unwrap();
    let after = evaluate_loss(&model, &clips).unwrap().total;
    (model, report.losses, before, after)
}

#[test]
fn criterion_09_overfit_one_sequence() {
    let start = Instant::now();
    let spec = MotionSpec {
        length: 8,
        target_vx: 4.0,
        target_vy: 2.0,
        distractors: 2,
        vary: true,
        seed: 9,
        ..MotionSpec::default()
    };
    let seq = to_train(&generate(&spec, "overfit").unwrap());
    let (m1, losses1, before, after) = overfit_run(&seq);
    let (m2, losses2, _, _) = overfit_run(&seq);
    let secs = start.elapsed().as_secs_f64();
    let decrease = 1.0 - after / before;
    let deterministic = losses1 == losses2 && m1.params() == m2.params();
    let ok = decrease >= 0.9 && deterministic && secs < 300.0;
    report(
        9,
        "overfit one 8-frame sequence in 300 steps",
        ok,
        &format!(
            "loss {before:.4} -> {after:.4} ({:.1}% decrease), repeat run identical: {deterministic}, {secs:.1} s for both runs",
            100.0 * decrease
        ),
    );
    assert!(ok);
}

/// Distractor-heavy benchmark: same-looking static distractors and a
/// target that keeps a steady heading.
fn ablation_spec(seed: u64, length: usize) -> MotionSpec {
    MotionSpec {
        length,
        target_vx: 12.0,
        target_w: 18.0,
        target_h: 14.0,
        accel_sigma: 0.3,
        camera_jitter: 1.0,
        bounce: true,
        distractors: 30,
        distractor_speed: 0.0,
        vary: true,
        seed,
        ..MotionSpec::default()
    }
}

const ABLATION_SEEDS: u64 = 5;
const ABLATION_STEPS: usize = 2000;
const ABLATION_MARGIN: f64 = 0.02;

fn ablation_auc(train: &[TrainSequence], test: &[RenderedSequence], temporal: bool, seed: u64) -> f64 {
    let mut model = Model::new(ModelConfig {
        enable_temporal: temporal,
        seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        steps: ABLATION_STEPS,
        seed,
        center_jitter: 0.1,
        scale_jitter: 0.05,
        ..TrainConfig::default()
    };
    train_toy(&mut model, train, &cfg).unwrap();
    let anns: Vec<SequenceAnnotation> = test.iter().map(|s| s.annotation.clone()).collect();
    let results: Vec<TrackResult> = test
        .iter()
        .map(|s| {
            let a = &s.annotation;
            track_sequence(&model, &a.id, &s.frames, a.boxes[0], &a.prompt).unwrap()
        })
        .collect();
    evaluate_benchmark(&anns, &results).aggregate.expect("visible frames").auc
}

#[test]
fn criterion_10_temporal_ablation() {
    let start = Instant::now();
    let train: Vec<TrainSequence> = (0..30)
        .map(|i| to_train(&generate(&ablation_spec(1000 + i, 12), "train").unwrap()))
        .collect();
    let test: Vec<RenderedSequence> = (0..20)
        .map(|i| generate(&ablation_spec(i, 30), &stsk::synth::sequence_id(i as usize)).unwrap())
        .collect();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        with.push(ablation_auc(&train, &test, true, seed));
        without.push(ablation_auc(&train, &test, false, seed));
        println!(
            "[acceptance 10] seed {seed}: temporal AUC {:.4}, no-temporal AUC {:.4}",
            with[seed as usize], without[seed as usize]
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mt, mn) = (mean(&with), mean(&without));
    let secs = start.elapsed().as_secs_f64();
    let ok = mt >= mn + ABLATION_MARGIN && secs < 1800.0;
    report(
        10,
        "temporal token helps on a distractor-heavy benchmark",
        ok,
        &format!(
            "mean AUC temporal {mt:.4} vs no-temporal {mn:.4} (gap {:+.4}, need {ABLATION_MARGIN}), {secs:.0} s",
            mt - mn
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_11_format_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let c = format_round_trips(Some(tmp.path()), 11);
    assert!(report_checks(11, "synthetic emit/parse and model save/load", std::slice::from_ref(&c)), "{c}");
}

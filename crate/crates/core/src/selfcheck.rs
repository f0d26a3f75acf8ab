//! Built-in correctness checks against independent oracles. Each check is
//! parameterized so that the fast CLI suite and the full acceptance runs
//! share one implementation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::{giou, iou, BBox};
use crate::error::{Error, Result};
use crate::eval::annotation::{parse_sequence, SequenceAnnotation, TrackResult};
use crate::eval::benchmark::evaluate_benchmark;
use crate::eval::metrics::{
    evaluate_errors, frame_errors, norm_thresholds, precision_thresholds, success_thresholds, Summary,
    PRE_THRESHOLD_PX,
};
use crate::fusion::{sts_mamba_forward, FusedSequence, SegmentMap, StsBlockParams};
use crate::model::io::{load_model, save_model};
use crate::model::net::Model;
use crate::model::train::{make_clip, TrainConfig, TrainSequence};
use crate::model::gradcheck::check_gradients;
use crate::model::ModelConfig;
use crate::ssm::{
    discretize_zoh, scan_convolutional, scan_recurrent, selective_scan, zoh_input_explicit, zoh_input_series,
    ContinuousSsm, DiscreteSsm, SelectiveProjections,
};
use crate::synth::{emit, generate, MotionSpec};
use crate::tensor::Tensor;
use crate::tokenize::{crop_and_resize, ImageFrame};

/// Result of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {} ({:.2} s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Random discrete system with row sums of `|A_bar|` below 0.9.
pub fn random_lti(n: usize, rng: &mut impl Rng) -> Result<DiscreteSsm> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.9..0.9) / n as f64);
    let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let c = RowDVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    DiscreteSsm::new(a, b, c)
}

/// Recurrent and convolutional scans on `systems` random systems with
/// `N <= 8` and `L <= 64`. Passes when the largest gap is below `tol`.
pub fn scan_equivalence(systems: usize, tol: f64, seed: u64) -> CheckOutcome {
    timed("scan equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..systems {
            let n = rng.random_range(1..=8);
            let l = rng.random_range(1..=64);
            let d = random_lti(n, &mut rng)?;
            let x: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (rec, _) = scan_recurrent(&d, &x, None)?;
            let conv = scan_convolutional(&d, &x)?;
            for (a, b) in rec.iter().zip(&conv) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst < tol, format!("{systems} systems, max |recurrent - convolutional| = {worst:.3e}")))
    })
}

/// Series terms used when comparing against the explicit input matrix.
pub const ZOH_REFERENCE_TERMS: usize = 30;

/// Closed-form scalar discretizations, then the truncated series against
/// the explicit inverse on random matrices with `||delta A||` in
/// `[0.01, 1]`.
pub fn zoh_oracles(matrices: usize, tol: f64, seed: u64) -> CheckOutcome {
    timed("zoh discretization", || {
        let e = std::f64::consts::E;
        // (a, b, delta, expected a_bar, expected b_bar)
        let cases = [
            (1.0, 0.7, 2f64.ln(), 2.0, 0.7),
            (0.0, 3.0, 0.1, 1.0, 0.3),
            (-1.0, 2.0, 1.0, 1.0 / e, 2.0 * (1.0 - 1.0 / e)),
            (-0.5, 1.0, 2.0, 1.0 / e, 2.0 * (1.0 - 1.0 / e)),
            (1e-7, 1.0, 1.0, (1e-7f64).exp(), (1e-7f64).exp_m1() / 1e-7),
        ];
        let mut worst_scalar = 0.0f64;
        for (a, b, delta, ea, eb) in cases {
            let d = discretize_zoh(&ContinuousSsm::scalar(a, b, 1.0, delta)?)?;
            worst_scalar = worst_scalar.max((d.a_bar[(0, 0)] - ea).abs()).max((d.b_bar[0] - eb).abs());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_series = 0.0f64;
        let mut tested = 0;
        while tested < matrices {
            let n = rng.random_range(1..=6);
            let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let target = rng.random_range(0.01..=1.0);
            let delta_a = &raw * (target / raw.norm());
            let delta_b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let a_bar = crate::ssm::matrix_exp(&delta_a);
            let Some(explicit) = zoh_input_explicit(&delta_a, &a_bar, &delta_b) else {
                continue;
            };
            let series = zoh_input_series(&delta_a, &delta_b, ZOH_REFERENCE_TERMS);
            worst_series = worst_series.max((explicit - series).amax());
            tested += 1;
        }
        Ok((
            worst_scalar < tol && worst_series < tol,
            format!("scalar max error {worst_scalar:.3e}, series vs explicit max error {worst_series:.3e} over {matrices} matrices"),
        ))
    })
}

/// Random fusion stack with state size `n` on width `d`.
pub fn random_blocks(d: usize, n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<StsBlockParams> {
    (0..count)
        .map(|_| {
            let a_log = Tensor::from_vec(&[d, n], (0..d * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect())
                .expect("d x n");
            StsBlockParams {
                proj: SelectiveProjections {
                    w_delta: Tensor::randn(&[d, d], 0.3, rng),
                    b_delta: Tensor::filled(&[1, d], -1.0),
                    w_b: Tensor::randn(&[d, n], 0.3, rng),
                    b_b: Tensor::randn(&[1, n], 0.1, rng),
                    w_c: Tensor::randn(&[d, n], 0.3, rng),
                    b_c: Tensor::randn(&[1, n], 0.1, rng),
                    a_log,
                },
                w_out: Tensor::randn(&[d, d], 0.3, rng),
                b_out: Tensor::zeros(&[1, d]),
            }
        })
        .collect()
}

/// On `sequences` random fused sequences: changing the token at position
/// `k` leaves every fused output before `k` bit-identical, and a selective
/// scan split at `k` and resumed from the carried state reproduces the
/// single pass bit for bit.
pub fn causality_and_resumability(sequences: usize, seed: u64) -> CheckOutcome {
    timed("causality and resumability", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = Vec::new();
        for s in 0..sequences {
            let d = rng.random_range(2..=8);
            let n = rng.random_range(1..=4);
            let segments = SegmentMap::new(rng.random_range(1..=6), rng.random_range(1..=12), rng.random_range(0..=5));
            let len = segments.total();
            let blocks = random_blocks(d, n, 2, &mut rng);
            let fused = FusedSequence {
                tokens: Tensor::randn(&[len, d], 1.0, &mut rng),
                segments,
                stage: 0,
                frame_index: 1,
            };
            let k = rng.random_range(0..len);
            let mut perturbed = fused.clone();
            let col = rng.random_range(0..d);
            perturbed.tokens.set(k, col, perturbed.tokens.at(k, col) + rng.random_range(0.5..2.0));
            let (a, _) = sts_mamba_forward(&fused, &blocks)?;
            let (b, _) = sts_mamba_forward(&perturbed, &blocks)?;
            if a.tokens.slice_rows(0, k) != b.tokens.slice_rows(0, k) {
                failures.push(format!("sequence {s}: output before {k} changed"));
            }

            let proj = &blocks[0].proj;
            let (full, h_full) = selective_scan(&fused.tokens, proj, None)?;
            let split = rng.random_range(1..=len);
            let (head, h_mid) = selective_scan(&fused.tokens.slice_rows(0, split), proj, None)?;
            let mut joined = head;
            let mut h_end = h_mid.clone();
            if split < len {
                let (tail, h) = selective_scan(&fused.tokens.slice_rows(split, len - split), proj, Some(&h_mid))?;
                joined = Tensor::from_vec(&[len, d], [joined.data(), tail.data()].concat())?;
                h_end = h;
            }
            if joined != full || h_end != h_full {
                failures.push(format!("sequence {s}: resumed scan split at {split} differs"));
            }
        }
        Ok(match failures.first() {
            None => (true, format!("{sequences} sequences, prefixes and resumed scans bit-identical")),
            Some(f) => (false, format!("{} of {sequences} failed, first: {f}", failures.len())),
        })
    })
}

/// A two-frame training clip from a short synthetic sequence.
pub fn toy_clip(model: &Model, seed: u64) -> Result<crate::model::train::Clip> {
    let spec = MotionSpec {
        length: 2,
        width: 160,
        height: 160,
        target_x: 80.0,
        target_y: 80.0,
        target_vx: 5.0,
        target_vy: -3.0,
        distractors: 2,
        vary: true,
        seed,
        ..MotionSpec::default()
    };
    let seq = generate(&spec, "gradcheck")?;
    let train = TrainSequence {
        frames: seq.frames,
        boxes: seq.annotation.boxes,
        absent: seq.annotation.absent,
        prompt: seq.annotation.prompt,
    };
    make_clip(model, &train, 0, 2, &TrainConfig::default(), None)
}

/// Central differences against the reverse-mode gradient on `count` random
/// scalars of the toy model.
pub fn gradient_check(count: usize, eps: f64, tol: f64, seed: u64) -> CheckOutcome {
    timed("gradient check", || {
        let model = Model::new(ModelConfig {
            seed,
            ..ModelConfig::default()
        })?;
        let clip = toy_clip(&model, seed)?;
        let entries = check_gradients(&model, &clip, count, eps, seed)?;
        let worst = entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .ok_or_else(|| Error::Invariant("no gradient entries".into()))?;
        Ok((
            worst.rel_error < tol,
            format!(
                "{count} scalars, worst relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                worst.rel_error, worst.param, worst.index, worst.analytic, worst.numeric
            ),
        ))
    })
}

/// Every summary metric by explicit threshold loops, with no sorting and no
/// shared counting code.
pub fn brute_force_summary(gt: &[BBox], absent: &[bool], pred: &[BBox]) -> Option<Summary> {
    let visible: Vec<(BBox, BBox)> = gt
        .iter()
        .zip(absent)
        .zip(pred)
        .filter(|((_, &a), _)| !a)
        .map(|((g, _), p)| (*g, *p))
        .collect();
    let n = visible.len();
    if n == 0 {
        return None;
    }
    let success = |overlap: &dyn Fn(&BBox, &BBox) -> f64| {
        let mut hits = 0usize;
        for t in success_thresholds() {
            for (g, p) in &visible {
                let o = overlap(p, g);
                if o > t || o == 1.0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / (success_thresholds().len() * n) as f64
    };
    let centre_gap = |g: &BBox, p: &BBox, norm: bool| {
        let (dx, dy) = (p.center().0 - g.center().0, p.center().1 - g.center().1);
        if norm {
            (dx / g.w).hypot(dy / g.h)
        } else {
            dx.hypot(dy)
        }
    };
    let mut pre_hits = 0usize;
    for (g, p) in &visible {
        if centre_gap(g, p, false) <= PRE_THRESHOLD_PX as f64 {
            pre_hits += 1;
        }
    }
    let mut npre_hits = 0usize;
    for t in norm_thresholds() {
        for (g, p) in &visible {
            if centre_gap(g, p, true) <= t {
                npre_hits += 1;
            }
        }
    }
    debug_assert_eq!(precision_thresholds()[PRE_THRESHOLD_PX], PRE_THRESHOLD_PX as f64);
    Some(Summary {
        pre: pre_hits as f64 / n as f64,
        npre: npre_hits as f64 / (norm_thresholds().len() * n) as f64,
        auc: success(&|p, g| iou(p, g)),
        cauc: success(&|p, g| crate::bbox::ciou(p, g).max(0.0)),
        macc: visible.iter().map(|(g, p)| iou(p, g)).sum::<f64>() / n as f64,
    })
}

/// A random prediction near `g`: exact, nudged, or far off.
fn random_prediction(g: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    match rng.random_range(0..4) {
        0 => *g,
        1 => BBox::new(
            g.x + rng.random_range(-3.0..3.0),
            g.y + rng.random_range(-3.0..3.0),
            g.w * rng.random_range(0.7..1.4),
            g.h * rng.random_range(0.7..1.4),
        ),
        2 => BBox::new(g.x + rng.random_range(-40.0..40.0), g.y + rng.random_range(-40.0..40.0), g.w, g.h),
        // integer shifts land exactly on precision thresholds
        _ => g.translated(rng.random_range(-25..=25) as f64, 0.0),
    }
}

/// Curve-based metrics against [`brute_force_summary`] on `pairs` random
/// `frames`-long sequences, requiring exact equality.
pub fn metric_oracle(pairs: usize, frames: usize, seed: u64) -> CheckOutcome {
    timed("metric oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = 0;
        let mut compared = 0;
        for _ in 0..pairs {
            let gt: Vec<BBox> = (0..frames)
                .map(|_| {
                    BBox::new(
                        rng.random_range(0.0..200.0),
                        rng.random_range(0.0..200.0),
                        rng.random_range(4.0..60.0),
                        rng.random_range(4.0..60.0),
                    )
                })
                .collect();
            let absent: Vec<bool> = (0..frames).map(|_| rng.random_bool(0.1)).collect();
            let pred: Vec<BBox> = gt.iter().map(|g| random_prediction(g, &mut rng)).collect();
            let Some(brute) = brute_force_summary(&gt, &absent, &pred) else {
                continue;
            };
            let curve = evaluate_errors(&frame_errors(&gt, &absent, &pred))?.summary;
            compared += 1;
            if curve != brute {
                mismatches += 1;
            }
        }
        Ok((mismatches == 0, format!("{compared} sequences compared, {mismatches} mismatches")))
    })
}

/// Results equal to the ground truth must score 1 on every summary metric.
pub fn oracle_pipeline(sequences: usize, seed: u64) -> CheckOutcome {
    timed("oracle pipeline", || {
        let mut anns: Vec<SequenceAnnotation> = Vec::new();
        for i in 0..sequences {
            let spec = MotionSpec {
                length: 12,
                width: 96,
                height: 96,
                target_x: 48.0,
                target_y: 48.0,
                target_vx: 6.0,
                target_w: 12.0,
                target_h: 9.0,
                vary: true,
                seed: seed + i as u64,
                ..MotionSpec::default()
            };
            anns.push(generate(&spec, &crate::synth::sequence_id(i))?.annotation);
        }
        let results: Vec<TrackResult> = anns
            .iter()
            .map(|a| TrackResult {
                sequence_id: a.id.clone(),
                boxes: a.boxes.clone(),
                fps: None,
            })
            .collect();
        let report = evaluate_benchmark(&anns, &results);
        let s = report
            .aggregate
            .ok_or_else(|| Error::UndefinedMetrics("no sequence was scored".into()))?;
        let ones = [s.pre, s.npre, s.auc, s.cauc, s.macc].iter().all(|&v| v == 1.0);
        Ok((ones, format!("{sequences} sequences: {s:?}")))
    })
}

/// GIoU on a hand-worked pair, and exact zeros for a perfect prediction.
pub fn loss_arithmetic() -> CheckOutcome {
    timed("loss arithmetic", || {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        let gap = (giou(&a, &b) - (1.0 / 7.0 - 2.0 / 9.0)).abs();
        let perfect = giou(&a, &a) == 1.0 && iou(&a, &a) == 1.0;
        Ok((gap < 1e-12 && perfect, format!("GIoU error {gap:.3e}, identical boxes give 1: {perfect}")))
    })
}

fn scratch_dir(tag: &str) -> Result<PathBuf> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("stsk-{tag}-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Synthetic sequences survive emit and parse unchanged; a saved model
/// reloads to bit-identical forward outputs.
pub fn format_round_trips(dir: Option<&Path>, seed: u64) -> CheckOutcome {
    timed("format round trips", || {
        let owned;
        let root = match dir {
            Some(d) => d,
            None => {
                owned = scratch_dir("roundtrip")?;
                &owned
            }
        };
        let spec = MotionSpec {
            length: 5,
            width: 96,
            height: 80,
            target_x: 48.0,
            target_y: 40.0,
            target_vx: 9.0,
            target_w: 11.0,
            target_h: 7.5,
            distractors: 2,
            camera_jitter: 0.7,
            zoom_rate: 0.02,
            vary: true,
            seed,
            ..MotionSpec::default()
        };
        let seq = generate(&spec, "seq_0000")?;
        let seq_dir = root.join("seq_0000");
        emit(&seq, &seq_dir, true)?;
        let parsed = parse_sequence(&seq_dir)?;
        let annotation_ok = parsed == seq.annotation;
        let frames_ok = (0..seq.frames.len())
            .map(|i| crate::eval::annotation::load_frame(&seq_dir, i))
            .collect::<Result<Vec<RgbImage>>>()?
            == seq.frames;

        let model = Model::new(ModelConfig {
            seed,
            ..ModelConfig::default()
        })?;
        let path = root.join("model.stsk");
        save_model(&model, &path)?;
        let loaded = load_model(&path)?;
        let forward = |m: &Model| -> Result<(Vec<f64>, Vec<f64>)> {
            let cfg = m.config();
            let frame = ImageFrame::from_rgb8(&seq.frames[1], 2);
            let init = seq.annotation.boxes[0];
            let template = crop_and_resize(&frame, &init, cfg.template_crop())?.image;
            let search = crop_and_resize(&frame, &init, cfg.search_crop())?.image;
            let lang = m.encode_prompt(&seq.annotation.prompt).tokens;
            let (head, token) = m.forward(&template, &search, &lang, &m.initial_token())?;
            let mut v = head.logits.data().to_vec();
            v.extend_from_slice(head.offset.data());
            v.extend_from_slice(head.size.data());
            Ok((v, token.value.data().to_vec()))
        };
        let model_ok = forward(&model)? == forward(&loaded)? && loaded.params() == model.params();
        if dir.is_none() {
            let _ = std::fs::remove_dir_all(root);
        }
        Ok((
            annotation_ok && frames_ok && model_ok,
            format!("annotation equal: {annotation_ok}, frames equal: {frames_ok}, model outputs equal: {model_ok}"),
        ))
    })
}

/// The fast suite behind the `selfcheck` command.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        scan_equivalence(100, 1e-6, seed),
        zoh_oracles(50, 1e-9, seed),
        causality_and_resumability(20, seed),
        loss_arithmetic(),
        gradient_check(6, 1e-4, 1e-3, seed),
        metric_oracle(100, 50, seed),
        oracle_pipeline(4, seed),
        format_round_trips(None, seed),
    ]
}

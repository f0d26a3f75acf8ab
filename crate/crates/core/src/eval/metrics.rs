//! One-pass-evaluation metrics over the visible frames of a sequence.
//!
//! * success curve: fraction of frames with overlap above each threshold in
//!   `0, 0.01, ..., 1`; a perfect overlap of exactly 1 counts at every
//!   threshold. AUC is the curve mean.
//! * precision curve: fraction with centre error at most `0..=50` px; Pre is
//!   its value at 20 px.
//! * normalized precision: centre error with each axis divided by the
//!   ground-truth width or height, thresholds `0, 0.01, ..., 0.5`; nPre is
//!   the curve mean.
//! * cAUC: the success AUC with complete IoU clamped at 0 as the overlap.
//! * mACC: mean IoU.

use serde::Serialize;

use crate::bbox::{ciou, iou, BBox};
use crate::error::{Error, Result};
use crate::eval::annotation::{SequenceAnnotation, TrackResult};

pub const SUCCESS_STEPS: usize = 100;
pub const PRECISION_MAX_PX: usize = 50;
pub const PRE_THRESHOLD_PX: usize = 20;
pub const NORM_STEPS: usize = 50;
pub const NORM_MAX: f64 = 0.5;

pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|i| i as f64 / SUCCESS_STEPS as f64).collect()
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..=PRECISION_MAX_PX).map(|i| i as f64).collect()
}

pub fn norm_thresholds() -> Vec<f64> {
    (0..=NORM_STEPS).map(|i| i as f64 * NORM_MAX / NORM_STEPS as f64).collect()
}

/// Per-frame measurements on the visible frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameErrors {
    pub iou: Vec<f64>,
    /// `max(cIoU, 0)`.
    pub ciou: Vec<f64>,
    pub center_px: Vec<f64>,
    pub center_norm: Vec<f64>,
}

impl FrameErrors {
    pub fn len(&self) -> usize {
        self.iou.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iou.is_empty()
    }
}

pub fn frame_errors(gt: &[BBox], absent: &[bool], pred: &[BBox]) -> FrameErrors {
    let mut e = FrameErrors {
        iou: Vec::new(),
        ciou: Vec::new(),
        center_px: Vec::new(),
        center_norm: Vec::new(),
    };
    for ((g, &a), p) in gt.iter().zip(absent).zip(pred) {
        if a {
            continue;
        }
        e.iou.push(iou(p, g));
        e.ciou.push(ciou(p, g).max(0.0));
        let (gx, gy) = g.center();
        let (px, py) = p.center();
        let (dx, dy) = (px - gx, py - gy);
        e.center_px.push(dx.hypot(dy));
        e.center_norm.push((dx / g.w).hypot(dy / g.h));
    }
    e
}

/// Frames whose overlap passes each threshold.
pub fn success_counts(overlaps: &[f64], thresholds: &[f64]) -> Vec<usize> {
    let mut v = overlaps.to_vec();
    v.sort_by(f64::total_cmp);
    let perfect = v.len() - v.partition_point(|&o| o < 1.0);
    thresholds
        .iter()
        .map(|&t| {
            let above = v.len() - v.partition_point(|&o| o <= t);
            if t >= 1.0 {
                above + perfect
            } else {
                above
            }
        })
        .collect()
}

/// Frames whose error is at most each threshold.
pub fn within_counts(errors: &[f64], thresholds: &[f64]) -> Vec<usize> {
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    thresholds.iter().map(|&t| v.partition_point(|&e| e <= t)).collect()
}

fn fractions(counts: &[usize], n: usize) -> Vec<f64> {
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// Curve mean computed from the integer counts.
fn mean_of(counts: &[usize], n: usize) -> f64 {
    counts.iter().sum::<usize>() as f64 / (counts.len() * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub pre: f64,
    pub npre: f64,
    pub auc: f64,
    pub cauc: f64,
    pub macc: f64,
}

impl Summary {
    pub fn mean(items: &[Summary]) -> Option<Summary> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Summary) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Summary {
            pre: avg(|s| s.pre),
            npre: avg(|s| s.npre),
            auc: avg(|s| s.auc),
            cauc: avg(|s| s.cauc),
            macc: avg(|s| s.macc),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub summary: Summary,
    /// Visible frames evaluated.
    pub frames: usize,
    /// Over `success_thresholds()`.
    pub success: Vec<f64>,
    /// Over `success_thresholds()`, with complete IoU.
    pub complete_success: Vec<f64>,
    /// Over `precision_thresholds()`.
    pub precision: Vec<f64>,
    /// Over `norm_thresholds()`.
    pub norm_precision: Vec<f64>,
}

pub fn evaluate_errors(e: &FrameErrors) -> Result<MetricReport> {
    let n = e.len();
    if n == 0 {
        return Err(Error::UndefinedMetrics("no visible frames".into()));
    }
    let st = success_thresholds();
    let s = success_counts(&e.iou, &st);
    let cs = success_counts(&e.ciou, &st);
    let p = within_counts(&e.center_px, &precision_thresholds());
    let np = within_counts(&e.center_norm, &norm_thresholds());
    Ok(MetricReport {
        summary: Summary {
            pre: p[PRE_THRESHOLD_PX] as f64 / n as f64,
            npre: mean_of(&np, n),
            auc: mean_of(&s, n),
            cauc: mean_of(&cs, n),
            macc: e.iou.iter().sum::<f64>() / n as f64,
        },
        frames: n,
        success: fractions(&s, n),
        complete_success: fractions(&cs, n),
        precision: fractions(&p, n),
        norm_precision: fractions(&np, n),
    })
}

/// OPE metrics of one result against its annotation.
pub fn evaluate_sequence(ann: &SequenceAnnotation, res: &TrackResult) -> Result<MetricReport> {
    if res.boxes.len() != ann.frame_count() {
        return Err(Error::InvalidAnnotation(format!(
            "{}: {} result boxes for {} frames",
            ann.id,
            res.boxes.len(),
            ann.frame_count()
        )));
    }
    evaluate_errors(&frame_errors(&ann.boxes, &ann.absent, &res.boxes))
        .map_err(|e| Error::UndefinedMetrics(format!("{}: {e}", ann.id)))
}

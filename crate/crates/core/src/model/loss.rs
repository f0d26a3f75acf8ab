//! Tracking loss: penalty-reduced focal loss on the score map plus L1 and
//! generalized-IoU terms on the box decoded at the ground-truth cell.

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::Result;
use crate::model::head::{encode_target, HeadOutput};
use crate::tensor::Tensor;

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;
/// Focal exponent on the predicted probability.
pub const FOCAL_ALPHA: f64 = 2.0;
/// Focal exponent reducing the penalty near a peak.
pub const FOCAL_BETA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    /// `1 - GIoU`, in `[0, 2]`.
    pub giou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            cls: 0.0,
            l1: 0.0,
            giou: 0.0,
            total: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            cls: self.cls * s,
            l1: self.l1 * s,
            giou: self.giou * s,
            total: self.total * s,
        }
    }
}

/// Loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0];
        LossBreakdown {
            cls: v(self.cls),
            l1: v(self.l1),
            giou: v(self.giou),
            total: v(self.total),
        }
    }
}

/// Generalized IoU of two `1 x 4` corner boxes `(x1, y1, x2, y2)`.
pub fn giou_graph(g: &mut Graph, p: Var, t: Var) -> Var {
    let col = |g: &mut Graph, v: Var, i: usize| g.slice_cols(v, i, 1);
    let [px1, py1, px2, py2] = [0, 1, 2, 3].map(|i| col(g, p, i));
    let [tx1, ty1, tx2, ty2] = [0, 1, 2, 3].map(|i| col(g, t, i));
    let zero = g.constant(Tensor::scalar(0.0));

    let side = |g: &mut Graph, a1: Var, a2: Var, b1: Var, b2: Var| {
        let hi = g.min(a2, b2);
        let lo = g.max(a1, b1);
        let d = g.sub(hi, lo);
        g.max(d, zero)
    };
    let iw = side(g, px1, px2, tx1, tx2);
    let ih = side(g, py1, py2, ty1, ty2);
    let inter = g.mul(iw, ih);

    let area = |g: &mut Graph, x1: Var, y1: Var, x2: Var, y2: Var| {
        let w = g.sub(x2, x1);
        let h = g.sub(y2, y1);
        g.mul(w, h)
    };
    let ap = area(g, px1, py1, px2, py2);
    let at = area(g, tx1, ty1, tx2, ty2);
    let sum = g.add(ap, at);
    let union = g.sub(sum, inter);

    let span = |g: &mut Graph, a1: Var, a2: Var, b1: Var, b2: Var| {
        let hi = g.max(a2, b2);
        let lo = g.min(a1, b1);
        g.sub(hi, lo)
    };
    let hw = span(g, px1, px2, tx1, tx2);
    let hh = span(g, py1, py2, ty1, ty2);
    let hull = g.mul(hw, hh);

    let iou = g.div(inter, union);
    let gap = g.sub(hull, union);
    let pen = g.div(gap, hull);
    g.sub(iou, pen)
}

fn corners(b: &BBox, out: f64) -> Tensor {
    Tensor::from_vec(&[1, 4], vec![b.x / out, b.y / out, b.x2() / out, b.y2() / out]).expect("1x4")
}

/// Loss for one search frame. `logits`, `offset` and `size` are the head's
/// `cells x 1`, `cells x 2`, `cells x 2` maps; `gt` is in crop pixels.
pub fn loss_graph(g: &mut Graph, logits: Var, offset: Var, size: Var, gt: &BBox, grid: usize, out_size: usize) -> Result<LossVars> {
    let target = encode_target(gt, grid, out_size)?;
    let cls = g.focal_loss(logits, target.heatmap.clone(), FOCAL_ALPHA, FOCAL_BETA);

    // predicted box at the gt cell, normalized by the crop side
    let (r, c) = (target.cell / grid, target.cell % grid);
    let off = g.slice_rows(offset, target.cell, 1);
    let sz = g.slice_rows(size, target.cell, 1);
    let cell = g.constant(Tensor::from_vec(&[1, 2], vec![c as f64, r as f64])?);
    let shifted = g.add(off, cell);
    let centre = g.scale(shifted, 1.0 / grid as f64);
    let half = g.scale(sz, 0.5);
    let lo = g.sub(centre, half);
    let hi = g.add(centre, half);
    let pred = g.concat_cols(&[lo, hi]);
    let truth = g.constant(corners(gt, out_size as f64));

    let diff = g.sub(pred, truth);
    let ad = g.abs(diff);
    let l1 = g.mean(ad);
    let gi = giou_graph(g, pred, truth);
    let neg = g.scale(gi, -1.0);
    let giou = g.add_scalar(neg, 1.0);

    let wl1 = g.scale(l1, L1_WEIGHT);
    let wg = g.scale(giou, GIOU_WEIGHT);
    let reg = g.add(wl1, wg);
    let total = g.add(cls, reg);
    Ok(LossVars { cls, l1, giou, total })
}

/// [`loss_graph`] evaluated on a finished head output.
pub fn compute_loss(h: &HeadOutput, gt: &BBox, out_size: usize) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let logits = g.constant(h.logits.clone());
    let offset = g.constant(h.offset.clone());
    let size = g.constant(h.size.clone());
    Ok(loss_graph(&mut g, logits, offset, size, gt, h.grid, out_size)?.values(&g))
}

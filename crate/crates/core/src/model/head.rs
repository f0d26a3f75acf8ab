//! Head outputs, box decoding and heatmap target construction.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::ssm::sigmoid;
use crate::tensor::Tensor;
use crate::tokenize::CropWindow;

/// Peak scores below this are flagged as low confidence.
pub const LOW_CONFIDENCE: f64 = 1e-3;
/// Minimum IoU a corner-shifted box must keep, as in CornerNet targets.
pub const HEATMAP_MIN_OVERLAP: f64 = 0.7;

/// Per-cell maps over a `grid x grid` search map, rows in row-major cell
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub grid: usize,
    /// `grid^2 x 1` pre-sigmoid scores.
    pub logits: Tensor,
    /// `grid^2 x 2` sub-cell offsets `(x, y)` in `[0, 1)`.
    pub offset: Tensor,
    /// `grid^2 x 2` sizes `(w, h)` as fractions of the crop side.
    pub size: Tensor,
}

impl HeadOutput {
    pub fn new(grid: usize, logits: Tensor, offset: Tensor, size: Tensor) -> Result<Self> {
        let cells = grid * grid;
        if logits.shape() != [cells, 1] || offset.shape() != [cells, 2] || size.shape() != [cells, 2] {
            return Err(Error::Shape(format!(
                "head maps {:?} {:?} {:?} for a {grid}x{grid} grid",
                logits.shape(),
                offset.shape(),
                size.shape()
            )));
        }
        Ok(Self {
            grid,
            logits,
            offset,
            size,
        })
    }

    /// Classification map after the sigmoid.
    pub fn scores(&self) -> Tensor {
        self.logits.map(sigmoid)
    }

    /// Index of the highest score; ties go to the lowest row-major index.
    pub fn peak(&self) -> usize {
        let l = self.logits.data();
        let mut best = 0;
        for (i, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = i;
            }
        }
        best
    }

    /// Box encoded at `cell`, in crop pixels.
    pub fn box_at(&self, cell: usize, out_size: usize) -> BBox {
        let stride = out_size as f64 / self.grid as f64;
        let (r, c) = (cell / self.grid, cell % self.grid);
        let cx = (c as f64 + self.offset.at(cell, 0)) * stride;
        let cy = (r as f64 + self.offset.at(cell, 1)) * stride;
        let w = self.size.at(cell, 0) * out_size as f64;
        let h = self.size.at(cell, 1) * out_size as f64;
        BBox::from_center(cx, cy, w, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrediction {
    /// Source-frame pixels.
    pub bbox: BBox,
    pub score: f64,
    pub low_confidence: bool,
}

/// Peak box in crop pixels with its score.
pub fn decode_crop(h: &HeadOutput, out_size: usize) -> (BBox, f64) {
    let peak = h.peak();
    (h.box_at(peak, out_size), sigmoid(h.logits.at(peak, 0)))
}

/// Decodes the peak box, maps it through the crop window and clips it to
/// the frame. A box that ends up entirely outside is shifted inside.
pub fn decode_box(h: &HeadOutput, window: &CropWindow, frame_w: usize, frame_h: usize) -> BoxPrediction {
    let (crop_box, score) = decode_crop(h, window.out_size);
    let b = window.to_frame(&crop_box);
    let (fw, fh) = (frame_w as f64, frame_h as f64);
    let bbox = b.clip_to(fw, fh).unwrap_or_else(|| {
        let w = b.w.clamp(1.0, fw);
        let h = b.h.clamp(1.0, fh);
        BBox::new(b.x.clamp(0.0, fw - w), b.y.clamp(0.0, fh - h), w, h)
    });
    BoxPrediction {
        bbox,
        score,
        low_confidence: score < LOW_CONFIDENCE,
    }
}

/// CornerNet radius (in cells) for a box of `w x h` cells.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> f64 {
    let root = |a: f64, b: f64, c: f64| (b + (b * b - 4.0 * a * c).sqrt()) / 2.0;
    let r1 = root(1.0, h + w, w * h * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r2 = root(4.0, 2.0 * (h + w), (1.0 - min_overlap) * w * h);
    let r3 = root(4.0 * min_overlap, -2.0 * min_overlap * (h + w), (min_overlap - 1.0) * w * h);
    r1.min(r2).min(r3)
}

/// Training targets for one ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    /// `grid^2 x 1`, exactly 1 at `cell`.
    pub heatmap: Tensor,
    pub cell: usize,
    pub offset: [f64; 2],
    pub size: [f64; 2],
}

/// Builds the Gaussian heatmap and regression targets for a box given in
/// crop pixels. Fails when the box centre lies outside the crop.
pub fn encode_target(gt: &BBox, grid: usize, out_size: usize) -> Result<TargetMaps> {
    if gt.is_degenerate() || !gt.is_finite() {
        return Err(Error::InvalidAnnotation(format!("degenerate target box {gt:?}")));
    }
    let out = out_size as f64;
    let stride = out / grid as f64;
    let (cx, cy) = gt.center();
    if !(0.0..out).contains(&cx) || !(0.0..out).contains(&cy) {
        return Err(Error::InvalidAnnotation(format!(
            "target centre ({cx:.1}, {cy:.1}) is outside the {out_size}px crop"
        )));
    }
    let (c, r) = ((cx / stride).floor() as usize, (cy / stride).floor() as usize);
    let c = c.min(grid - 1);
    let r = r.min(grid - 1);
    let radius = gaussian_radius(gt.w / stride, gt.h / stride, HEATMAP_MIN_OVERLAP)
        .max(0.0)
        .floor() as i64;
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let mut heatmap = Tensor::zeros(&[grid * grid, 1]);
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr < 0 || cc < 0 || rr >= grid as i64 || cc >= grid as i64 {
                continue;
            }
            let v = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
            heatmap.set(rr as usize * grid + cc as usize, 0, v);
        }
    }
    Ok(TargetMaps {
        heatmap,
        cell: r * grid + c,
        offset: [cx / stride - c as f64, cy / stride - r as f64],
        size: [gt.w / out, gt.h / out],
    })
}

impl TargetMaps {
    /// A head output that reproduces the target box exactly at the peak.
    pub fn as_head_output(&self, grid: usize) -> HeadOutput {
        let cells = grid * grid;
        let logits = self.heatmap.map(|y| if y >= 1.0 { 10.0 } else { -10.0 + y });
        let mut offset = Tensor::zeros(&[cells, 2]);
        let mut size = Tensor::filled(&[cells, 2], 0.1);
        offset.row_mut(self.cell).copy_from_slice(&self.offset);
        size.row_mut(self.cell).copy_from_slice(&self.size);
        HeadOutput {
            grid,
            logits,
            offset,
            size,
        }
    }
}

//! Axis-aligned boxes in `[x, y, w, h]` form (top-left corner, size) and
//! the overlap measures used by both the losses and the benchmark.

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        if self.w > 0.0 && self.h > 0.0 {
            self.w * self.h
        } else {
            0.0
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    /// Intersection with the frame `[0, width] x [0, height]`, if non-empty.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<Self> {
        let x1 = self.x.max(0.0);
        let y1 = self.y.max(0.0);
        let x2 = self.x2().min(width);
        let y2 = self.y2().min(height);
        (x2 > x1 && y2 > y1).then(|| Self::new(x1, y1, x2 - x1, y2 - y1))
    }

    /// Area from corner differences, so that a box intersected with itself
    /// reproduces it exactly.
    fn corner_area(&self) -> f64 {
        (self.x2() - self.x) * (self.y2() - self.y)
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw > 0.0 && ih > 0.0 {
            iw * ih
        } else {
            0.0
        }
    }

    fn hull(&self, other: &BBox) -> BBox {
        let x1 = self.x.min(other.x);
        let y1 = self.y.min(other.y);
        let x2 = self.x2().max(other.x2());
        let y2 = self.y2().max(other.y2());
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    fn hull_area(&self, other: &BBox) -> f64 {
        let w = self.x2().max(other.x2()) - self.x.min(other.x);
        let h = self.y2().max(other.y2()) - self.y.min(other.y);
        w * h
    }

    fn center_distance_sq(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).powi(2) + (ay - by).powi(2)
    }
}

/// Intersection over union. Zero-area boxes overlap nothing.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection(b);
    let union = a.corner_area() + b.corner_area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`, in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection(b);
    let union = a.corner_area() + b.corner_area() - inter;
    let hull = a.hull_area(b);
    inter / union - (hull - union) / hull
}

/// Complete IoU: `IoU - rho^2 / c^2 - alpha v` where `rho` is the centre
/// distance, `c` the hull diagonal and `v` the aspect-ratio consistency term.
pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let i = iou(a, b);
    let hull = a.hull(b);
    let c2 = hull.w * hull.w + hull.h * hull.h;
    let rho2 = a.center_distance_sq(b);
    let v = 4.0 / (PI * PI) * ((b.w / b.h).atan() - (a.w / a.h).atan()).powi(2);
    let alpha = if v > 0.0 { v / ((1.0 - i) + v) } else { 0.0 };
    i - rho2 / c2 - alpha * v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes() {
        let a = BBox::new(3.0, 4.0, 10.0, 7.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert_eq!(ciou(&a, &a), 1.0);
        let b = BBox::new(0.1, 0.7, 0.2, 0.3);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(giou(&b, &b), 1.0);
    }

    #[test]
    fn overlapping_squares() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert!((giou(&a, &b) - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        assert!((giou(&a, &b) + 0.0794).abs() < 1e-4);
    }

    #[test]
    fn far_apart_tends_to_minus_one() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let mut prev = 0.0;
        for d in [10.0, 100.0, 1e4, 1e6] {
            let g = giou(&a, &BBox::new(d, d, 1.0, 1.0));
            assert!(g < prev);
            prev = g;
        }
        assert!(prev > -1.0 && prev < -0.999_99);
    }

    #[test]
    fn zero_area_overlaps_nothing() {
        let a = BBox::new(0.0, 0.0, 0.0, 5.0);
        let b = BBox::new(0.0, 0.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&b, &a), 0.0);
    }

    #[test]
    fn ciou_penalizes_offset_and_aspect() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        let shifted = BBox::new(1.0, 0.0, 4.0, 4.0);
        let c = ciou(&a, &shifted);
        // hull 5x4, rho^2 = 1, same aspect
        assert!((c - (iou(&a, &shifted) - 1.0 / 41.0)).abs() < 1e-15);
        let stretched = BBox::new(0.0, 0.0, 4.0, 8.0);
        assert!(ciou(&a, &stretched) < iou(&a, &stretched));
    }

    #[test]
    fn clip() {
        let b = BBox::new(-5.0, 2.0, 10.0, 4.0);
        assert_eq!(b.clip_to(20.0, 20.0), Some(BBox::new(0.0, 2.0, 5.0, 4.0)));
        assert_eq!(BBox::new(-15.0, 2.0, 10.0, 4.0).clip_to(20.0, 20.0), None);
    }
}

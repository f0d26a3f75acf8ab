//! Target and camera kinematics.
//!
//! The world is viewed through a camera that translates the scene, shakes
//! and zooms about the frame centre:
//! `p_img = (p_world - c) * s_t + c + shift_t`, with `c` the frame centre.
//! At frame 0 the camera is the identity, so the initial target position
//! is given in frame pixels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bbox::BBox;
use crate::synth::spec::{MotionSpec, BACKGROUNDS, COLORS};

/// Axis-aligned ellipse in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Horizontal semi-axis.
    pub a: f64,
    /// Vertical semi-axis.
    pub b: f64,
}

/// Samples per axis when measuring a clipped ellipse.
const EXTENT_SAMPLES: usize = 1024;

impl Ellipse {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx - self.a, self.cy - self.b, 2.0 * self.a, 2.0 * self.b)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        u * u + v * v <= 1.0
    }

    /// Bounding box of the part inside `[0, w] x [0, h]`, or `None` when no
    /// part of the ellipse is inside.
    pub fn visible_extent(&self, w: f64, h: f64) -> Option<BBox> {
        let bb = self.bbox();
        if bb.x >= 0.0 && bb.y >= 0.0 && bb.x2() <= w && bb.y2() <= h {
            return Some(bb);
        }
        let x_lo = bb.x.max(0.0);
        let x_hi = bb.x2().min(w);
        if x_hi <= x_lo || bb.y2().min(h) <= bb.y.max(0.0) {
            return None;
        }
        let mut xs: Vec<f64> = (0..=EXTENT_SAMPLES)
            .map(|i| x_lo + (x_hi - x_lo) * i as f64 / EXTENT_SAMPLES as f64)
            .collect();
        xs.push(self.cx.clamp(x_lo, x_hi));
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for x in xs {
            let u = (x - self.cx) / self.a;
            let half = self.b * (1.0 - u * u).max(0.0).sqrt();
            let lo = (self.cy - half).max(0.0);
            let hi = (self.cy + half).min(h);
            if hi > lo {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(lo);
                y1 = y1.max(hi);
            }
        }
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameState {
    pub target: Ellipse,
    pub distractors: Vec<Ellipse>,
    /// Zoom factor `s_t`.
    pub scale: f64,
    pub shift: (f64, f64),
    /// Global brightness multiplier.
    pub brightness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<FrameState>,
    pub color: String,
    pub background: String,
}

impl Trajectory {
    /// Visible target extent per frame; `None` when the target is out of
    /// view.
    pub fn visible_boxes(&self) -> Vec<Option<BBox>> {
        let (w, h) = (self.width as f64, self.height as f64);
        self.frames.iter().map(|f| f.target.visible_extent(w, h)).collect()
    }

    /// Camera transform of frame `t`: world to frame pixels.
    pub fn to_frame(&self, t: usize, wx: f64, wy: f64) -> (f64, f64) {
        let f = &self.frames[t];
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        ((wx - cx) * f.scale + cx + f.shift.0, (wy - cy) * f.scale + cy + f.shift.1)
    }

    /// Inverse camera transform of frame `t`.
    pub fn to_world(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        let f = &self.frames[t];
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        ((x - cx - f.shift.0) / f.scale + cx, (y - cy - f.shift.1) / f.scale + cy)
    }
}

/// Mirrors a coordinate back into `[lo, hi]` and flips its velocity.
fn reflect(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        return;
    }
    if *p < lo {
        *p = (2.0 * lo - *p).min(hi);
        *v = v.abs();
    } else if *p > hi {
        *p = (2.0 * hi - *p).max(lo);
        *v = -v.abs();
    }
}

/// Runs the kinematics. All randomness comes from `spec.seed`.
pub fn simulate(spec: &MotionSpec) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let mut pos = (spec.target_x, spec.target_y);
    let mut vel = (spec.target_vx, spec.target_vy);
    let mut color = spec.color.clone();
    let mut background = spec.background.clone();
    if spec.vary {
        pos = (rng.random_range(0.2..0.8) * fw, rng.random_range(0.2..0.8) * fh);
        let speed = vel.0.hypot(vel.1);
        let heading = rng.random_range(0.0..2.0 * PI);
        vel = (speed * heading.cos(), speed * heading.sin());
        color = COLORS[rng.random_range(0..COLORS.len())].0.to_string();
        background = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())].0.to_string();
    }

    let side = spec.target_w.max(spec.target_h);
    let mut distractors: Vec<((f64, f64), (f64, f64))> = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let mut p = (0.0, 0.0);
        for _ in 0..100 {
            p = (rng.random_range(0.1..0.9) * fw, rng.random_range(0.1..0.9) * fh);
            if (p.0 - pos.0).hypot(p.1 - pos.1) >= 2.0 * side {
                break;
            }
        }
        let heading = rng.random_range(0.0..2.0 * PI);
        distractors.push((p, (spec.distractor_speed * heading.cos(), spec.distractor_speed * heading.sin())));
    }

    let accel = Normal::new(0.0, spec.accel_sigma).expect("validated sigma");
    let jitter = Normal::new(0.0, spec.camera_jitter).expect("validated sigma");
    let (cx, cy) = (fw / 2.0, fh / 2.0);
    let mut frames = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            vel.0 += accel.sample(&mut rng);
            vel.1 += accel.sample(&mut rng);
            pos.0 += vel.0;
            pos.1 += vel.1;
            for (p, v) in &mut distractors {
                p.0 += v.0;
                p.1 += v.1;
            }
            if spec.bounce {
                reflect(&mut pos.0, &mut vel.0, side, fw - side);
                reflect(&mut pos.1, &mut vel.1, side, fh - side);
                for (p, v) in &mut distractors {
                    reflect(&mut p.0, &mut v.0, side, fw - side);
                    reflect(&mut p.1, &mut v.1, side, fh - side);
                }
            }
        }
        let shake = if t > 0 {
            (jitter.sample(&mut rng), jitter.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let shift = (spec.camera_vx * t as f64 + shake.0, spec.camera_vy * t as f64 + shake.1);
        let scale = (1.0 + spec.zoom_rate).powi(t as i32);
        let stretch = (1.0 + spec.aspect_rate).powi(t as i32).sqrt();
        let (a, b) = (spec.target_w / 2.0 * scale * stretch, spec.target_h / 2.0 * scale / stretch);
        let place = |p: (f64, f64)| Ellipse {
            cx: (p.0 - cx) * scale + cx + shift.0,
            cy: (p.1 - cy) * scale + cy + shift.1,
            a,
            b,
        };
        frames.push(FrameState {
            target: place(pos),
            distractors: distractors.iter().map(|(p, _)| place(*p)).collect(),
            scale,
            shift,
            brightness: 1.0 + spec.brightness_amplitude * (2.0 * PI * t as f64 / spec.brightness_period).sin(),
        });
    }
    Trajectory {
        width: spec.width,
        height: spec.height,
        frames,
        color,
        background,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_case() {
        let t = simulate(&MotionSpec::default());
        let boxes = t.visible_boxes();
        assert!(boxes.iter().all(|b| *b == boxes[0] && b.is_some()));
    }

    #[test]
    fn camera_cancels_target_motion() {
        let spec = MotionSpec {
            target_vx: 3.0,
            target_vy: -1.5,
            camera_vx: -3.0,
            camera_vy: 1.5,
            length: 10,
            ..MotionSpec::default()
        };
        let t = simulate(&spec);
        for f in &t.frames {
            assert!((f.target.cx - 128.0).abs() < 1e-9 && (f.target.cy - 128.0).abs() < 1e-9);
        }
        // the world position did move: the inverse transform recovers it
        let (wx, _) = t.to_world(9, t.frames[9].target.cx, t.frames[9].target.cy);
        assert!((wx - (128.0 + 27.0)).abs() < 1e-9);
    }

    #[test]
    fn leaving_the_frame_turns_absent_at_the_first_outside_frame() {
        let spec = MotionSpec {
            target_x: 200.0,
            target_vx: 10.0,
            target_w: 20.0,
            target_h: 20.0,
            length: 12,
            ..MotionSpec::default()
        };
        let boxes = simulate(&spec).visible_boxes();
        // centre at 200 + 10 t; the left edge 190 + 10 t passes 256 after
        // t = 6.6, so frame 7 is the first one fully outside
        for (t, b) in boxes.iter().enumerate() {
            assert_eq!(b.is_none(), t >= 7, "frame {t}");
        }
        let partial = boxes[6].unwrap();
        assert!((partial.x - 250.0).abs() < 0.01 && (partial.x2() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn clipped_extent_of_a_corner_ellipse() {
        let e = Ellipse { cx: -5.0, cy: -5.0, a: 10.0, b: 10.0 };
        let b = e.visible_extent(100.0, 100.0).unwrap();
        // the part inside the first quadrant spans x, y in [0, 5 (sqrt(3) - 1)]
        let edge = 5.0 * (3.0f64.sqrt() - 1.0);
        assert!(b.x.abs() < 1e-9 && b.y.abs() < 1e-9);
        assert!((b.x2() - edge).abs() < 0.05 && (b.y2() - edge).abs() < 0.05, "{b:?}");
        // the bbox corner overlaps the frame while the ellipse does not
        let miss = Ellipse { cx: -8.0, cy: -8.0, a: 10.0, b: 10.0 };
        assert_eq!(miss.visible_extent(100.0, 100.0), None);
    }

    #[test]
    fn bouncing_target_stays_in_view() {
        let spec = MotionSpec {
            target_vx: 23.0,
            target_vy: -17.0,
            accel_sigma: 1.0,
            bounce: true,
            length: 200,
            ..MotionSpec::default()
        };
        let t = simulate(&spec);
        for f in &t.frames {
            assert!((20.0..=236.0).contains(&f.target.cx) && (20.0..=236.0).contains(&f.target.cy), "{:?}", f.target);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = MotionSpec {
            vary: true,
            target_vx: 2.0,
            accel_sigma: 0.3,
            camera_jitter: 1.0,
            distractors: 3,
            distractor_speed: 1.0,
            seed: 9,
            ..MotionSpec::default()
        };
        assert_eq!(simulate(&spec), simulate(&spec));
        let other = MotionSpec { seed: 10, ..spec.clone() };
        assert_ne!(simulate(&spec), simulate(&other));
    }
}

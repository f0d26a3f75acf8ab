//! Rasterization: a world-anchored value-noise background, same-shaped
//! distractors and the target ellipse with supersampled edges, under a
//! global brightness multiplier.

use image::{Rgb, RgbImage};

use crate::synth::simulate::{Ellipse, Trajectory};
use crate::synth::spec::{background_rgb, color_rgb, MotionSpec};

/// Subsamples per pixel axis for edge coverage.
const SUPERSAMPLE: usize = 4;
/// Lattice spacing of the coarse and fine noise octaves, world pixels.
const NOISE_CELLS: [f64; 2] = [24.0, 6.0];
const NOISE_WEIGHTS: [f64; 2] = [0.65, 0.35];

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64(octave.wrapping_add(0x9e37_79b9) ^ mix64((ix as u64) ^ mix64(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in `[0, 1]` at a world position.
pub fn texture(seed: u64, x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    for (o, (&cell, &w)) in NOISE_CELLS.iter().zip(&NOISE_WEIGHTS).enumerate() {
        let (gx, gy) = (x / cell, y / cell);
        let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let l = |dx: i64, dy: i64| lattice(seed, o as u64, ix + dx, iy + dy);
        let top = l(0, 0) + (l(1, 0) - l(0, 0)) * fx;
        let bottom = l(0, 1) + (l(1, 1) - l(0, 1)) * fx;
        v += w * (top + (bottom - top) * fy);
    }
    v
}

/// Fraction of pixel `(px, py)` covered by the ellipse.
pub fn coverage(e: &Ellipse, px: usize, py: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if e.contains(x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn blend(img: &mut [[f64; 3]], width: usize, height: usize, e: &Ellipse, color: [f64; 3], contrast: f64) {
    let bb = e.bbox();
    let x0 = bb.x.floor().max(0.0) as usize;
    let y0 = bb.y.floor().max(0.0) as usize;
    let x1 = (bb.x2().ceil().max(0.0) as usize).min(width);
    let y1 = (bb.y2().ceil().max(0.0) as usize).min(height);
    for py in y0..y1 {
        for px in x0..x1 {
            let c = coverage(e, px, py);
            if c > 0.0 {
                let p = &mut img[py * width + px];
                for k in 0..3 {
                    p[k] += contrast * c * (color[k] - p[k]);
                }
            }
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders frame `t` of a trajectory.
pub fn render_frame(traj: &Trajectory, spec: &MotionSpec, t: usize) -> RgbImage {
    let (w, h) = (traj.width, traj.height);
    let base = background_rgb(&traj.background).expect("validated background");
    let color = color_rgb(&traj.color).expect("validated colour");
    let tex_seed = mix64(spec.seed ^ 0x0bac_6a0d);
    let mut buf = vec![[0.0; 3]; w * h];
    for py in 0..h {
        for px in 0..w {
            let (wx, wy) = traj.to_world(t, px as f64 + 0.5, py as f64 + 0.5);
            let k = 1.0 + spec.noise * 2.0 * (texture(tex_seed, wx, wy) - 0.5);
            buf[py * w + px] = [base[0] * k, base[1] * k, base[2] * k];
        }
    }
    let f = &traj.frames[t];
    for d in &f.distractors {
        blend(&mut buf, w, h, d, color, spec.contrast);
    }
    blend(&mut buf, w, h, &f.target, color, spec.contrast);
    let m = f.brightness;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = buf[y as usize * w + x as usize];
        Rgb([to_u8(p[0] * m), to_u8(p[1] * m), to_u8(p[2] * m)])
    })
}

pub fn render(traj: &Trajectory, spec: &MotionSpec) -> Vec<RgbImage> {
    (0..traj.frames.len()).map(|t| render_frame(traj, spec, t)).collect()
}

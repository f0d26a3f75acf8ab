//! Synthetic benchmark sequences: a moving target seen by a moving,
//! shaking, zooming camera, rendered as ellipses on textured noise and
//! written in the benchmark directory layout.

pub mod render;
pub mod simulate;
pub mod spec;

use std::fs;
use std::path::Path;

use image::RgbImage;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::annotation::{frame_path, write_annotation, SequenceAnnotation, FRAMES_DIR};
use crate::eval::attributes::{auto_attributes, Attribute, Attributes, LengthClass};

pub use render::render;
pub use simulate::{simulate, Trajectory};
pub use spec::MotionSpec;

/// Attribute values known to the generator, computed from its own state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorTruth {
    pub so: bool,
    pub fm: bool,
    pub sv: bool,
    pub arv: bool,
    pub ov: bool,
    pub len: LengthClass,
    pub iv: bool,
    pub sd: bool,
    pub cm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSequence {
    pub frames: Vec<RgbImage>,
    pub annotation: SequenceAnnotation,
    pub truth: GeneratorTruth,
}

/// Ground truth straight from the trajectory: the visible extents, the
/// out-of-view frames, the camera motion and the brightness modulation.
pub fn generator_truth(traj: &Trajectory, spec: &MotionSpec) -> GeneratorTruth {
    let extents = traj.visible_boxes();
    let shown: Vec<&BBox> = extents.iter().flatten().collect();
    let frame_area = (traj.width * traj.height) as f64;
    let count = shown.len().max(1) as f64;
    let mean_rel = shown.iter().map(|b| b.area() / frame_area).sum::<f64>() / count;
    let mean_side = shown.iter().map(|b| b.area().sqrt()).sum::<f64>() / count;

    let mut fm = false;
    for pair in extents.windows(2) {
        if let [Some(p), Some(q)] = pair {
            let (dx, dy) = (q.center().0 - p.center().0, q.center().1 - p.center().1);
            fm |= (dx * dx + dy * dy).sqrt() > q.area().sqrt();
        }
    }
    let out_of_range = |r: f64| r < 0.5 || r > 2.0;
    let (mut sv, mut arv) = (false, false);
    if let Some(first) = shown.first() {
        for b in &shown {
            sv |= out_of_range((b.area() / first.area()).sqrt());
            arv |= out_of_range((b.w / b.h) / (first.w / first.h));
        }
    }
    let levels: Vec<f64> = traj.frames.iter().map(|f| f.brightness).collect();
    let lo = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = levels.iter().copied().fold(0.0, f64::max);
    GeneratorTruth {
        so: !shown.is_empty() && mean_rel < 0.01 && mean_side < 22.0,
        fm,
        sv,
        arv,
        ov: extents.iter().any(Option::is_none),
        len: LengthClass::from_frames(traj.frames.len()),
        iv: hi > 2.0 * lo,
        sd: !traj.frames[0].distractors.is_empty(),
        cm: spec.camera_vx != 0.0 || spec.camera_vy != 0.0 || spec.camera_jitter > 0.0 || spec.zoom_rate != 0.0,
    }
}

/// Simulates and renders one sequence. Attribute flags come from the
/// generator for CM and SD and from [`auto_attributes`] for the rest.
pub fn generate(spec: &MotionSpec, id: &str) -> Result<RenderedSequence> {
    spec.validate()?;
    let traj = simulate(spec);
    let extents = traj.visible_boxes();
    if extents[0].is_none() {
        return Err(Error::Config(format!("{id}: the target starts outside the frame")));
    }
    let frames = render(&traj, spec);
    let truth = generator_truth(&traj, spec);
    let mut attributes = Attributes::default();
    attributes.set(Attribute::CM, truth.cm);
    attributes.set(Attribute::SD, truth.sd);
    let mut annotation = SequenceAnnotation {
        id: id.to_string(),
        boxes: extents.iter().map(|b| b.unwrap_or_default()).collect(),
        absent: extents.iter().map(Option::is_none).collect(),
        prompt: format!("a {} multi-rotor drone flying over {}", traj.color, traj.background),
        attributes,
        frame_size: Some((traj.width, traj.height)),
    };
    auto_attributes(&annotation, Some(&frames))?.apply(&mut annotation.attributes);
    Ok(RenderedSequence {
        frames,
        annotation,
        truth,
    })
}

/// Writes the annotation files and, if asked, `frames/NNNNNN.png`.
pub fn emit(seq: &RenderedSequence, dir: &Path, with_frames: bool) -> Result<()> {
    write_annotation(&seq.annotation, dir)?;
    if with_frames {
        let fdir = dir.join(FRAMES_DIR);
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for (i, img) in seq.frames.iter().enumerate() {
            let p = frame_path(dir, i);
            img.save(&p).map_err(|e| Error::Image {
                path: p,
                msg: e.to_string(),
            })?;
        }
    }
    Ok(())
}

/// Sequence `i` of a set uses the spec's seed plus `i`.
pub fn sequence_spec(spec: &MotionSpec, i: usize) -> MotionSpec {
    MotionSpec {
        seed: spec.seed.wrapping_add(i as u64),
        ..spec.clone()
    }
}

pub fn sequence_id(i: usize) -> String {
    format!("seq_{i:04}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::annotation::parse_sequence;

    #[test]
    fn emit_parse_round_trip() {
        let spec = MotionSpec {
            length: 6,
            target_vx: 40.0,
            target_x: 200.0,
            distractors: 3,
            camera_jitter: 0.5,
            ..MotionSpec::default()
        };
        let seq = generate(&spec, "seq_0000").unwrap();
        assert!(seq.annotation.attributes.get(Attribute::SD));
        assert!(seq.annotation.attributes.get(Attribute::CM));
        assert!(seq.annotation.absent.iter().any(|&a| a));
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("seq_0000");
        emit(&seq, &dir, true).unwrap();
        assert_eq!(parse_sequence(&dir).unwrap(), seq.annotation);
        assert_eq!(crate::eval::annotation::load_frame(&dir, 5).unwrap(), seq.frames[5]);
    }

    #[test]
    fn long_sequence_is_medium() {
        let spec = MotionSpec {
            length: 700,
            width: 32,
            height: 32,
            target_x: 16.0,
            target_y: 16.0,
            target_w: 6.0,
            target_h: 6.0,
            ..MotionSpec::default()
        };
        let seq = generate(&spec, "long").unwrap();
        assert_eq!(seq.annotation.attributes.len, LengthClass::Medium);
        assert_eq!(crate::eval::annotation::format_attributes(&seq.annotation.attributes).trim().rsplit(',').next(), Some("1"));
    }

    #[test]
    fn starting_outside_is_rejected() {
        let spec = MotionSpec {
            target_x: -100.0,
            ..MotionSpec::default()
        };
        assert!(generate(&spec, "x").is_err());
    }
}

//! Dataset statistics: brightness, relative speed, target position, size
//! and sequence length distributions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::annotation::SequenceAnnotation;
use crate::eval::attributes::{gray, FrameSource, LengthClass};

/// Fixed-width histogram; values past either end land in the end bins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub total: u64,
    pub sum: f64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
            total: 0,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let pos = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let i = if pos.is_nan() { 0 } else { pos.clamp(0.0, (bins - 1) as f64) as usize };
        self.counts[i] += 1;
        self.total += 1;
        self.sum += v;
    }

    /// Mean of the added values (not of the bin centres); 0 when empty.
    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.sum / self.total as f64
        }
    }

    pub fn edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        (0..=bins).map(|i| self.lo + (self.hi - self.lo) * i as f64 / bins as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let e = self.edges();
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{c}", e[i], e[i + 1]);
        }
        s
    }
}

pub const POSITION_GRID: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub frames: usize,
    pub visible_frames: usize,
    /// Per-frame mean gray level on 0-255; empty without pixels.
    pub brightness: Histogram,
    /// Centre displacement over `sqrt(w h)` between consecutive visible
    /// frames.
    pub relative_speed: Histogram,
    /// `sqrt(w h / (W H))`; needs the frame size.
    pub relative_size: Histogram,
    /// Normalized centre positions on a 10x10 grid, row-major from the top.
    pub position: Vec<u64>,
    pub length: [u64; 3],
}

pub fn mean_gray(img: &RgbImage) -> f64 {
    let n = (img.width() * img.height()) as f64;
    img.pixels().map(|p| gray(p.0)).sum::<f64>() / n
}

/// Statistics over `annotations`; `frames[i]`, when given, supplies the
/// pixels of sequence `i`.
pub fn dataset_stats(annotations: &[SequenceAnnotation], frames: Option<&[&dyn FrameSource]>) -> Result<DatasetStats> {
    let mut st = DatasetStats {
        sequences: annotations.len(),
        frames: 0,
        visible_frames: 0,
        brightness: Histogram::new(0.0, 256.0, 32),
        relative_speed: Histogram::new(0.0, 3.0, 30),
        relative_size: Histogram::new(0.0, 0.5, 50),
        position: vec![0; POSITION_GRID * POSITION_GRID],
        length: [0; 3],
    };
    for (s, ann) in annotations.iter().enumerate() {
        st.frames += ann.frame_count();
        st.length[LengthClass::from_frames(ann.frame_count()).code() as usize] += 1;
        for t in ann.visible() {
            st.visible_frames += 1;
            let b = &ann.boxes[t];
            if t > 0 && !ann.absent[t - 1] {
                let (ax, ay) = ann.boxes[t - 1].center();
                let (bx, by) = b.center();
                st.relative_speed.add((bx - ax).hypot(by - ay) / (b.w * b.h).sqrt());
            }
            if let Some((w, h)) = ann.frame_size {
                st.relative_size.add((b.w * b.h / (w * h) as f64).sqrt());
                let (cx, cy) = b.center();
                let cell = |v: f64, side: usize| ((v / side as f64 * POSITION_GRID as f64).floor().max(0.0) as usize).min(POSITION_GRID - 1);
                st.position[cell(cy, h) * POSITION_GRID + cell(cx, w)] += 1;
            }
        }
        if let Some(src) = frames.and_then(|f| f.get(s)) {
            for t in 0..ann.frame_count() {
                st.brightness.add(mean_gray(&src.frame(t)?));
            }
        }
    }
    Ok(st)
}

impl DatasetStats {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("statistic,value\n");
        for (k, v) in [
            ("sequences", self.sequences as f64),
            ("frames", self.frames as f64),
            ("visible_frames", self.visible_frames as f64),
            ("brightness_mean", self.brightness.mean()),
            ("relative_speed_mean", self.relative_speed.mean()),
            ("relative_size_mean", self.relative_size.mean()),
        ] {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn position_csv(&self) -> String {
        let mut s = String::from("row,col,count\n");
        for (i, c) in self.position.iter().enumerate() {
            let _ = writeln!(s, "{},{},{c}", i / POSITION_GRID, i % POSITION_GRID);
        }
        s
    }

    pub fn length_csv(&self) -> String {
        let mut s = String::from("class,count\n");
        for class in LengthClass::ALL {
            let _ = writeln!(s, "{},{}", class.name(), self.length[class.code() as usize]);
        }
        s
    }

    /// Writes the summary and every histogram as CSV into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("summary.csv", self.summary_csv()),
            ("brightness.csv", self.brightness.to_csv()),
            ("relative_speed.csv", self.relative_speed.to_csv()),
            ("relative_size.csv", self.relative_size.to_csv()),
            ("position.csv", self.position_csv()),
            ("length.csv", self.length_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use crate::eval::attributes::Attributes;

    fn ann(boxes: Vec<BBox>) -> SequenceAnnotation {
        let n = boxes.len();
        SequenceAnnotation {
            id: "s".into(),
            boxes,
            absent: vec![false; n],
            prompt: String::new(),
            attributes: Attributes::default(),
            frame_size: Some((100, 100)),
        }
    }

    #[test]
    fn static_box_has_zero_speed() {
        let st = dataset_stats(&[ann(vec![BBox::new(10.0, 10.0, 5.0, 5.0); 6])], None).unwrap();
        assert_eq!(st.relative_speed.total, 5);
        assert_eq!(st.relative_speed.mean(), 0.0);
        assert!(st.summary_csv().contains("relative_speed_mean,0\n"));
    }

    #[test]
    fn moving_one_size_per_frame_has_unit_speed() {
        let boxes = (0..5).map(|i| BBox::new(8.0 * i as f64, 3.0, 8.0, 8.0)).collect();
        let st = dataset_stats(&[ann(boxes)], None).unwrap();
        assert_eq!(st.relative_speed.mean(), 1.0);
    }

    #[test]
    fn gray_frames_have_their_level() {
        let a = ann(vec![BBox::new(10.0, 10.0, 5.0, 5.0); 3]);
        let frames = vec![RgbImage::from_pixel(4, 4, image::Rgb([128, 128, 128])); 3];
        let src: [&dyn FrameSource; 1] = [&frames];
        let st = dataset_stats(&[a], Some(&src)).unwrap();
        assert!((st.brightness.mean() - 128.0).abs() < 1e-9);
        assert_eq!(st.brightness.total, 3);
    }

    #[test]
    fn histogram_binning_and_empty_input() {
        let mut h = Histogram::new(0.0, 1.0, 4);
        for v in [-1.0, 0.0, 0.3, 0.99, 5.0] {
            h.add(v);
        }
        assert_eq!(h.counts, vec![2, 1, 0, 2]);
        let st = dataset_stats(&[], None).unwrap();
        assert_eq!(st.relative_speed.total, 0);
        assert_eq!(st.length, [0, 0, 0]);
    }
}

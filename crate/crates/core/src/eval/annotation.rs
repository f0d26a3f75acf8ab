//! Sequence directories and result files.
//!
//! A sequence directory holds `groundtruth.txt` (`x,y,w,h` per frame),
//! `absent.txt` (`0`/`1` per frame), `language.txt` (one line),
//! `attributes.txt` (15 comma-separated flags, the last one a length class
//! `0`/`1`/`2`) and optionally `frames/000001.png`, `frames/000002.png`, ...
//! numbered from 1.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::warn;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::attributes::{Attributes, LengthClass};

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const ABSENT_FILE: &str = "absent.txt";
pub const LANGUAGE_FILE: &str = "language.txt";
pub const ATTRIBUTES_FILE: &str = "attributes.txt";
pub const FRAMES_DIR: &str = "frames";

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceAnnotation {
    pub id: String,
    /// Per-frame boxes; absent frames carry the all-zero sentinel.
    pub boxes: Vec<BBox>,
    pub absent: Vec<bool>,
    pub prompt: String,
    pub attributes: Attributes,
    /// `(width, height)` when known from the frames.
    pub frame_size: Option<(usize, usize)>,
}

impl SequenceAnnotation {
    pub fn frame_count(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_visible(&self, i: usize) -> bool {
        !self.absent[i]
    }

    /// Indices of the visible frames.
    pub fn visible(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.frame_count()).filter(|&i| !self.absent[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if self.absent.len() != n {
            return Err(Error::InvalidAnnotation(format!(
                "{}: {n} boxes but {} absent flags",
                self.id,
                self.absent.len()
            )));
        }
        for i in self.visible() {
            let b = &self.boxes[i];
            if !b.is_finite() || b.is_degenerate() {
                return Err(Error::InvalidAnnotation(format!(
                    "{}: frame {} is visible with box {b:?}",
                    self.id,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Predicted boxes of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub sequence_id: String,
    pub boxes: Vec<BBox>,
    /// Frames per second of the run, when measured.
    pub fps: Option<f64>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses `x,y,w,h` lines. Line numbers in errors are 1-based.
pub fn parse_boxes(text: &str, file: &Path) -> Result<Vec<BBox>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_error(file, i + 1, format!("`{line}`: {e}")))?;
            match v[..] {
                [x, y, w, h] if v.iter().all(|c| c.is_finite()) => Ok(BBox::new(x, y, w, h)),
                _ => Err(parse_error(file, i + 1, format!("expected four finite numbers, got `{line}`"))),
            }
        })
        .collect()
}

fn parse_absent(text: &str, file: &Path) -> Result<Vec<bool>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| match line.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(parse_error(file, i + 1, format!("expected 0 or 1, got `{other}`"))),
        })
        .collect()
}

fn parse_attributes(text: &str, file: &Path) -> Result<Attributes> {
    let line = text.lines().next().unwrap_or("");
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 15 {
        return Err(parse_error(file, 1, format!("expected 15 flags, got {}", fields.len())));
    }
    let mut flags = [false; 14];
    for (i, f) in fields[..14].iter().enumerate() {
        flags[i] = match *f {
            "0" => false,
            "1" => true,
            other => return Err(parse_error(file, 1, format!("flag {} is `{other}`", i + 1))),
        };
    }
    let len = match fields[14] {
        "0" => LengthClass::Short,
        "1" => LengthClass::Medium,
        "2" => LengthClass::Long,
        other => return Err(parse_error(file, 1, format!("length class is `{other}`"))),
    };
    Ok(Attributes { flags, len })
}

/// Path of frame `i` (0-based) inside a sequence directory.
pub fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{:06}.png", i + 1))
}

pub fn load_frame(dir: &Path, i: usize) -> Result<RgbImage> {
    let path = frame_path(dir, i);
    image::open(&path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image {
            path,
            msg: e.to_string(),
        })
}

/// Reads and validates a sequence directory. The id is the directory name.
pub fn parse_sequence(dir: &Path) -> Result<SequenceAnnotation> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let boxes = parse_boxes(&read_text(&gt_path)?, &gt_path)?;
    let absent_path = dir.join(ABSENT_FILE);
    let absent = parse_absent(&read_text(&absent_path)?, &absent_path)?;
    if absent.len() != boxes.len() {
        let line = absent.len().min(boxes.len()) + 1;
        return Err(parse_error(
            &absent_path,
            line,
            format!("{} absent flags for {} boxes", absent.len(), boxes.len()),
        ));
    }
    for (i, b) in boxes.iter().enumerate() {
        if !absent[i] && (b.w <= 0.0 || b.h <= 0.0) {
            return Err(parse_error(&gt_path, i + 1, format!("visible frame has non-positive size {b:?}")));
        }
    }
    let lang_path = dir.join(LANGUAGE_FILE);
    let prompt = read_text(&lang_path)?.lines().next().unwrap_or("").trim().to_string();
    let attr_path = dir.join(ATTRIBUTES_FILE);
    let attributes = parse_attributes(&read_text(&attr_path)?, &attr_path)?;
    let expected = LengthClass::from_frames(boxes.len());
    if attributes.len != expected {
        warn!(
            "{}: length class {:?} disagrees with {} frames ({:?})",
            attr_path.display(),
            attributes.len,
            boxes.len(),
            expected
        );
    }
    let first = frame_path(dir, 0);
    let frame_size = if first.exists() {
        let (w, h) = image::image_dimensions(&first).map_err(|e| Error::Image {
            path: first,
            msg: e.to_string(),
        })?;
        Some((w as usize, h as usize))
    } else {
        None
    };
    let ann = SequenceAnnotation {
        id,
        boxes,
        absent,
        prompt,
        attributes,
        frame_size,
    };
    ann.validate()?;
    Ok(ann)
}

/// Sorted sequence directories (those holding a ground-truth file) under
/// `root`.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// `x,y,w,h` per line. Rust's float formatting round-trips exactly.
pub fn format_boxes(boxes: &[BBox]) -> String {
    let mut s = String::with_capacity(boxes.len() * 24);
    for b in boxes {
        s.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
    }
    s
}

pub fn format_absent(absent: &[bool]) -> String {
    absent.iter().map(|&a| if a { "1\n" } else { "0\n" }).collect()
}

pub fn format_attributes(a: &Attributes) -> String {
    let mut fields: Vec<String> = a.flags.iter().map(|&f| u8::from(f).to_string()).collect();
    fields.push(a.len.code().to_string());
    fields.join(",") + "\n"
}

/// Writes the four annotation files into `dir`, creating it.
pub fn write_annotation(ann: &SequenceAnnotation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    write(GROUNDTRUTH_FILE, format_boxes(&ann.boxes))?;
    write(ABSENT_FILE, format_absent(&ann.absent))?;
    write(LANGUAGE_FILE, format!("{}\n", ann.prompt))?;
    write(ATTRIBUTES_FILE, format_attributes(&ann.attributes))
}

/// Result file path for a sequence.
pub fn result_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

pub fn write_result(res: &TrackResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = result_path(dir, &res.sequence_id);
    fs::write(&p, format_boxes(&res.boxes)).map_err(|e| Error::io(p, e))
}

pub fn read_result(path: &Path) -> Result<TrackResult> {
    let sequence_id = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(TrackResult {
        sequence_id,
        boxes: parse_boxes(&read_text(path)?, path)?,
        fps: None,
    })
}

/// Every `*.txt` result file under `dir`, sorted by id.
pub fn read_results(dir: &Path) -> Result<Vec<TrackResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_result(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::attributes::Attribute;

    fn write_dir(dir: &Path, gt: &str, absent: &str, attrs: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join(GROUNDTRUTH_FILE), gt).unwrap();
        fs::write(dir.join(ABSENT_FILE), absent).unwrap();
        fs::write(dir.join(LANGUAGE_FILE), "a black drone\n").unwrap();
        fs::write(dir.join(ATTRIBUTES_FILE), attrs).unwrap();
    }

    #[test]
    fn happy_path() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("seq_a");
        write_dir(&dir, "1,2,3,4\n0,0,0,0\n5.5,6,7,8\n", "0\n1\n0\n", "1,0,0,0,1,0,0,0,0,0,1,0,0,0,0\n");
        let ann = parse_sequence(&dir).unwrap();
        assert_eq!(ann.id, "seq_a");
        assert_eq!(ann.frame_count(), 3);
        assert_eq!(ann.boxes[2], BBox::new(5.5, 6.0, 7.0, 8.0));
        assert_eq!(ann.prompt, "a black drone");
        assert!(ann.attributes.get(Attribute::CM));
        assert!(ann.attributes.get(Attribute::OV));
        assert!(ann.attributes.get(Attribute::SO));
        assert_eq!(ann.attributes.len, LengthClass::Short);
        assert_eq!(ann.frame_size, None);
    }

    #[test]
    fn short_absent_file_points_at_the_missing_line() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("s");
        write_dir(&dir, "1,2,3,4\n1,2,3,4\n1,2,3,4\n", "0\n0\n", "0,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n");
        match parse_sequence(&dir) {
            Err(Error::Parse { file, line, .. }) => {
                assert!(file.ends_with(ABSENT_FILE));
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_size_on_visible_frame() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("s");
        write_dir(&dir, "1,2,3,4\n1,2,-3,4\n", "0\n0\n", "0,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n");
        match parse_sequence(&dir) {
            Err(Error::Parse { file, line, .. }) => {
                assert!(file.ends_with(GROUNDTRUTH_FILE));
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
        // the same box on an absent frame is fine
        write_dir(&dir, "1,2,3,4\n1,2,-3,4\n", "0\n1\n", "0,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n");
        assert!(parse_sequence(&dir).is_ok());
    }

    #[test]
    fn malformed_lines() {
        let p = Path::new("groundtruth.txt");
        assert!(matches!(parse_boxes("1,2,3\n", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_boxes("1,2,3,4\n1,2,x,4\n", p), Err(Error::Parse { line: 2, .. })));
        assert!(parse_absent("0\n2\n", p).is_err());
        assert!(parse_attributes("0,0,0\n", p).is_err());
        assert!(parse_attributes("0,0,0,0,0,0,0,0,0,0,0,0,0,0,3\n", p).is_err());
    }

    #[test]
    fn write_then_parse_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let mut attributes = Attributes::default();
        attributes.set(Attribute::FM, true);
        attributes.len = LengthClass::Short;
        let ann = SequenceAnnotation {
            id: "rt".into(),
            boxes: vec![BBox::new(0.1, 1.0 / 3.0, 10.25, 7.0), BBox::default()],
            absent: vec![false, true],
            prompt: "a red multi-rotor drone flying over a city".into(),
            attributes,
            frame_size: None,
        };
        let dir = tmp.path().join("rt");
        write_annotation(&ann, &dir).unwrap();
        assert_eq!(parse_sequence(&dir).unwrap(), ann);

        let res = TrackResult {
            sequence_id: "rt".into(),
            boxes: ann.boxes.clone(),
            fps: None,
        };
        write_result(&res, tmp.path()).unwrap();
        assert_eq!(read_results(tmp.path()).unwrap(), vec![res]);
        assert_eq!(sequence_dirs(tmp.path()).unwrap(), vec![dir]);
    }
}

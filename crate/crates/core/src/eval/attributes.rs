//! The 15 sequence attributes and the rules that derive the box- and
//! pixel-measurable ones.

use image::RgbImage;
use serde::Serialize;

use crate::bbox::BBox;
use crate::error::Result;
use crate::eval::annotation::SequenceAnnotation;

/// Small-object bounds: mean relative area and mean absolute side.
pub const SO_MAX_RELATIVE_AREA: f64 = 0.01;
pub const SO_MAX_SIDE: f64 = 22.0;
/// Scale and aspect ratios relative to the first frame must stay inside.
pub const RATIO_RANGE: (f64, f64) = (0.5, 2.0);
pub const SHORT_MAX_FRAMES: usize = 600;
pub const MEDIUM_MAX_FRAMES: usize = 1800;
/// Box-region brightness must vary by more than this factor for IV.
pub const IV_RATIO: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Attribute {
    CM,
    VC,
    PO,
    FO,
    OV,
    ROT,
    SD,
    IV,
    MB,
    PTI,
    SO,
    FM,
    SV,
    ARV,
}

impl Attribute {
    /// The fourteen flag attributes in file order; length is the fifteenth
    /// slot.
    pub const ALL: [Attribute; 14] = [
        Attribute::CM,
        Attribute::VC,
        Attribute::PO,
        Attribute::FO,
        Attribute::OV,
        Attribute::ROT,
        Attribute::SD,
        Attribute::IV,
        Attribute::MB,
        Attribute::PTI,
        Attribute::SO,
        Attribute::FM,
        Attribute::SV,
        Attribute::ARV,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).expect("listed")
    }

    pub fn code(self) -> &'static str {
        match self {
            Attribute::CM => "CM",
            Attribute::VC => "VC",
            Attribute::PO => "PO",
            Attribute::FO => "FO",
            Attribute::OV => "OV",
            Attribute::ROT => "ROT",
            Attribute::SD => "SD",
            Attribute::IV => "IV",
            Attribute::MB => "MB",
            Attribute::PTI => "PTI",
            Attribute::SO => "SO",
            Attribute::FM => "FM",
            Attribute::SV => "SV",
            Attribute::ARV => "ARV",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub enum LengthClass {
    #[default]
    Short,
    Medium,
    Long,
}

impl LengthClass {
    pub const ALL: [LengthClass; 3] = [LengthClass::Short, LengthClass::Medium, LengthClass::Long];

    pub fn from_frames(n: usize) -> Self {
        if n <= SHORT_MAX_FRAMES {
            LengthClass::Short
        } else if n <= MEDIUM_MAX_FRAMES {
            LengthClass::Medium
        } else {
            LengthClass::Long
        }
    }

    pub fn code(self) -> u8 {
        match self {
            LengthClass::Short => 0,
            LengthClass::Medium => 1,
            LengthClass::Long => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LengthClass::Short => "short",
            LengthClass::Medium => "medium",
            LengthClass::Long => "long",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Attributes {
    pub flags: [bool; 14],
    pub len: LengthClass,
}

impl Attributes {
    pub fn get(&self, a: Attribute) -> bool {
        self.flags[a.index()]
    }

    pub fn set(&mut self, a: Attribute, v: bool) {
        self.flags[a.index()] = v;
    }
}

/// Flags derived from a sequence. `None` marks a flag that could not be
/// measured (no frame size, no pixels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AutoAttributes {
    pub so: Option<bool>,
    pub fm: bool,
    pub sv: bool,
    pub arv: bool,
    pub ov: Option<bool>,
    pub len: LengthClass,
    pub iv: Option<bool>,
}

impl AutoAttributes {
    /// Overwrites the derived flags of `a`; unmeasured ones pass through.
    pub fn apply(&self, a: &mut Attributes) {
        a.set(Attribute::FM, self.fm);
        a.set(Attribute::SV, self.sv);
        a.set(Attribute::ARV, self.arv);
        a.len = self.len;
        for (attr, v) in [(Attribute::SO, self.so), (Attribute::OV, self.ov), (Attribute::IV, self.iv)] {
            if let Some(v) = v {
                a.set(attr, v);
            }
        }
    }
}

/// Pixel access for the pixel-derived attribute.
pub trait FrameSource {
    fn frame(&self, i: usize) -> Result<RgbImage>;
}

impl FrameSource for [RgbImage] {
    fn frame(&self, i: usize) -> Result<RgbImage> {
        Ok(self[i].clone())
    }
}

impl FrameSource for Vec<RgbImage> {
    fn frame(&self, i: usize) -> Result<RgbImage> {
        Ok(self[i].clone())
    }
}

/// Frames on disk inside a sequence directory.
pub struct DirFrames<'a>(pub &'a std::path::Path);

impl FrameSource for DirFrames<'_> {
    fn frame(&self, i: usize) -> Result<RgbImage> {
        crate::eval::annotation::load_frame(self.0, i)
    }
}

fn outside(r: f64) -> bool {
    !(RATIO_RANGE.0..=RATIO_RANGE.1).contains(&r)
}

/// Mean relative area below 1% and mean side below 22 px.
pub fn small_object(visible: &[BBox], frame_w: usize, frame_h: usize) -> bool {
    if visible.is_empty() {
        return false;
    }
    let n = visible.len() as f64;
    let frame_area = (frame_w * frame_h) as f64;
    let rel = visible.iter().map(|b| b.w * b.h / frame_area).sum::<f64>() / n;
    let side = visible.iter().map(|b| (b.w * b.h).sqrt()).sum::<f64>() / n;
    rel < SO_MAX_RELATIVE_AREA && side < SO_MAX_SIDE
}

/// Some step between consecutive visible frames moves the centre further
/// than the box side `sqrt(w h)` of the later frame.
pub fn fast_motion(boxes: &[BBox], absent: &[bool]) -> bool {
    (1..boxes.len()).any(|t| {
        if absent[t] || absent[t - 1] {
            return false;
        }
        let (ax, ay) = boxes[t - 1].center();
        let (bx, by) = boxes[t].center();
        (bx - ax).hypot(by - ay) > (boxes[t].w * boxes[t].h).sqrt()
    })
}

/// Some visible frame has `sqrt(w h / (w_1 h_1))` outside `[0.5, 2]`.
pub fn scale_variation(visible: &[BBox]) -> bool {
    let Some(first) = visible.first() else { return false };
    let a0 = first.w * first.h;
    visible.iter().any(|b| outside((b.w * b.h / a0).sqrt()))
}

/// Some visible frame has `(w / h) / (w_1 / h_1)` outside `[0.5, 2]`.
pub fn aspect_variation(visible: &[BBox]) -> bool {
    let Some(first) = visible.first() else { return false };
    let r0 = first.w / first.h;
    visible.iter().any(|b| outside((b.w / b.h) / r0))
}

/// Distance from the box to the nearest frame border; zero when touching.
fn border_gap(b: &BBox, frame_w: f64, frame_h: f64) -> f64 {
    b.x.min(b.y).min(frame_w - b.x2()).min(frame_h - b.y2()).max(0.0)
}

fn step_length(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (bx - ax).hypot(by - ay)
}

/// Some absent run borders a visible frame whose box could have left the
/// frame in one step: its gap to the border is within the box's larger side
/// plus twice the motion of the neighbouring step, plus one pixel.
pub fn out_of_view(boxes: &[BBox], absent: &[bool], frame_w: usize, frame_h: usize) -> bool {
    let (fw, fh) = (frame_w as f64, frame_h as f64);
    let n = boxes.len();
    let visible = |i: usize| i < n && !absent[i];
    let near_edge = |i: usize, neighbour: Option<usize>| {
        let b = &boxes[i];
        let motion = neighbour.filter(|&j| visible(j)).map_or(0.0, |j| step_length(&boxes[j], b));
        border_gap(b, fw, fh) <= b.w.max(b.h) + 2.0 * motion + 1.0
    };
    let mut t = 0;
    while t < n {
        if !absent[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && absent[t] {
            t += 1;
        }
        // `start - 1` is the last visible frame before the run, `t` the
        // first one after it
        let before = start.checked_sub(1).filter(|&i| visible(i)).map(|i| near_edge(i, i.checked_sub(1)));
        let after = visible(t).then(|| near_edge(t, Some(t + 1)));
        if before == Some(true) || after == Some(true) {
            return true;
        }
    }
    false
}

/// Mean ITU-R 601 gray level (0-255) inside the box.
pub fn region_gray(img: &RgbImage, b: &BBox) -> Option<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let c = b.clip_to(w, h)?;
    let (x0, y0) = (c.x.floor() as u32, c.y.floor() as u32);
    let (x1, y1) = (c.x2().ceil() as u32, c.y2().ceil() as u32);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            sum += gray(img.get_pixel(x, y).0);
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn gray(p: [u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Box-region brightness varies by more than a factor of 2 over the
/// visible frames.
pub fn illumination_variation(levels: &[f64]) -> bool {
    let lo = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    !levels.is_empty() && hi > IV_RATIO * lo
}

/// Derives SO, FM, SV, ARV, OV, LEN and, with pixels, IV.
pub fn auto_attributes(ann: &SequenceAnnotation, frames: Option<&dyn FrameSource>) -> Result<AutoAttributes> {
    let visible: Vec<BBox> = ann.visible().map(|i| ann.boxes[i]).collect();
    let iv = match frames {
        Some(src) => {
            let mut levels = Vec::with_capacity(visible.len());
            for i in ann.visible() {
                if let Some(g) = region_gray(&src.frame(i)?, &ann.boxes[i]) {
                    levels.push(g);
                }
            }
            Some(illumination_variation(&levels))
        }
        None => None,
    };
    Ok(AutoAttributes {
        so: ann.frame_size.map(|(w, h)| small_object(&visible, w, h)),
        fm: fast_motion(&ann.boxes, &ann.absent),
        sv: scale_variation(&visible),
        arv: aspect_variation(&visible),
        ov: ann.frame_size.map(|(w, h)| out_of_view(&ann.boxes, &ann.absent, w, h)),
        len: LengthClass::from_frames(ann.frame_count()),
        iv,
    })
}

//! One-pass tracking: the template comes from the first frame's ground
//! truth, and every later frame is cropped around the previous estimate.
//! The temporal token and the last box are the only state carried between
//! frames.

use std::time::Instant;

use image::RgbImage;

use crate::autograd::Graph;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::annotation::TrackResult;
use crate::fusion::TemporalToken;
use crate::model::head::{decode_box, BoxPrediction};
use crate::model::net::Model;
use crate::tokenize::{crop_and_resize, ImageFrame, TokenKind, TokenSequence};

/// Tracking state of one sequence.
#[derive(Clone, Debug)]
pub struct TrackerSession<'m> {
    model: &'m Model,
    template: ImageFrame,
    language: TokenSequence,
    token: TemporalToken,
    last: BBox,
    frames_seen: usize,
}

impl<'m> TrackerSession<'m> {
    /// Initializes on frame 1 with its ground-truth box. The prompt is
    /// encoded here, once per sequence. Frame 1 is also folded into the
    /// temporal token.
    pub fn start(model: &'m Model, first: &RgbImage, init: BBox, prompt: &str) -> Result<Self> {
        if init.is_degenerate() || !init.is_finite() {
            return Err(Error::InvalidAnnotation(format!("initial box {init:?}")));
        }
        let frame = ImageFrame::from_rgb8(first, 1);
        let cfg = model.config();
        let template = crop_and_resize(&frame, &init, cfg.template_crop())?.image;
        let language = model.encode_prompt(prompt).tokens;
        let search = crop_and_resize(&frame, &init, cfg.search_crop())?.image;
        let token = model.propagate_temporal(&model.initial_token(), &template, &search, &language)?;
        Ok(Self {
            model,
            template,
            language,
            token,
            last: init,
            frames_seen: 1,
        })
    }

    pub fn token(&self) -> &TemporalToken {
        &self.token
    }

    pub fn last_box(&self) -> BBox {
        self.last
    }

    /// Tracks the next frame.
    pub fn step(&mut self, img: &RgbImage) -> Result<BoxPrediction> {
        let index = self.frames_seen + 1;
        let frame = ImageFrame::from_rgb8(img, index);
        let crop = crop_and_resize(&frame, &self.last, self.model.config().search_crop())?;
        let (head, token) = self.model.forward(&self.template, &crop.image, &self.language, &self.token)?;
        let pred = decode_box(&head, &crop.window, frame.width(), frame.height());
        self.token = token;
        self.last = pred.bbox;
        self.frames_seen = index;
        Ok(pred)
    }
}

/// Runs a whole sequence. The first reported box is the initial box.
pub fn track_sequence(model: &Model, id: &str, frames: &[RgbImage], init: BBox, prompt: &str) -> Result<TrackResult> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidAnnotation(format!("{id}: no frames")));
    };
    let started = Instant::now();
    let mut session = TrackerSession::start(model, first, init, prompt)?;
    let mut boxes = vec![init];
    for img in &frames[1..] {
        boxes.push(session.step(img)?.bbox);
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(TrackResult {
        sequence_id: id.to_string(),
        boxes,
        fps: (secs > 0.0).then(|| frames.len() as f64 / secs),
    })
}

/// Recomputes the tracker output at every frame from the full frame
/// history in a single graph, threading the token as a graph value rather
/// than as carried state. Matches [`track_sequence`] exactly.
pub fn track_full_history(model: &Model, frames: &[RgbImage], init: BBox, prompt: &str) -> Result<Vec<BBox>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let cfg = model.config();
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let f0 = ImageFrame::from_rgb8(first, 1);
    let template = crop_and_resize(&f0, &init, cfg.template_crop())?.image;
    let language = model.encode_prompt(prompt).tokens;
    let z = model.embed(&mut g, &p, &template, TokenKind::Template)?;
    let l = model.language(&mut g, &p, &language)?;
    let t0 = g.constant(model.initial_token().value);
    let mut boxes = vec![init];
    let mut reference = init;
    let mut token = None;
    for (i, img) in frames.iter().enumerate() {
        let frame = ImageFrame::from_rgb8(img, i + 1);
        let crop = crop_and_resize(&frame, &reference, cfg.search_crop())?;
        let x = model.embed(&mut g, &p, &crop.image, TokenKind::Search)?;
        let out = model.frame_graph(&mut g, &p, z, x, l, Some(token.unwrap_or(t0)))?;
        token = Some(out.token);
        if i > 0 {
            let head = model.head_output(&g, &out.head);
            reference = decode_box(&head, &crop.window, frame.width(), frame.height()).bbox;
            boxes.push(reference);
        }
    }
    Ok(boxes)
}

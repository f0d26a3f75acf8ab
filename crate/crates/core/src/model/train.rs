//! Training on short clips with AdamW.
//!
//! A clip is a run of consecutive frames sharing the sequence's first-frame
//! template. Frame `a`'s search crop is centred on the previous visible
//! ground truth, mimicking how the tracker crops around its last estimate.
//! The temporal token flows through the clip, so its gradient reaches the
//! earlier frames.

use image::RgbImage;
use log::debug;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::loss::{loss_graph, LossBreakdown};
use crate::model::net::Model;
use crate::tensor::Tensor;
use crate::tokenize::{crop_and_resize, ImageFrame, TokenKind};

/// Frames and ground truth of one training sequence.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub frames: Vec<RgbImage>,
    pub boxes: Vec<BBox>,
    pub absent: Vec<bool>,
    pub prompt: String,
}

impl TrainSequence {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.boxes.len() != n || self.absent.len() != n {
            return Err(Error::InvalidAnnotation(format!(
                "{n} frames, {} boxes, {} absent flags",
                self.boxes.len(),
                self.absent.len()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidAnnotation("training needs at least 2 frames".into()));
        }
        if self.absent[0] || self.boxes[0].is_degenerate() {
            return Err(Error::InvalidAnnotation("first frame must show the target".into()));
        }
        Ok(())
    }

    fn visible(&self, i: usize) -> Option<BBox> {
        (!self.absent[i] && !self.boxes[i].is_degenerate()).then_some(self.boxes[i])
    }

    /// Last visible box strictly before `i`, or frame 0's box.
    fn reference_before(&self, i: usize) -> BBox {
        (0..i).rev().find_map(|j| self.visible(j)).unwrap_or(self.boxes[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of steps after which the learning rate drops.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub clip_len: usize,
    pub clips_per_step: usize,
    /// Use every clip of the data at every step, in order.
    pub full_batch: bool,
    /// Std of the crop-centre jitter, in units of the box side.
    pub center_jitter: f64,
    /// Std of the log crop-scale jitter.
    pub scale_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_at: 0.8,
            decay_factor: 0.1,
            grad_clip: Some(5.0),
            clip_len: 2,
            clips_per_step: 1,
            full_batch: false,
            center_jitter: 0.0,
            scale_jitter: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if self.clip_len == 0 || self.clips_per_step == 0 {
            return Err(Error::Config("clip length and clips per step must be positive".into()));
        }
        if self.center_jitter < 0.0 || self.scale_jitter < 0.0 {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) >= self.decay_at * self.steps as f64 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }

    /// Applies a `key=value` override, where `key` is a field name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        let real = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        match key {
            "steps" => self.steps = num(value)?,
            "lr" => self.lr = real(value)?,
            "weight_decay" => self.weight_decay = real(value)?,
            "decay_at" => self.decay_at = real(value)?,
            "decay_factor" => self.decay_factor = real(value)?,
            "grad_clip" => self.grad_clip = if value == "none" { None } else { Some(real(value)?) },
            "clip_len" => self.clip_len = num(value)?,
            "clips_per_step" => self.clips_per_step = num(value)?,
            "full_batch" => self.full_batch = matches!(value, "true" | "1"),
            "center_jitter" => self.center_jitter = real(value)?,
            "scale_jitter" => self.scale_jitter = real(value)?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::Config(format!("unknown train key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ClipFrame {
    pub search: ImageFrame,
    /// Ground truth in crop pixels; `None` when the frame carries no loss.
    pub target: Option<BBox>,
}

/// Preprocessed training clip.
#[derive(Clone, Debug)]
pub struct Clip {
    pub template: ImageFrame,
    pub language: Tensor,
    pub frames: Vec<ClipFrame>,
}

fn jittered(b: &BBox, cfg: &TrainConfig, rng: Option<&mut ChaCha8Rng>) -> BBox {
    let Some(rng) = rng else { return *b };
    if cfg.center_jitter == 0.0 && cfg.scale_jitter == 0.0 {
        return *b;
    }
    let side = (b.w * b.h).sqrt();
    let n = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let dx = n(rng) * cfg.center_jitter * side;
    let dy = n(rng) * cfg.center_jitter * side;
    let s = (n(rng) * cfg.scale_jitter).exp();
    let (cx, cy) = b.center();
    BBox::from_center(cx + dx, cy + dy, b.w * s, b.h * s)
}

/// Builds the clip of `len` frames starting at `start`.
pub fn make_clip(
    model: &Model,
    seq: &TrainSequence,
    start: usize,
    len: usize,
    cfg: &TrainConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Clip> {
    seq.validate()?;
    if start + len > seq.frames.len() {
        return Err(Error::InvalidParameter(format!(
            "clip {start}+{len} exceeds {} frames",
            seq.frames.len()
        )));
    }
    let mc = model.config();
    let first = ImageFrame::from_rgb8(&seq.frames[0], 1);
    let template = crop_and_resize(&first, &seq.boxes[0], mc.template_crop())?.image;
    let language = model.encode_prompt(&seq.prompt).tokens.tokens;
    let mut frames = Vec::with_capacity(len);
    for i in start..start + len {
        let reference = jittered(&seq.reference_before(i.max(1)), cfg, rng.as_deref_mut());
        let frame = ImageFrame::from_rgb8(&seq.frames[i], i + 1);
        let crop = crop_and_resize(&frame, &reference, mc.search_crop())?;
        let target = seq.visible(i).map(|b| crop.window.to_crop(&b)).filter(|b| {
            let (cx, cy) = b.center();
            let out = mc.search_size as f64;
            (0.0..out).contains(&cx) && (0.0..out).contains(&cy)
        });
        frames.push(ClipFrame {
            search: crop.image,
            target,
        });
    }
    Ok(Clip {
        template,
        language,
        frames,
    })
}

/// Mean per-frame loss over the frames of `clip` that carry a target.
/// Returns `None` when no frame does.
pub fn clip_loss(model: &Model, g: &mut Graph, p: &[Var], clip: &Clip) -> Result<Option<(Var, LossBreakdown)>> {
    let mc = model.config();
    let z = model.embed(g, p, &clip.template, TokenKind::Template)?;
    let lang = crate::tokenize::TokenSequence {
        tokens: clip.language.clone(),
        kind: TokenKind::Language,
        pos_embedded: false,
    };
    let l = model.language(g, p, &lang)?;
    let mut token = None;
    let mut terms = Vec::new();
    let mut parts = LossBreakdown::zero();
    for f in &clip.frames {
        let x = model.embed(g, p, &f.search, TokenKind::Search)?;
        let out = model.frame_graph(g, p, z, x, l, token)?;
        token = Some(out.token);
        if let Some(gt) = &f.target {
            let lv = loss_graph(g, out.head.logits, out.head.offset, out.head.size, gt, mc.search_grid(), mc.search_size)?;
            parts.accumulate(&lv.values(g));
            terms.push(lv.total);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len() as f64;
    let sum = terms[1..].iter().fold(terms[0], |acc, &t| g.add(acc, t));
    Ok(Some((g.scale(sum, 1.0 / n), parts.scaled(1.0 / n))))
}

/// Loss and parameter gradients (by parameter id) of a batch of clips.
pub fn batch_gradients(model: &Model, clips: &[Clip]) -> Result<Option<(LossBreakdown, Vec<Tensor>)>> {
    let mut grads: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut total = LossBreakdown::zero();
    let mut used = 0usize;
    for clip in clips {
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let Some((loss, parts)) = clip_loss(model, &mut g, &p, clip)? else {
            continue;
        };
        let gr = g.backward(loss)?;
        for (id, t) in g.param_grads(&gr) {
            grads[id].add_assign(&t);
        }
        total.accumulate(&parts);
        used += 1;
    }
    if used == 0 {
        return Ok(None);
    }
    let s = 1.0 / used as f64;
    for t in &mut grads {
        t.scale_assign(s);
    }
    Ok(Some((total.scaled(s), grads)))
}

/// Mean loss over `clips` without gradients.
pub fn evaluate_loss(model: &Model, clips: &[Clip]) -> Result<LossBreakdown> {
    let mut total = LossBreakdown::zero();
    let mut used = 0usize;
    for clip in clips {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        if let Some((_, parts)) = clip_loss(model, &mut g, &p, clip)? {
            total.accumulate(&parts);
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidAnnotation("no clip carries a visible target".into()));
    }
    Ok(total.scaled(1.0 / used as f64))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let params = model.params_mut();
        for (id, g) in grads.iter().enumerate() {
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g.data()[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g.data()[i] * g.data()[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                w[i] -= lr * (update + cfg.weight_decay * w[i]);
            }
        }
    }
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss at every step, before that step's update.
    pub losses: Vec<f64>,
    pub breakdowns: Vec<LossBreakdown>,
}

/// Every clip start of every sequence.
pub fn clip_starts(data: &[TrainSequence], len: usize) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..(seq.frames.len() + 1).saturating_sub(len)).map(move |a| (s, a)))
        .collect()
}

/// Trains `model` in place. Deterministic given `cfg.seed`.
pub fn train_toy(model: &mut Model, data: &[TrainSequence], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    for s in data {
        s.validate()?;
    }
    let starts = clip_starts(data, cfg.clip_len);
    if starts.is_empty() {
        return Err(Error::InvalidAnnotation("no sequence is long enough for a clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut clips = Vec::with_capacity(cfg.clips_per_step);
        if cfg.full_batch {
            for &(s, a) in &starts {
                clips.push(make_clip(model, &data[s], a, cfg.clip_len, cfg, Some(&mut rng))?);
            }
        } else {
            for _ in 0..cfg.clips_per_step {
                let &(s, a) = starts.choose(&mut rng).expect("non-empty");
                clips.push(make_clip(model, &data[s], a, cfg.clip_len, cfg, Some(&mut rng))?);
            }
        }
        let Some((parts, mut grads)) = batch_gradients(model, &clips)? else {
            continue;
        };
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {parts:?}"),
            });
        }
        if let Some(c) = cfg.grad_clip {
            clip_gradients(&mut grads, c);
        }
        let lr = cfg.lr_at(step);
        if lr > 0.0 {
            opt.step(model, &grads, lr, cfg);
        }
        if step % 50 == 0 {
            debug!("step {step}: loss {:.4} (cls {:.4} l1 {:.4} giou {:.4})", parts.total, parts.cls, parts.l1, parts.giou);
        }
        report.losses.push(parts.total);
        report.breakdowns.push(parts);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use image::Rgb;

    fn moving_square(n: usize) -> TrainSequence {
        let mut frames = Vec::new();
        let mut boxes = Vec::new();
        for i in 0..n {
            let (x, y) = (60.0 + 6.0 * i as f64, 80.0 + 3.0 * i as f64);
            let b = BBox::new(x, y, 24.0, 20.0);
            let img = RgbImage::from_fn(256, 256, |px, py| {
                let inside = (px as f64) >= b.x && (px as f64) < b.x2() && (py as f64) >= b.y && (py as f64) < b.y2();
                if inside {
                    Rgb([230, 40, 40])
                } else {
                    Rgb([((px * 7 + py * 13) % 64) as u8 + 60, 90, 100])
                }
            });
            frames.push(img);
            boxes.push(b);
        }
        TrainSequence {
            frames,
            boxes,
            absent: vec![false; n],
            prompt: "a red drone".into(),
        }
    }

    #[test]
    fn clip_targets_follow_the_reference_crop() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let seq = moving_square(4);
        let clip = make_clip(&m, &seq, 1, 2, &TrainConfig::default(), None).unwrap();
        assert_eq!(clip.frames.len(), 2);
        // frame 1 is cropped around frame 0's box: the target sits one step
        // of motion right of and below the centre
        let t = clip.frames[0].target.unwrap();
        let (cx, cy) = t.center();
        assert!(cx > 64.0 && cy > 64.0);
    }

    #[test]
    fn zero_learning_rate_keeps_the_loss_constant() {
        let mut m = Model::new(ModelConfig::default()).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            lr: 0.0,
            full_batch: true,
            ..TrainConfig::default()
        };
        let r = train_toy(&mut m, &[moving_square(3)], &cfg).unwrap();
        assert_eq!(r.losses.len(), 3);
        assert!(r.losses.iter().all(|&l| l == r.losses[0]));
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = TrainConfig {
            steps: 3,
            center_jitter: 0.1,
            ..TrainConfig::default()
        };
        let data = [moving_square(4)];
        let mut a = Model::new(ModelConfig::default()).unwrap();
        let mut b = Model::new(ModelConfig::default()).unwrap();
        let ra = train_toy(&mut a, &data, &cfg).unwrap();
        let rb = train_toy(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
    }
}

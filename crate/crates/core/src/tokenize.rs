//! Image cropping, patch embedding and the hashed language encoder.
//!
//! Visual embeddings are built on an autodiff [`Graph`] so the model can
//! train them; [`patch_embed_hierarchical`] and [`patch_embed_flat`] are
//! graph-free conveniences over the same code path.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Total stride of the visual embedding: one token per 16x16 pixels.
pub const PATCH_STRIDE: usize = 16;
/// Side of the first-level patches of the hierarchical embedding.
pub const FINE_PATCH: usize = 4;
/// Fixed length of an encoded prompt.
pub const LANGUAGE_TOKENS: usize = 40;

/// An RGB image with `f64` channels, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
    pub frame_index: usize,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>, frame_index: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height}x3 image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            frame_index,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
            frame_index: 0,
        }
    }

    pub fn from_rgb8(img: &RgbImage, frame_index: usize) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
            frame_index,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `a * self + b * other`, pixelwise.
    pub fn combine(&self, a: f64, other: &ImageFrame, b: f64) -> Result<Self> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape("combining images of different sizes".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Self { data, ..self.clone() })
    }

    fn channel_mean(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for y in y0..y1 {
            for x in x0..x1 {
                let p = self.pixel(x, y);
                for k in 0..3 {
                    acc[k] += p[k];
                }
            }
        }
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        acc.map(|v| v / n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSpec {
    /// Crop area as a multiple of the box area.
    pub area_factor: f64,
    pub out_size: usize,
}

impl CropSpec {
    pub const TEMPLATE: CropSpec = CropSpec {
        area_factor: 4.0,
        out_size: 128,
    };
    pub const SEARCH: CropSpec = CropSpec {
        area_factor: 16.0,
        out_size: 256,
    };
    pub const TOY_TEMPLATE: CropSpec = CropSpec {
        area_factor: 4.0,
        out_size: 64,
    };
    pub const TOY_SEARCH: CropSpec = CropSpec {
        area_factor: 16.0,
        out_size: 128,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.area_factor > 0.0 && self.area_factor.is_finite()) {
            return Err(Error::InvalidParameter(format!("area factor {}", self.area_factor)));
        }
        if self.out_size == 0 || self.out_size % PATCH_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "crop size {} is not a positive multiple of {PATCH_STRIDE}",
                self.out_size
            )));
        }
        Ok(())
    }

    /// Square window this spec cuts around `b`.
    pub fn window(&self, b: &BBox) -> Result<CropWindow> {
        self.validate()?;
        if b.is_degenerate() || !b.is_finite() {
            return Err(Error::InvalidAnnotation(format!(
                "cannot crop around degenerate box {b:?}"
            )));
        }
        let (cx, cy) = b.center();
        Ok(CropWindow {
            cx,
            cy,
            side: (self.area_factor * b.w * b.h).sqrt(),
            out_size: self.out_size,
        })
    }
}

/// Mapping between source-frame pixels and a square crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    /// Side of the window in source pixels.
    pub side: f64,
    pub out_size: usize,
}

impl CropWindow {
    /// Source pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_size as f64
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    pub fn to_frame(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.origin();
        let s = self.scale();
        BBox::new(x0 + b.x * s, y0 + b.y * s, b.w * s, b.h * s)
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.origin();
        let s = self.scale();
        BBox::new((b.x - x0) / s, (b.y - y0) / s, b.w / s, b.h / s)
    }

    /// Source-frame sample coordinate of crop pixel `u` along one axis.
    fn sample(&self, origin: f64, u: usize) -> f64 {
        origin + (u as f64 + 0.5) * self.scale() - 0.5
    }
}

/// A crop plus the bookkeeping needed to map predictions back.
#[derive(Clone, Debug)]
pub struct Crop {
    pub image: ImageFrame,
    pub window: CropWindow,
    /// Row-major flags for output pixels that drew on padding.
    pub padded: Vec<bool>,
}

impl Crop {
    pub fn padded_count(&self) -> usize {
        self.padded.iter().filter(|&&p| p).count()
    }
}

/// Bilinear taps `(index, weight)` along one axis.
fn taps(s: f64) -> [(i64, f64); 2] {
    let f = s.floor();
    let t = s - f;
    [(f as i64, 1.0 - t), (f as i64 + 1, t)]
}

/// Square crop of side `sqrt(area_factor * w * h)` centred on `b`, resampled
/// bilinearly to `spec.out_size`. Samples falling outside the frame take
/// the per-channel mean of the part of the window inside the frame.
pub fn crop_and_resize(frame: &ImageFrame, b: &BBox, spec: CropSpec) -> Result<Crop> {
    let window = spec.window(b)?;
    let out = spec.out_size;
    let (w, h) = (frame.width as i64, frame.height as i64);
    let (x0, y0) = window.origin();
    let xs: Vec<_> = (0..out).map(|u| taps(window.sample(x0, u))).collect();
    let ys: Vec<_> = (0..out).map(|v| taps(window.sample(y0, v))).collect();
    let inside = |i: i64, n: i64| (0..n).contains(&i);

    let mut pad_value: Option<[f64; 3]> = None;
    let mut pad = || {
        *pad_value.get_or_insert_with(|| {
            // pixels whose centres fall in the window
            let lo = |o: f64, n: i64| ((o - 0.5).ceil().max(0.0) as i64).min(n) as usize;
            let hi = |o: f64, n: i64| (((o + window.side - 0.5).floor() + 1.0).clamp(0.0, n as f64)) as usize;
            let (ax, bx) = (lo(x0, w), hi(x0, w));
            let (ay, by) = (lo(y0, h), hi(y0, h));
            if ax < bx && ay < by {
                frame.channel_mean(ax, bx, ay, by)
            } else {
                frame.channel_mean(0, frame.width, 0, frame.height)
            }
        })
    };

    let mut data = vec![0.0; out * out * 3];
    let mut padded = vec![false; out * out];
    for (v, ty) in ys.iter().enumerate() {
        for (u, tx) in xs.iter().enumerate() {
            let mut acc = [0.0; 3];
            for &(iy, wy) in ty {
                for &(ix, wx) in tx {
                    let wgt = wx * wy;
                    if wgt == 0.0 {
                        continue;
                    }
                    let p = if inside(ix, w) && inside(iy, h) {
                        frame.pixel(ix as usize, iy as usize)
                    } else {
                        padded[v * out + u] = true;
                        pad()
                    };
                    for k in 0..3 {
                        acc[k] += wgt * p[k];
                    }
                }
            }
            data[(v * out + u) * 3..(v * out + u) * 3 + 3].copy_from_slice(&acc);
        }
    }
    Ok(Crop {
        image: ImageFrame::new(out, out, data, frame.frame_index)?,
        window,
        padded,
    })
}

/// Non-overlapping `p x p` patches in row-major order, each flattened as
/// `(row, col, channel)`: an `(side/p)^2 x 3p^2` matrix.
pub fn patchify(frame: &ImageFrame, p: usize) -> Result<Tensor> {
    if frame.width % p != 0 || frame.height % p != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {p}x{p} patches",
            frame.width, frame.height
        )));
    }
    let (gw, gh) = (frame.width / p, frame.height / p);
    let mut out = Tensor::zeros(&[gw * gh, 3 * p * p]);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for dy in 0..p {
                let src = ((gy * p + dy) * frame.width + gx * p) * 3;
                row[dy * 3 * p..(dy + 1) * 3 * p].copy_from_slice(&frame.data[src..src + 3 * p]);
            }
        }
    }
    Ok(out)
}

fn check_square(frame: &ImageFrame) -> Result<usize> {
    if frame.width != frame.height || frame.width % PATCH_STRIDE != 0 {
        return Err(Error::Shape(format!(
            "embedding needs a square image with side divisible by {PATCH_STRIDE}, got {}x{}",
            frame.width, frame.height
        )));
    }
    Ok(frame.width / PATCH_STRIDE)
}

/// Hierarchical embedding weights as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct HierEmbedVars {
    /// `48 x c1`
    pub patch: Var,
    /// `4 c1 x c2`
    pub merge1: Var,
    /// `4 c2 x D`
    pub merge2: Var,
}

/// 4x4 patch projection followed by two 2x2 merges, without position
/// embeddings: `(side/16)^2 x D`.
pub fn embed_hierarchical(g: &mut Graph, frame: &ImageFrame, w: &HierEmbedVars) -> Result<Var> {
    let grid = check_square(frame)?;
    let patches = g.constant(patchify(frame, FINE_PATCH)?);
    let fine = 4 * grid;
    let x = g.matmul(patches, w.patch);
    let x = g.merge_2x2(x, fine, fine);
    let x = g.matmul(x, w.merge1);
    let x = g.merge_2x2(x, fine / 2, fine / 2);
    Ok(g.matmul(x, w.merge2))
}

/// Single-resolution 16x16 patch projection (`768 x D` weights).
pub fn embed_flat(g: &mut Graph, frame: &ImageFrame, w: Var) -> Result<Var> {
    check_square(frame)?;
    let patches = g.constant(patchify(frame, PATCH_STRIDE)?);
    Ok(g.matmul(patches, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Template,
    Search,
    Language,
    Temporal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub kind: TokenKind,
    pub pos_embedded: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Standalone weights for the hierarchical embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbedWeights {
    pub patch: Tensor,
    pub merge1: Tensor,
    pub merge2: Tensor,
    /// `J x D`, added after the last merge.
    pub pos: Tensor,
}

impl PatchEmbedWeights {
    pub fn zeros(dim: usize, tokens: usize) -> Self {
        let (c1, c2) = (dim / 4, dim / 2);
        Self {
            patch: Tensor::zeros(&[3 * FINE_PATCH * FINE_PATCH, c1]),
            merge1: Tensor::zeros(&[4 * c1, c2]),
            merge2: Tensor::zeros(&[4 * c2, dim]),
            pos: Tensor::zeros(&[tokens, dim]),
        }
    }

    pub fn random(dim: usize, tokens: usize, rng: &mut impl rand::Rng) -> Self {
        let (c1, c2) = (dim / 4, dim / 2);
        let init = |r: usize, c: usize, rng: &mut _| Tensor::randn(&[r, c], (1.0 / r as f64).sqrt(), rng);
        Self {
            patch: init(3 * FINE_PATCH * FINE_PATCH, c1, rng),
            merge1: init(4 * c1, c2, rng),
            merge2: init(4 * c2, dim, rng),
            pos: Tensor::randn(&[tokens, dim], 0.02, rng),
        }
    }
}

pub fn patch_embed_hierarchical(
    frame: &ImageFrame,
    weights: &PatchEmbedWeights,
    kind: TokenKind,
) -> Result<TokenSequence> {
    let grid = check_square(frame)?;
    if weights.pos.rows() != grid * grid || weights.pos.cols() != weights.merge2.cols() {
        return Err(Error::Shape(format!(
            "position embedding {:?} does not fit {} tokens",
            weights.pos.shape(),
            grid * grid
        )));
    }
    let mut g = Graph::new();
    let w = HierEmbedVars {
        patch: g.constant(weights.patch.clone()),
        merge1: g.constant(weights.merge1.clone()),
        merge2: g.constant(weights.merge2.clone()),
    };
    let x = embed_hierarchical(&mut g, frame, &w)?;
    let pos = g.constant(weights.pos.clone());
    let x = g.add(x, pos);
    Ok(TokenSequence {
        tokens: g.value(x).clone(),
        kind,
        pos_embedded: true,
    })
}

pub fn patch_embed_flat(frame: &ImageFrame, weights: &Tensor, pos: &Tensor, kind: TokenKind) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let w = g.constant(weights.clone());
    let x = embed_flat(&mut g, frame, w)?;
    if g.shape(x) != (pos.rows(), pos.cols()) {
        return Err(Error::Shape(format!("position embedding {:?}", pos.shape())));
    }
    let p = g.constant(pos.clone());
    let x = g.add(x, p);
    Ok(TokenSequence {
        tokens: g.value(x).clone(),
        kind,
        pos_embedded: true,
    })
}

/// Splits on whitespace; every non-alphanumeric character is its own word.
pub fn split_words(prompt: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in prompt.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            words.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash-bucket embedding table whose rows are generated on demand from
/// `(seed, row)`, so it needs no storage and no global state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StubVocab {
    pub dim: usize,
    pub buckets: u64,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Reserved {
    Aggregate = 0,
    Pad = 1,
    NoPrompt = 2,
}

impl StubVocab {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            buckets: 1 << 20,
            seed,
        }
    }

    fn row_from(&self, domain: u64, index: u64) -> Vec<f64> {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&domain.to_le_bytes());
        key[16..24].copy_from_slice(&index.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn word_row(&self, word: &str) -> Vec<f64> {
        self.row_from(0, fnv1a(word.as_bytes()) % self.buckets)
    }

    fn reserved(&self, r: Reserved) -> Vec<f64> {
        self.row_from(1, r as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageEncoding {
    pub tokens: TokenSequence,
    /// The prompt had no words and the reserved no-prompt sequence was used.
    pub no_prompt: bool,
    /// Words kept after truncation.
    pub words_used: usize,
}

/// Encodes a prompt as exactly [`LANGUAGE_TOKENS`] rows: an aggregate token
/// (reserved row plus the mean word row), then word rows, then padding.
pub fn encode_language(prompt: &str, vocab: &StubVocab) -> LanguageEncoding {
    let words = split_words(prompt);
    let mut tokens = Tensor::zeros(&[LANGUAGE_TOKENS, vocab.dim]);
    if words.is_empty() {
        let none = vocab.reserved(Reserved::NoPrompt);
        for r in 0..LANGUAGE_TOKENS {
            tokens.row_mut(r).copy_from_slice(&none);
        }
        return LanguageEncoding {
            tokens: TokenSequence {
                tokens,
                kind: TokenKind::Language,
                pos_embedded: false,
            },
            no_prompt: true,
            words_used: 0,
        };
    }
    let kept = words.len().min(LANGUAGE_TOKENS - 1);
    let mut agg = vec![0.0; vocab.dim];
    for (i, w) in words[..kept].iter().enumerate() {
        let row = vocab.word_row(w);
        for (a, v) in agg.iter_mut().zip(&row) {
            *a += v / kept as f64;
        }
        tokens.row_mut(i + 1).copy_from_slice(&row);
    }
    for (a, v) in agg.iter_mut().zip(vocab.reserved(Reserved::Aggregate)) {
        *a += v;
    }
    tokens.row_mut(0).copy_from_slice(&agg);
    let pad = vocab.reserved(Reserved::Pad);
    for r in kept + 1..LANGUAGE_TOKENS {
        tokens.row_mut(r).copy_from_slice(&pad);
    }
    LanguageEncoding {
        tokens: TokenSequence {
            tokens,
            kind: TokenKind::Language,
            pos_embedded: false,
        },
        no_prompt: false,
        words_used: kept,
    }
}

//! Spatial-temporal-semantic fusion: the joint token sequence, the causal
//! selective-scan blocks that run over it, and the temporal token carried
//! from frame to frame.
//!
//! The fused order is always template, search, language, temporal. The
//! temporal slot is scanned last, so its output has seen every other token.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ssm::SelectiveProjections;
use crate::tensor::Tensor;
use crate::tokenize::{TokenKind, TokenSequence};

pub const NORM_EPS: f64 = 1e-5;

/// Fixed segment order of a fused sequence.
pub const SEGMENT_ORDER: [TokenKind; 4] = [
    TokenKind::Template,
    TokenKind::Search,
    TokenKind::Language,
    TokenKind::Temporal,
];

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalToken {
    /// `1 x D`
    pub value: Tensor,
    /// Last frame folded into the token; 0 before any frame.
    pub frame_index: usize,
    pub initialized: bool,
}

impl TemporalToken {
    pub fn initial(value: Tensor) -> Self {
        Self {
            value,
            frame_index: 0,
            initialized: true,
        }
    }

    pub fn uninitialized(dim: usize) -> Self {
        Self {
            value: Tensor::zeros(&[1, dim]),
            frame_index: 0,
            initialized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.value.cols()
    }
}

/// Segment lengths in [`SEGMENT_ORDER`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub lens: [usize; 4],
}

impl SegmentMap {
    pub fn new(template: usize, search: usize, language: usize) -> Self {
        Self {
            lens: [template, search, language, 1],
        }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `(start, len)` of a segment.
    pub fn range(&self, kind: TokenKind) -> (usize, usize) {
        let i = SEGMENT_ORDER.iter().position(|k| *k == kind).expect("known kind");
        (self.lens[..i].iter().sum(), self.lens[i])
    }

    /// Per-token segment tags.
    pub fn tags(&self) -> Vec<TokenKind> {
        SEGMENT_ORDER
            .iter()
            .zip(self.lens)
            .flat_map(|(k, n)| std::iter::repeat_n(*k, n))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    pub tokens: Tensor,
    pub segments: SegmentMap,
    pub stage: usize,
    /// Frame whose search tokens this sequence carries.
    pub frame_index: usize,
}

impl FusedSequence {
    pub fn segment(&self, kind: TokenKind) -> Tensor {
        let (start, len) = self.segments.range(kind);
        self.tokens.slice_rows(start, len)
    }

    /// Inverse of [`fuse_inputs`] (after downsampling).
    pub fn split(&self) -> (TokenSequence, TokenSequence, TokenSequence, TemporalToken) {
        let seq = |kind| TokenSequence {
            tokens: self.segment(kind),
            kind,
            pos_embedded: kind != TokenKind::Language,
        };
        (
            seq(TokenKind::Template),
            seq(TokenKind::Search),
            seq(TokenKind::Language),
            TemporalToken {
                value: self.segment(TokenKind::Temporal),
                frame_index: self.frame_index,
                initialized: true,
            },
        )
    }
}

/// Stage-entry token reduction for visual segments.
#[derive(Clone, Debug, PartialEq)]
pub enum Downsample {
    Identity,
    /// Averages adjacent token pairs, then applies a `D x D` map.
    PairMerge(Tensor),
}

impl Downsample {
    fn apply(&self, tokens: &Tensor) -> Result<Tensor> {
        match self {
            Downsample::Identity => Ok(tokens.clone()),
            Downsample::PairMerge(w) => {
                if tokens.rows() % 2 != 0 || w.shape() != [tokens.cols(), tokens.cols()] {
                    return Err(Error::Shape(format!(
                        "pair merge of {:?} with map {:?}",
                        tokens.shape(),
                        w.shape()
                    )));
                }
                let mut g = Graph::new();
                let x = g.constant(tokens.clone());
                let w = g.constant(w.clone());
                let y = downsample_graph(&mut g, x, Some(w));
                Ok(g.value(y).clone())
            }
        }
    }
}

/// Graph form of [`Downsample`]; `None` is the identity.
pub fn downsample_graph(g: &mut Graph, x: Var, w: Option<Var>) -> Var {
    match w {
        None => x,
        Some(w) => {
            let m = g.pair_mean(x);
            g.matmul(m, w)
        }
    }
}

/// Concatenates `[template', search', language, temporal]` where the primes
/// denote the stage's downsampling.
pub fn fuse_inputs(
    f_z: &TokenSequence,
    f_x: &TokenSequence,
    f_l: &TokenSequence,
    t: &TemporalToken,
    stage: usize,
    ds: &Downsample,
) -> Result<FusedSequence> {
    if !t.initialized {
        return Err(Error::Config("temporal token is not initialized".into()));
    }
    let d = t.dim();
    for (name, s) in [("template", f_z), ("search", f_x), ("language", f_l)] {
        if s.width() != d {
            return Err(Error::Shape(format!("{name} tokens have width {}, expected {d}", s.width())));
        }
    }
    let z = ds.apply(&f_z.tokens)?;
    let x = ds.apply(&f_x.tokens)?;
    let segments = SegmentMap::new(z.rows(), x.rows(), f_l.len());
    let mut data = Vec::with_capacity(segments.total() * d);
    for part in [&z, &x, &f_l.tokens, &t.value] {
        data.extend_from_slice(part.data());
    }
    Ok(FusedSequence {
        tokens: Tensor::from_vec(&[segments.total(), d], data)?,
        segments,
        stage,
        frame_index: t.frame_index + 1,
    })
}

/// One residual selective-scan block as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct StsBlockVars {
    pub w_delta: Var,
    pub b_delta: Var,
    pub w_b: Var,
    pub b_b: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub a_log: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// `x + Linear(scan(LN(x)))`, scanning from the first token to the last
/// with a zero initial state.
pub fn sts_block(g: &mut Graph, x: Var, p: &StsBlockVars) -> Result<Var> {
    let (_, d) = g.shape(x);
    let (dn, n) = g.shape(p.a_log);
    if dn != d {
        return Err(Error::Shape(format!("block has {dn} channels, tokens have {d}")));
    }
    let u = g.layer_norm(x, NORM_EPS);
    let raw = g.linear(u, p.w_delta, Some(p.b_delta));
    let delta = g.softplus(raw);
    let b = g.linear(u, p.w_b, Some(p.b_b));
    let c = g.linear(u, p.w_c, Some(p.b_c));
    let ea = g.exp(p.a_log);
    let a = g.scale(ea, -1.0);
    let y = g.selective_scan(u, delta, b, c, a, Tensor::zeros(&[d, n]))?;
    let out = g.linear(y, p.w_out, Some(p.b_out));
    Ok(g.add(x, out))
}

pub fn sts_stack(g: &mut Graph, x: Var, blocks: &[StsBlockVars]) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::Config("fusion stack has no blocks".into()));
    }
    blocks.iter().try_fold(x, |x, b| sts_block(g, x, b))
}

/// Plain-tensor parameters of one block.
#[derive(Clone, Debug)]
pub struct StsBlockParams {
    pub proj: SelectiveProjections,
    /// `D x D`
    pub w_out: Tensor,
    /// `1 x D`
    pub b_out: Tensor,
}

impl StsBlockParams {
    pub fn bind(&self, g: &mut Graph) -> StsBlockVars {
        let p = &self.proj;
        StsBlockVars {
            w_delta: g.constant(p.w_delta.clone()),
            b_delta: g.constant(p.b_delta.clone()),
            w_b: g.constant(p.w_b.clone()),
            b_b: g.constant(p.b_b.clone()),
            w_c: g.constant(p.w_c.clone()),
            b_c: g.constant(p.b_c.clone()),
            a_log: g.constant(p.a_log.clone()),
            w_out: g.constant(self.w_out.clone()),
            b_out: g.constant(self.b_out.clone()),
        }
    }
}

/// Runs the stacked blocks over a fused sequence. The new temporal token is
/// the output at the final (temporal) position.
pub fn sts_mamba_forward(z_in: &FusedSequence, layers: &[StsBlockParams]) -> Result<(FusedSequence, TemporalToken)> {
    if layers.is_empty() {
        return Err(Error::Config("fusion stack has no blocks".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(z_in.tokens.clone());
    let vars: Vec<_> = layers.iter().map(|l| l.bind(&mut g)).collect();
    let y = sts_stack(&mut g, x, &vars)?;
    let z_out = FusedSequence {
        tokens: g.value(y).clone(),
        ..z_in.clone()
    };
    let (_, _, _, t_new) = z_out.split();
    Ok((z_out, t_new))
}

//! The tracker network: patch embedding, attention stages interleaved with
//! selective-scan fusion over the joint token sequence, and the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{sts_stack, StsBlockVars, TemporalToken, NORM_EPS};
use crate::model::config::ModelConfig;
use crate::model::head::HeadOutput;
use crate::model::params::{AttnIds, BranchIds, Layout, ParamStore};
use crate::tensor::Tensor;
use crate::tokenize::{
    embed_flat, embed_hierarchical, encode_language, HierEmbedVars, ImageFrame, LanguageEncoding, StubVocab,
    TokenKind, TokenSequence, LANGUAGE_TOKENS,
};

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
    params: ParamStore,
    vocab: StubVocab,
}

/// Head maps of one frame as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub logits: Var,
    pub offset: Var,
    pub size: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FrameVars {
    pub head: HeadVars,
    /// Normalized output at the temporal position, `1 x D`.
    pub token: Var,
}

fn vocab_for(cfg: &ModelConfig) -> StubVocab {
    StubVocab::new(cfg.dim, cfg.seed ^ 0x5eed_1a6e)
}

impl Model {
    /// A freshly initialized model; initialization is a pure function of
    /// `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (layout, params) = Layout::build(&cfg, Some(&mut rng));
        Ok(Self {
            cfg,
            layout,
            params,
            vocab: vocab_for(&cfg),
        })
    }

    /// Wraps existing parameters, which must match the layout `cfg` implies.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (layout, expected) = Layout::build(&cfg, None);
        if !expected.same_layout(&params) {
            return Err(Error::Config("parameters do not match the model configuration".into()));
        }
        Ok(Self {
            cfg,
            layout,
            params,
            vocab: vocab_for(&cfg),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Same weights, different ablation switches.
    pub fn with_switches(&self, temporal: bool, semantic: bool) -> Self {
        let mut m = self.clone();
        m.cfg.enable_temporal = temporal;
        m.cfg.enable_semantic = semantic;
        m
    }

    pub fn initial_token(&self) -> TemporalToken {
        TemporalToken::initial(self.params.get(self.layout.t_init).clone())
    }

    pub fn encode_prompt(&self, prompt: &str) -> LanguageEncoding {
        encode_language(prompt, &self.vocab)
    }

    /// Puts every parameter on the graph, indexed by parameter id.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(id, (_, t))| if trainable { g.param(id, t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Position-embedded visual tokens of a crop.
    pub fn embed(&self, g: &mut Graph, p: &[Var], frame: &ImageFrame, kind: TokenKind) -> Result<Var> {
        let (side, pos) = match kind {
            TokenKind::Template => (self.cfg.template_size, self.layout.pos_z),
            TokenKind::Search => (self.cfg.search_size, self.layout.pos_x),
            _ => return Err(Error::InvalidParameter(format!("{kind:?} is not a visual segment"))),
        };
        if frame.width() != side || frame.height() != side {
            return Err(Error::Config(format!(
                "{kind:?} crop is {}x{}, model expects {side}x{side}",
                frame.width(),
                frame.height()
            )));
        }
        let x = if self.cfg.enable_hier_spatial {
            let w = HierEmbedVars {
                patch: p[self.layout.patch],
                merge1: p[self.layout.merge1],
                merge2: p[self.layout.merge2],
            };
            embed_hierarchical(g, frame, &w)?
        } else {
            embed_flat(g, frame, p[self.layout.flat])?
        };
        Ok(g.add(x, p[pos]))
    }

    /// Language segment: projected stub embeddings, or zeros when the
    /// semantic path is disabled.
    pub fn language(&self, g: &mut Graph, p: &[Var], lang: &TokenSequence) -> Result<Var> {
        if lang.tokens.shape() != [LANGUAGE_TOKENS, self.cfg.dim] {
            return Err(Error::Config(format!(
                "language tokens {:?}, model expects [{LANGUAGE_TOKENS}, {}]",
                lang.tokens.shape(),
                self.cfg.dim
            )));
        }
        if !self.cfg.enable_semantic {
            return Ok(g.constant(Tensor::zeros(&[LANGUAGE_TOKENS, self.cfg.dim])));
        }
        let l = g.constant(lang.tokens.clone());
        Ok(g.matmul(l, p[self.layout.lang_proj]))
    }

    fn attention(&self, g: &mut Graph, p: &[Var], ids: &AttnIds, x: Var) -> Var {
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let u = g.layer_norm(x, NORM_EPS);
        let q = g.matmul(u, p[ids.wq]);
        let k = g.matmul(u, p[ids.wk]);
        let v = g.matmul(u, p[ids.wv]);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let o = g.linear(o, p[ids.wo], Some(p[ids.bo]));
        let x = g.add(x, o);
        let u = g.layer_norm(x, NORM_EPS);
        let m = g.linear(u, p[ids.w1], Some(p[ids.b1]));
        let m = g.gelu(m);
        let m = g.linear(m, p[ids.w2], Some(p[ids.b2]));
        g.add(x, m)
    }

    fn branch(&self, g: &mut Graph, p: &[Var], ids: &BranchIds, x: Var) -> Var {
        let h = g.linear(x, p[ids.w1], Some(p[ids.b1]));
        let h = g.gelu(h);
        g.linear(h, p[ids.w2], Some(p[ids.b2]))
    }

    /// One frame through the network. `z`, `x`, `l` are template, search
    /// and language tokens; `t_prev` is the incoming temporal token, or the
    /// learned initial token when `None`. With the temporal path disabled
    /// the initial token is always used.
    pub fn frame_graph(&self, g: &mut Graph, p: &[Var], z: Var, x: Var, l: Var, t_prev: Option<Var>) -> Result<FrameVars> {
        let d = self.cfg.dim;
        let t = match t_prev {
            Some(t) if self.cfg.enable_temporal => {
                if g.shape(t) != (1, d) {
                    return Err(Error::Config(format!("temporal token {:?}, expected [1, {d}]", g.shape(t))));
                }
                t
            }
            _ => p[self.layout.t_init],
        };
        let (nz, nx) = (g.shape(z).0, g.shape(x).0);
        let mut seq = g.concat_rows(&[z, x, l, t]);
        let total = g.shape(seq).0;
        for stage in &self.layout.stages {
            for ids in &stage.attn {
                seq = self.attention(g, p, ids, seq);
            }
            let blocks: Vec<StsBlockVars> = stage
                .sts
                .iter()
                .map(|s| StsBlockVars {
                    w_delta: p[s.w_delta],
                    b_delta: p[s.b_delta],
                    w_b: p[s.w_b],
                    b_b: p[s.b_b],
                    w_c: p[s.w_c],
                    b_c: p[s.b_c],
                    a_log: p[s.a_log],
                    w_out: p[s.w_out],
                    b_out: p[s.b_out],
                })
                .collect();
            seq = sts_stack(g, seq, &blocks)?;
        }
        let last = g.slice_rows(seq, total - 1, 1);
        let token = g.layer_norm(last, NORM_EPS);
        let search = g.slice_rows(seq, nz, nx);
        let u = g.layer_norm(search, NORM_EPS);
        let logits = self.branch(g, p, &self.layout.cls, u);
        let off = self.branch(g, p, &self.layout.offset, u);
        let offset = g.sigmoid(off);
        let sz = self.branch(g, p, &self.layout.size, u);
        let size = g.sigmoid(sz);
        Ok(FrameVars {
            head: HeadVars { logits, offset, size },
            token,
        })
    }

    pub fn head_output(&self, g: &Graph, h: &HeadVars) -> HeadOutput {
        HeadOutput {
            grid: self.cfg.search_grid(),
            logits: g.value(h.logits).clone(),
            offset: g.value(h.offset).clone(),
            size: g.value(h.size).clone(),
        }
    }

    /// Inference on one frame: template and search crops, encoded prompt
    /// and the incoming temporal token.
    pub fn forward(
        &self,
        template: &ImageFrame,
        search: &ImageFrame,
        prompt: &TokenSequence,
        t_prev: &TemporalToken,
    ) -> Result<(HeadOutput, TemporalToken)> {
        if !t_prev.initialized {
            return Err(Error::Config("temporal token is not initialized".into()));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let z = self.embed(&mut g, &p, template, TokenKind::Template)?;
        let x = self.embed(&mut g, &p, search, TokenKind::Search)?;
        let l = self.language(&mut g, &p, prompt)?;
        let t = g.constant(t_prev.value.clone());
        let out = self.frame_graph(&mut g, &p, z, x, l, Some(t))?;
        let token = TemporalToken {
            value: g.value(out.token).clone(),
            frame_index: t_prev.frame_index + 1,
            initialized: true,
        };
        Ok((self.head_output(&g, &out.head), token))
    }

    /// Folds frame `search.frame_index` into the temporal token. Frames must
    /// arrive in order.
    pub fn propagate_temporal(
        &self,
        t_prev: &TemporalToken,
        template: &ImageFrame,
        search: &ImageFrame,
        prompt: &TokenSequence,
    ) -> Result<TemporalToken> {
        if search.frame_index != t_prev.frame_index + 1 {
            return Err(Error::Sequencing(format!(
                "frame {} follows a token at frame {}",
                search.frame_index, t_prev.frame_index
            )));
        }
        Ok(self.forward(template, search, prompt, t_prev)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(side: usize, seed: u64, index: usize) -> ImageFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageFrame::new(side, side, (0..side * side * 3).map(|_| rng.random()).collect(), index).unwrap()
    }

    #[test]
    fn toy_forward_shapes_and_determinism() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let lang = m.encode_prompt("a grey multi-rotor drone flying over a field");
        let (h, t) = m.forward(&noise(64, 1, 0), &noise(128, 2, 1), &lang.tokens, &m.initial_token()).unwrap();
        assert_eq!(h.grid, 8);
        assert_eq!(h.logits.shape(), &[64, 1]);
        assert_eq!(t.frame_index, 1);
        assert!(h.offset.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert!(h.size.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let (h2, t2) = m.forward(&noise(64, 1, 0), &noise(128, 2, 1), &lang.tokens, &m.initial_token()).unwrap();
        assert_eq!(h, h2);
        assert_eq!(t, t2);
    }

    #[test]
    fn crop_size_mismatch_is_a_config_error() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let lang = m.encode_prompt("drone");
        let err = m.forward(&noise(64, 1, 0), &noise(256, 2, 1), &lang.tokens, &m.initial_token()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let lang = m.encode_prompt("drone");
        let err = m
            .propagate_temporal(&m.initial_token(), &noise(64, 1, 0), &noise(128, 2, 3), &lang.tokens)
            .unwrap_err();
        assert!(matches!(err, Error::Sequencing(_)));
    }

    #[test]
    fn semantic_switch_removes_prompt_dependence() {
        let m = Model::new(ModelConfig::default()).unwrap();
        let (a, b) = (m.encode_prompt("a red drone"), m.encode_prompt("a white drone over the sea"));
        let run = |m: &Model, l: &LanguageEncoding| m.forward(&noise(64, 1, 0), &noise(128, 2, 1), &l.tokens, &m.initial_token()).unwrap().0;
        assert_ne!(run(&m, &a), run(&m, &b));
        let off = m.with_switches(true, false);
        assert_eq!(run(&off, &a), run(&off, &b));
    }

    #[test]
    fn flat_embedding_keeps_head_resolution() {
        let mut cfg = ModelConfig::default();
        cfg.enable_hier_spatial = false;
        let m = Model::new(cfg).unwrap();
        let lang = m.encode_prompt("drone");
        let (h, _) = m.forward(&noise(64, 1, 0), &noise(128, 2, 1), &lang.tokens, &m.initial_token()).unwrap();
        assert_eq!(h.grid, 8);
    }

    #[test]
    fn multi_head_config_runs() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 4;
        cfg.dim = 32;
        let m = Model::new(cfg).unwrap();
        let lang = m.encode_prompt("drone");
        assert!(m.forward(&noise(64, 1, 0), &noise(128, 2, 1), &lang.tokens, &m.initial_token()).is_ok());
    }
}

//! Named parameter storage and the fixed declaration order of the model's
//! tensors. The order doubles as the serialization order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;
use crate::tokenize::{FINE_PATCH, PATCH_STRIDE};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].0
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.entries.push((name, t));
        self.entries.len() - 1
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Every scalar in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Overwrites every scalar from `values` (declaration order).
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(Error::Config(format!(
                "parameter blob has {} values, model needs {}",
                values.len(),
                self.scalar_count()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StsIds {
    pub w_delta: usize,
    pub b_delta: usize,
    pub w_b: usize,
    pub b_b: usize,
    pub w_c: usize,
    pub b_c: usize,
    pub a_log: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Clone, Debug)]
pub struct StageIds {
    pub attn: Vec<AttnIds>,
    pub sts: Vec<StsIds>,
}

/// Two-layer per-cell branch of the head.
#[derive(Clone, Copy, Debug)]
pub struct BranchIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub patch: usize,
    pub merge1: usize,
    pub merge2: usize,
    pub flat: usize,
    pub pos_z: usize,
    pub pos_x: usize,
    pub lang_proj: usize,
    pub t_init: usize,
    pub stages: Vec<StageIds>,
    pub cls: BranchIds,
    pub offset: BranchIds,
    pub size: BranchIds,
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    /// Normal with std `1/sqrt(rows)`.
    FanIn,
    Normal(f64),
    Const(f64),
    /// `ln(n)` in column `n-1`, so the state matrix starts at `-n`.
    StateLog,
    /// Softplus-inverse of step sizes log-uniform in `[1e-3, 1e-1]`.
    StepBias,
}

/// Initial probability of the classification branch.
const CLS_PRIOR: f64 = 0.1;
/// Std of the residual output projections.
const OUT_STD: f64 = 0.02;

fn make(shape: [usize; 2], init: Init, rng: Option<&mut ChaCha8Rng>) -> Tensor {
    let Some(rng) = rng else {
        return Tensor::zeros(&shape);
    };
    let [r, c] = shape;
    match init {
        Init::FanIn => Tensor::randn(&shape, (1.0 / r as f64).sqrt(), rng),
        Init::Normal(s) => Tensor::randn(&shape, s, rng),
        Init::Const(v) => Tensor::filled(&shape, v),
        Init::StateLog => {
            Tensor::from_vec(&shape, (0..r * c).map(|i| ((i % c) as f64 + 1.0).ln()).collect()).expect("shape")
        }
        Init::StepBias => {
            let data = (0..r * c)
                .map(|_| {
                    let dt: f64 = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                    // softplus^{-1}(dt)
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect();
            Tensor::from_vec(&shape, data).expect("shape")
        }
    }
}

impl Layout {
    /// Declares every parameter. With `rng` the tensors are initialized,
    /// otherwise they are zeros of the right shape.
    pub fn build(cfg: &ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> (Layout, ParamStore) {
        let mut store = ParamStore::default();
        let d = cfg.dim;
        let (c1, c2) = (d / 4, d / 2);
        let mut add = |name: String, shape: [usize; 2], init: Init| store.push(name, make(shape, init, rng.as_deref_mut()));

        let fine = 3 * FINE_PATCH * FINE_PATCH;
        let patch = add("embed.patch".into(), [fine, c1], Init::FanIn);
        let merge1 = add("embed.merge1".into(), [4 * c1, c2], Init::FanIn);
        let merge2 = add("embed.merge2".into(), [4 * c2, d], Init::FanIn);
        let flat = add("embed.flat".into(), [3 * PATCH_STRIDE * PATCH_STRIDE, d], Init::FanIn);
        let pos_z = add("embed.pos_template".into(), [cfg.template_tokens(), d], Init::Normal(0.5));
        let pos_x = add("embed.pos_search".into(), [cfg.search_tokens(), d], Init::Normal(0.5));
        let lang_proj = add("language.proj".into(), [d, d], Init::FanIn);
        let t_init = add("temporal.init".into(), [1, d], Init::Normal(1.0));

        let hidden = cfg.mlp_ratio * d;
        let n = cfg.state_size;
        let mut stages = Vec::with_capacity(cfg.stages);
        for s in 0..cfg.stages {
            let attn = (0..cfg.blocks_in_stage(s))
                .map(|b| {
                    let p = format!("stage{s}.attn{b}");
                    AttnIds {
                        wq: add(format!("{p}.wq"), [d, d], Init::FanIn),
                        wk: add(format!("{p}.wk"), [d, d], Init::FanIn),
                        wv: add(format!("{p}.wv"), [d, d], Init::FanIn),
                        wo: add(format!("{p}.wo"), [d, d], Init::Normal(OUT_STD)),
                        bo: add(format!("{p}.bo"), [1, d], Init::Const(0.0)),
                        w1: add(format!("{p}.w1"), [d, hidden], Init::FanIn),
                        b1: add(format!("{p}.b1"), [1, hidden], Init::Const(0.0)),
                        w2: add(format!("{p}.w2"), [hidden, d], Init::Normal(OUT_STD)),
                        b2: add(format!("{p}.b2"), [1, d], Init::Const(0.0)),
                    }
                })
                .collect();
            let sts = (0..cfg.m_sts)
                .map(|b| {
                    let p = format!("stage{s}.sts{b}");
                    StsIds {
                        w_delta: add(format!("{p}.w_delta"), [d, d], Init::Normal(0.1 / (d as f64).sqrt())),
                        b_delta: add(format!("{p}.b_delta"), [1, d], Init::StepBias),
                        w_b: add(format!("{p}.w_b"), [d, n], Init::FanIn),
                        b_b: add(format!("{p}.b_b"), [1, n], Init::Const(0.0)),
                        w_c: add(format!("{p}.w_c"), [d, n], Init::FanIn),
                        b_c: add(format!("{p}.b_c"), [1, n], Init::Const(0.0)),
                        a_log: add(format!("{p}.a_log"), [d, n], Init::StateLog),
                        w_out: add(format!("{p}.w_out"), [d, d], Init::Normal(OUT_STD)),
                        b_out: add(format!("{p}.b_out"), [1, d], Init::Const(0.0)),
                    }
                })
                .collect();
            stages.push(StageIds { attn, sts });
        }

        let mut branch = |name: &str, out: usize, bias: f64| BranchIds {
            w1: add(format!("head.{name}.w1"), [d, d], Init::FanIn),
            b1: add(format!("head.{name}.b1"), [1, d], Init::Const(0.0)),
            w2: add(format!("head.{name}.w2"), [d, out], Init::Normal(OUT_STD)),
            b2: add(format!("head.{name}.b2"), [1, out], Init::Const(bias)),
        };
        let cls = branch("cls", 1, -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        let offset = branch("offset", 2, 0.0);
        // sigmoid(-ln 3) = 1/4: the search crop spans four box sides
        let size = branch("size", 2, -(3.0f64).ln());
        (
            Layout {
                patch,
                merge1,
                merge2,
                flat,
                pos_z,
                pos_x,
                lang_proj,
                t_init,
                stages,
                cls,
                offset,
                size,
            },
            store,
        )
    }
}

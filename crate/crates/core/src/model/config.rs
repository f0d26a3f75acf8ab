use crate::error::{Error, Result};
use crate::tokenize::{CropSpec, PATCH_STRIDE};

/// Architecture and ablation switches of the tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Token width.
    pub dim: usize,
    pub heads: usize,
    /// Attention blocks in total, spread over the stages.
    pub n_backbone_blocks: usize,
    /// Selective-scan blocks per fusion module.
    pub m_sts: usize,
    pub stages: usize,
    /// State size per scan channel.
    pub state_size: usize,
    /// Hidden width of the attention MLPs as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub enable_temporal: bool,
    pub enable_hier_spatial: bool,
    pub enable_semantic: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 1,
            n_backbone_blocks: 2,
            m_sts: 2,
            stages: 2,
            state_size: 8,
            mlp_ratio: 2,
            template_size: 64,
            search_size: 128,
            enable_temporal: true,
            enable_hier_spatial: true,
            enable_semantic: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("n_backbone_blocks", self.n_backbone_blocks),
            ("m_sts", self.m_sts),
            ("stages", self.stages),
            ("state_size", self.state_size),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by 4", self.dim)));
        }
        for (name, side) in [("template", self.template_size), ("search", self.search_size)] {
            if side == 0 || side % PATCH_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "{name} size {side} is not a positive multiple of {PATCH_STRIDE}"
                )));
            }
        }
        Ok(())
    }

    pub fn template_tokens(&self) -> usize {
        (self.template_size / PATCH_STRIDE).pow(2)
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / PATCH_STRIDE
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn template_crop(&self) -> CropSpec {
        CropSpec {
            area_factor: 4.0,
            out_size: self.template_size,
        }
    }

    pub fn search_crop(&self) -> CropSpec {
        CropSpec {
            area_factor: 16.0,
            out_size: self.search_size,
        }
    }

    /// Attention blocks in `stage`; earlier stages take the remainder.
    pub fn blocks_in_stage(&self, stage: usize) -> usize {
        let base = self.n_backbone_blocks / self.stages;
        base + usize::from(stage < self.n_backbone_blocks % self.stages)
    }

    /// Applies a `key=value` override, where `key` is a field name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        let num = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        let flag = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(bad(&"expected true or false")),
        };
        match key {
            "dim" => self.dim = num(value)?,
            "heads" => self.heads = num(value)?,
            "n_backbone_blocks" => self.n_backbone_blocks = num(value)?,
            "m_sts" => self.m_sts = num(value)?,
            "stages" => self.stages = num(value)?,
            "state_size" => self.state_size = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            "template_size" => self.template_size = num(value)?,
            "search_size" => self.search_size = num(value)?,
            "enable_temporal" => self.enable_temporal = flag(value)?,
            "enable_hier_spatial" => self.enable_hier_spatial = flag(value)?,
            "enable_semantic" => self.enable_semantic = flag(value)?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}

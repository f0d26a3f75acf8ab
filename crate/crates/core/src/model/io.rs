//! Binary parameter files.
//!
//! Layout, all little-endian: the magic `STSK`, a `u32` format version, the
//! configuration block (nine `u64` sizes, three `u8` switches, the `u64`
//! seed), a `u64` scalar count, then every parameter as `f64` in declaration
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::net::Model;
use crate::model::params::Layout;

pub const MAGIC: &[u8; 4] = b"STSK";
pub const FORMAT_VERSION: u32 = 1;

fn sizes(cfg: &ModelConfig) -> [usize; 9] {
    [
        cfg.dim,
        cfg.heads,
        cfg.n_backbone_blocks,
        cfg.m_sts,
        cfg.stages,
        cfg.state_size,
        cfg.mlp_ratio,
        cfg.template_size,
        cfg.search_size,
    ]
}

pub fn write_model(model: &Model, w: &mut impl Write) -> std::io::Result<()> {
    let cfg = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for s in sizes(cfg) {
        w.write_all(&(s as u64).to_le_bytes())?;
    }
    for f in [cfg.enable_temporal, cfg.enable_hier_spatial, cfg.enable_semantic] {
        w.write_all(&[u8::from(f)])?;
    }
    w.write_all(&cfg.seed.to_le_bytes())?;
    let blob = model.params().flatten();
    w.write_all(&(blob.len() as u64).to_le_bytes())?;
    for v in blob {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated parameter file: {e}")))?;
    Ok(b)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    if &read_array::<4>(r)? != MAGIC {
        return Err(Error::Format("not a parameter file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut s = [0usize; 9];
    for v in &mut s {
        *v = usize::try_from(read_u64(r)?).map_err(|_| Error::Config("size does not fit in usize".into()))?;
    }
    let flags = read_array::<3>(r)?;
    let flag = |b: u8| match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Format(format!("switch byte {b}"))),
    };
    let cfg = ModelConfig {
        dim: s[0],
        heads: s[1],
        n_backbone_blocks: s[2],
        m_sts: s[3],
        stages: s[4],
        state_size: s[5],
        mlp_ratio: s[6],
        template_size: s[7],
        search_size: s[8],
        enable_temporal: flag(flags[0])?,
        enable_hier_spatial: flag(flags[1])?,
        enable_semantic: flag(flags[2])?,
        seed: read_u64(r)?,
    };
    cfg.validate()?;
    let count = read_u64(r)?;
    let (_, mut params) = Layout::build(&cfg, None);
    if count != params.scalar_count() as u64 {
        return Err(Error::Config(format!(
            "file holds {count} parameters, the configuration needs {}",
            params.scalar_count()
        )));
    }
    let mut blob = vec![0.0; params.scalar_count()];
    for v in &mut blob {
        *v = f64::from_le_bytes(read_array(r)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Config("trailing data after the parameter blob".into()));
    }
    params.assign(&blob)?;
    Model::from_params(cfg, params)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut BufReader::new(file))
}

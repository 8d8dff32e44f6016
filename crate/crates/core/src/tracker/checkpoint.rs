//! Binary checkpoint container.
//!
//! ```text
//! "BTAP" | u32 version | u32 tensor count |
//!   per tensor: u32 name length | UTF-8 name | u8 dtype tag |
//!               u32 rank | u32 dims[rank] | payload (little endian)
//! ```
//!
//! Weights use dtype tag 0 (f32); the `__model/` scalars use tag 1 (f64) so
//! hyper-parameters survive exactly.
//!
//! Model hyper-parameters are stored as scalars under `__model/`; anything
//! else under a `__` prefix (optimizer moments, teacher weights, counters)
//! is carried in [`Checkpoint::extra`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams, TrackerError};
use crate::diffcore::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BTAP";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const MODEL_PREFIX: &str = "__model/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Reserved-prefix tensors other than the model config.
    pub extra: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            extra: BTreeMap::new(),
        }
    }
}

fn config_entries(cfg: &ModelConfig) -> Vec<(&'static str, f64)> {
    vec![
        ("fine_channels", cfg.fine_channels as f64),
        ("mid_channels", cfg.mid_channels as f64),
        ("feature_dim", cfg.feature_dim as f64),
        ("head_hidden", cfg.head_hidden as f64),
        ("refine_hidden", cfg.refine_hidden as f64),
        ("iterations", cfg.iterations as f64),
        ("temperature", cfg.temperature),
    ]
}

fn bad(msg: impl Into<String>) -> TrackerError {
    TrackerError::Checkpoint(msg.into())
}

fn write_header(out: &mut impl Write, name: &str, tag: u8, shape: &[usize]) -> std::io::Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[tag])?;
    out.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn write_tensor(out: &mut impl Write, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    write_header(out, name, DTYPE_F32, t.shape())?;
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(out: &mut impl Write, ckpt: &Checkpoint) -> Result<(), TrackerError> {
    let cfg = config_entries(&ckpt.params.config);
    let count = cfg.len() + ckpt.params.tensors.len() + ckpt.extra.len();
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(count as u32).to_le_bytes())?;
    for (key, v) in cfg {
        write_header(out, &format!("{MODEL_PREFIX}{key}"), DTYPE_F64, &[1])?;
        out.write_all(&v.to_le_bytes())?;
    }
    for (name, t) in &ckpt.params.tensors {
        write_tensor(out, name, t)?;
    }
    for (name, t) in &ckpt.extra {
        if !name.starts_with("__") || name.starts_with(MODEL_PREFIX) {
            return Err(bad(format!("extra tensor {name} must use a reserved __ prefix other than {MODEL_PREFIX}")));
        }
        write_tensor(out, name, t)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrackerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, TrackerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let mut model = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(bad("tensor name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|_| bad("truncated dtype"))?;
        let width = match tag[0] {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            other => return Err(bad(format!("{name}: unsupported dtype tag {other}"))),
        };
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(format!("{name}: bad rank {rank}")));
        }
        let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = dims.iter().product();
        if numel == 0 || numel > 1 << 28 {
            return Err(bad(format!("{name}: bad dims {dims:?}")));
        }
        let mut payload = vec![0u8; numel * width];
        r.read_exact(&mut payload).map_err(|_| bad(format!("{name}: truncated payload")))?;
        let data: Vec<f64> = payload
            .chunks_exact(width)
            .map(|c| match c.try_into() {
                Ok(b8) => f64::from_le_bytes(b8),
                Err(_) => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
            })
            .collect();
        if let Some(key) = name.strip_prefix(MODEL_PREFIX) {
            model.insert(key.to_string(), data[0]);
            continue;
        }
        let t = Tensor::new(dims, data.into_iter().map(|v| v as f32).collect()).map_err(|e| bad(e.to_string()))?;
        if name.starts_with("__") {
            extra.insert(name, t);
        } else {
            tensors.insert(name, t);
        }
    }
    let mut field = |k: &str| model.remove(k).ok_or_else(|| bad(format!("missing {MODEL_PREFIX}{k}")));
    let config = ModelConfig {
        fine_channels: field("fine_channels")? as usize,
        mid_channels: field("mid_channels")? as usize,
        feature_dim: field("feature_dim")? as usize,
        head_hidden: field("head_hidden")? as usize,
        refine_hidden: field("refine_hidden")? as usize,
        iterations: field("iterations")? as usize,
        temperature: field("temperature")?,
    };
    let params = ModelParams { config, tensors };
    params.validate()?;
    Ok(Checkpoint { params, extra })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrackerError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrackerError> {
    let bytes = std::fs::read(path)?;
    let mut cursor = &bytes[..];
    let ckpt = read_checkpoint(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(ckpt)
}

//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "HYLMCKPT" | u32 version | u32 n + config text
//! u32 tensor count
//! per tensor: u32 n + name | u32 rank | u64 dims… | f64 data…
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, Profile};
use crate::model::{HybridModel, ModelError};
use crate::moe::FeedForward;

pub const MAGIC: &[u8; 8] = b"HYLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

fn visit(model: &mut HybridModel, f: &mut dyn FnMut(String, Vec<usize>, &mut Vec<f64>)) {
    let m = model;
    f("embedding".into(), vec![m.embedding.rows, m.embedding.cols], &mut m.embedding.data);
    f("head".into(), vec![m.head.rows, m.head.cols], &mut m.head.data);
    let n = m.final_norm.len();
    f("final_norm".into(), vec![n], &mut m.final_norm);
    for (l, b) in m.blocks.iter_mut().enumerate() {
        let p = format!("blocks.{l}");
        let n = b.attn_norm.len();
        f(format!("{p}.attn_norm"), vec![n], &mut b.attn_norm);
        f(format!("{p}.ffn_norm"), vec![n], &mut b.ffn_norm);
        let s = b.attn.sinks.len();
        f(format!("{p}.attn.sinks"), vec![s], &mut b.attn.sinks);
        for (name, mat) in [
            ("wq", &mut b.attn.wq),
            ("wk", &mut b.attn.wk),
            ("wv", &mut b.attn.wv),
            ("wo", &mut b.attn.wo),
        ] {
            f(format!("{p}.attn.{name}"), vec![mat.rows, mat.cols], &mut mat.data);
        }
        let mut ffn = |prefix: String, net: &mut crate::moe::FeedForwardNet| {
            for (name, mat) in [("gate", &mut net.gate), ("up", &mut net.up), ("down", &mut net.down)] {
                f(format!("{prefix}.{name}"), vec![mat.rows, mat.cols], &mut mat.data);
            }
        };
        match &mut b.ffn {
            FeedForward::Dense(net) => ffn(format!("{p}.ffn"), net),
            FeedForward::Moe(moe) => {
                for (e, net) in moe.experts.iter_mut().enumerate() {
                    ffn(format!("{p}.experts.{e}"), net);
                }
                let g = &mut moe.router.gate_weights;
                f(format!("{p}.router.weights"), vec![g.rows, g.cols], &mut g.data);
                let bias = &mut moe.router.expert_bias;
                let n = bias.len();
                f(format!("{p}.router.bias"), vec![n], bias);
            }
        }
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_string(r: &mut impl Read, limit: usize) -> Result<String, CheckpointError> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(CheckpointError::HeaderMismatch(format!("string of {n} bytes")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| CheckpointError::HeaderMismatch("non-UTF-8 string".into()))
}

pub fn write_checkpoint(model: &HybridModel, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let text = model.config.to_text();
    put_u32(w, text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    let mut copy = model.clone();
    let mut tensors = Vec::new();
    visit(&mut copy, &mut |name, shape, data| tensors.push((name, shape, data.clone())));
    put_u32(w, tensors.len() as u32)?;
    for (name, shape, data) in tensors {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, shape.len() as u32)?;
        for d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<HybridModel, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::HeaderMismatch("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::HeaderMismatch("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::HeaderMismatch(format!("version {version}, expected {VERSION}")));
    }
    let text = get_string(r, 1 << 20)?;
    let config = ModelConfig::parse(&text, Profile::Tiny)?;
    let mut model = HybridModel::init(&config, 0)?;
    let count = get_u32(r)? as usize;
    let mut stored = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name = get_string(r, 4096)?;
        let rank = get_u32(r)? as usize;
        if rank > 4 {
            return Err(CheckpointError::Tensor { name, reason: format!("rank {rank}") });
        }
        let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n.checked_mul(8).ok_or(CheckpointError::Truncated)?];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        stored.insert(name, (shape, data));
    }
    let mut failure = None;
    visit(&mut model, &mut |name, shape, data| {
        if failure.is_some() {
            return;
        }
        match stored.remove(&name) {
            Some((s, d)) if s == shape => *data = d,
            Some((s, _)) => {
                failure = Some(CheckpointError::Tensor {
                    name,
                    reason: format!("shape {s:?}, expected {shape:?}"),
                })
            }
            None => failure = Some(CheckpointError::Tensor { name, reason: "missing".into() }),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = stored.into_keys().next() {
        return Err(CheckpointError::Tensor { name, reason: "unexpected".into() });
    }
    Ok(model)
}

pub fn save(model: &HybridModel, path: &std::path::Path) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<HybridModel, CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(CheckpointError::Io)?);
    read_checkpoint(&mut r)
}

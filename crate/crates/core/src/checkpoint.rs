//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `SSDACKP1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.
//! The header carries the architecture, so loading rebuilds the networks and
//! checks every tensor's name and shape against them.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_networks, ArchitectureSpec, NetSet, Networks};

const MAGIC: &[u8; 8] = b"SSDACKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub config_hash: String,
    /// Training iterations completed.
    pub iter: usize,
    pub bn_calibrated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: ArchitectureSpec,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Parameters followed by BN running statistics, with their names.
fn tensors(nets: &Networks<f32>) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<_> = nets
        .params(NetSet::ALL)
        .into_iter()
        .map(|p| (p.name.clone(), p.shape.clone(), p.value.as_slice()))
        .collect();
    for bn in nets.bn_layers() {
        let base = bn.gamma.name.trim_end_matches(".gamma");
        out.push((format!("{base}.running_mean"), vec![bn.channels], bn.running_mean.as_slice()));
        out.push((format!("{base}.running_var"), vec![bn.channels], bn.running_var.as_slice()));
    }
    out
}

pub fn encode_checkpoint(nets: &Networks<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let ts = tensors(nets);
    let header = Header {
        arch: nets.arch.clone(),
        meta: meta.clone(),
        tensors: ts.iter().map(|(n, s, _)| TensorEntry { name: n.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = ts.iter().map(|(_, _, v)| v.len() * 4).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, v) in ts {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(path: &Path, nets: &Networks<f32>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(nets, meta)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Networks<f32>, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| ckpt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| ckpt_err(format!("bad header: {e}")))?;
    let mut nets = build_networks::<f32>(&header.arch, 0)?;
    let expected: Vec<(String, Vec<usize>)> = tensors(&nets).into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != header.tensors.len() {
        return Err(ckpt_err(format!(
            "checkpoint holds {} tensors, architecture needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), e) in expected.iter().zip(&header.tensors) {
        if *name != e.name || *shape != e.shape {
            return Err(ckpt_err(format!(
                "tensor mismatch: checkpoint has {} {:?}, architecture needs {name} {shape:?}",
                e.name, e.shape
            )));
        }
    }
    let mut data = &bytes[16 + hlen..];
    let mut take = |n: usize| -> Result<Vec<f32>> {
        if data.len() < n * 4 {
            return Err(ckpt_err("truncated tensor data"));
        }
        let (head, rest) = data.split_at(n * 4);
        data = rest;
        Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    };
    for p in nets.params_mut(NetSet::ALL) {
        p.value = take(p.value.len())?;
    }
    for bn in nets.bn_layers_mut() {
        bn.running_mean = take(bn.channels)?;
        bn.running_var = take(bn.channels)?;
    }
    if !data.is_empty() {
        return Err(ckpt_err(format!("{} trailing bytes", data.len())));
    }
    Ok((nets, header.meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Networks<f32>, CheckpointMeta)> {
    if !path.is_file() {
        return Err(ckpt_err(format!("missing checkpoint {}", path.display())));
    }
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and insists on a specific architecture.
pub fn load_checkpoint_for(path: &Path, arch: &ArchitectureSpec) -> Result<(Networks<f32>, CheckpointMeta)> {
    let (nets, meta) = load_checkpoint(path)?;
    if nets.arch != *arch {
        return Err(ckpt_err(format!(
            "architecture mismatch: checkpoint {:?}, expected {:?}",
            nets.arch, arch
        )));
    }
    Ok((nets, meta))
}

//! Versioned checkpoint container: an 8-byte magic, a JSON header
//! describing the network and every tensor, then the payload — packed
//! 5-bit shift weights and raw little-endian `f64` tensors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use shiftnet::genotype::Genotype;
use shiftnet::nn::state::{StateEntry, StateMap, TensorPayload};
use shiftnet::shiftparam;

use crate::config::{Domain, NetShape};

const MAGIC: &[u8; 8] = b"SHNETCK1";

/// One sentence in the header documenting the packed encoding, including
/// the reserved zero code.
pub const PACKED_ENCODING_NOTE: &str = "5-bit weights, little-endian bit stream preceded by a \
u32-LE shape header; bits 0-3 = magnitude m with p = -m (m in 0..=14), bit 4 = sign (1 = \
negative); code m=15 with sign 0 is the zero weight; p = -15 clamps to -14 on pack";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub kind: String, // "shift5" | "f64"
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub domain: Domain,
    pub genotype: Genotype,
    pub net: NetShape,
    pub in_channels: usize,
    pub classes: usize,
    pub packed_weight_encoding: String,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone)]
pub struct NetMeta {
    pub domain: Domain,
    pub genotype: Genotype,
    pub net: NetShape,
    pub in_channels: usize,
    pub classes: usize,
}

pub fn save(path: &Path, meta: &NetMeta, entries: &[StateEntry]) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let offset = payload.len() as u64;
        let (kind, shape) = match &e.payload {
            TensorPayload::Shift {
                shape,
                p_bar,
                s_bar,
            } => {
                let bytes = shiftparam::pack_shift5(p_bar, s_bar, shape)
                    .map_err(anyhow::Error::from)?;
                payload.extend_from_slice(&bytes);
                ("shift5".to_string(), shape.clone())
            }
            TensorPayload::Real(a) => {
                for &v in a.iter() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                ("f64".to_string(), a.shape().to_vec())
            }
        };
        tensors.push(TensorMeta {
            name: e.name.clone(),
            kind,
            shape,
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let header = CheckpointMeta {
        format_version: 1,
        domain: meta.domain,
        genotype: meta.genotype.clone(),
        net: meta.net.clone(),
        in_channels: meta.in_channels,
        classes: meta.classes,
        packed_weight_encoding: PACKED_ENCODING_NOTE.to_string(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).ok();
    }
    std::fs::write(path, out)
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, StateMap)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        bail!(
            "{}: not a checkpoint container (bad magic)",
            path.display()
        );
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        bail!("{}: truncated header", path.display());
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + hlen])
        .with_context(|| format!("parsing header of {}", path.display()))?;
    if meta.format_version != 1 {
        bail!(
            "{}: unsupported container version {}",
            path.display(),
            meta.format_version
        );
    }
    let payload = &bytes[12 + hlen..];
    let mut map = StateMap::new();
    for t in &meta.tensors {
        let (off, len) = (t.offset as usize, t.len as usize);
        if payload.len() < off + len {
            bail!("{}: tensor '{}' runs past the payload", path.display(), t.name);
        }
        let raw = &payload[off..off + len];
        let value = match t.kind.as_str() {
            "shift5" => {
                let (shape, p_bar, s_bar) =
                    shiftparam::unpack_shift5(raw).map_err(anyhow::Error::from)?;
                if shape != t.shape {
                    bail!(
                        "{}: tensor '{}' shape mismatch {:?} vs {:?}",
                        path.display(),
                        t.name,
                        shape,
                        t.shape
                    );
                }
                TensorPayload::Shift {
                    shape,
                    p_bar,
                    s_bar,
                }
            }
            "f64" => {
                let n: usize = t.shape.iter().product();
                if len != 8 * n {
                    bail!(
                        "{}: tensor '{}' wants {} bytes, has {}",
                        path.display(),
                        t.name,
                        8 * n,
                        len
                    );
                }
                let vals: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorPayload::Real(ArrayD::from_shape_vec(IxDyn(&t.shape), vals)?)
            }
            other => bail!(
                "{}: tensor '{}' has unsupported format '{}'",
                path.display(),
                t.name,
                other
            ),
        };
        map.insert(t.name.clone(), value);
    }
    Ok((meta, map))
}

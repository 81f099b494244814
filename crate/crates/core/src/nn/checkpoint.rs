//! Model files: one JSON header line, then the parameters as
//! little-endian f32 in registration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "holter-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"seg"` or `"cls"`.
    pub kind: String,
    pub config: serde_json::Value,
    /// Free-form metadata such as the sampling rate the model expects.
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: ck.kind.clone(),
        config: ck.config.clone(),
        meta: ck.meta.clone(),
        params: ck
            .params
            .names()
            .iter()
            .zip(ck.params.tensors())
            .map(|(n, t)| ParamEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for t in ck.params.tensors() {
        for v in t.to_f32_vec() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
    }
    let payload = &bytes[nl + 1..];
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(Error::Checkpoint(format!("payload has {} bytes, header describes {}", payload.len(), total * 4)));
    }
    let mut params = ParamSet::new();
    let mut off = 0;
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let vals: Vec<f32> =
            payload[off..off + n * 4].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        off += n * 4;
        params.add(p.name, Tensor::from_f32(p.shape, &vals)?);
    }
    Ok(Checkpoint { kind: header.kind, config: header.config, meta: header.meta, params })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.add("a.w", Tensor::new(vec![2, 1, 3], vec![0.5, -1.0, 2.25, 3.0, 0.0, -0.125]).unwrap());
        params.add("a.b", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        Checkpoint { kind: "test".into(), config: serde_json::json!({"k": 3}), meta: serde_json::json!({"fs": 125.0}), params }
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 2]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn foreign_file_rejected() {
        assert!(decode_checkpoint(b"{\"format\":\"other\"}\n").is_err());
        assert!(decode_checkpoint(b"no newline").is_err());
    }
}

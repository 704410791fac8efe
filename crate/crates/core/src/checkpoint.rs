//! Versioned binary checkpoints.
//!
//! Layout: the 8 magic bytes `TBVLM1\0\0`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then every tensor as little-endian `f32`
//! values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"TBVLM1\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointHeader {
    fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum()
    }
}

pub fn header_for(model: &Model) -> CheckpointHeader {
    let mut offset = 0;
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| {
            let rec = TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 4;
            rec
        })
        .collect();
    CheckpointHeader {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        vocabulary: model.vocab.tokens().to_vec(),
        tensors,
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = header_for(model);
    let json = serde_json::to_vec(&header).map_err(|e| Error::Model(format!("header encoding: {e}")))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Model("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint image; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < 12 {
        return Err(format("missing header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < header_len {
        return Err(format(format!("header of {header_len} bytes extends past end of file")));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| format(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = &body[header_len..];
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            found: payload.len(),
            expected,
        });
    }
    if payload.len() > expected {
        return Err(format(format!(
            "{} trailing bytes after a {expected}-byte payload",
            payload.len() - expected
        )));
    }
    let mut next = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for rec in &header.tensors {
        let n: usize = rec.shape.iter().product();
        if rec.offset != next {
            return Err(format(format!(
                "tensor {} at offset {} overlaps or leaves a gap (expected {next})",
                rec.name, rec.offset
            )));
        }
        let data = payload[next..next + 4 * n]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        next += 4 * n;
        let t = Tensor::new(rec.shape.clone(), data).map_err(|e| format(format!("tensor {}: {e}", rec.name)))?;
        tensors.push((rec.name.clone(), t));
    }
    let vocab = Vocabulary::from_tokens(header.vocabulary)?;
    Model::from_parts(header.config, vocab, tensors)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Rounds every parameter to the nearest `f32`, the precision a checkpoint
/// stores.
pub fn quantize(model: &mut Model) {
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let vocab = Vocabulary::build(&["fever cough nodule"]).unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.n_enc_layers = 1;
        cfg.n_dec_layers = 1;
        cfg.n_fusion_layers = 1;
        Model::init(cfg, vocab, 5).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = tiny();
        let a = to_bytes(&m).unwrap();
        let back = from_bytes(&a, Path::new("mem")).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), a);
        assert_eq!(back.manifest(), m.manifest());
    }

    #[test]
    fn corruption_is_named() {
        let bytes = to_bytes(&tiny()).unwrap();
        let p = Path::new("mem");
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 4], p),
            Err(Error::TruncatedPayload { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, p), Err(Error::BadMagic { .. })));
    }
}

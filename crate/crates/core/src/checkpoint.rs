//! Operator checkpoint files.
//!
//! Layout: the magic `SRCKPT1\n`, a little-endian u32 length, that many bytes
//! of JSON metadata, then every parameter as a little-endian f64 in layout
//! order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{OperatorArch, OperatorParams};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"SRCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: OperatorArch,
    pub seed: u64,
    pub step: u64,
    /// Evaluated total loss at this step, when one was computed.
    pub total: Option<f64>,
    pub param_count: usize,
    /// (channels, height, width) per tensor.
    pub shapes: Vec<[usize; 3]>,
    /// Scalar type the run trained in.
    pub scalar: String,
}

pub fn encode<T: Scalar>(params: &OperatorParams<T>, step: u64, total: Option<f64>) -> Vec<u8> {
    let meta = CheckpointMeta {
        arch: params.arch.clone(),
        seed: params.seed,
        step,
        total,
        param_count: params.param_count(),
        shapes: params
            .tensors
            .iter()
            .map(|t| {
                let s = t.shape();
                [s.channels, s.height, s.width]
            })
            .collect(),
        scalar: T::NAME.to_string(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * meta.param_count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(OperatorParams<T>, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let layout = meta.arch.layout();
    if layout.len() != meta.shapes.len() {
        return Err(Error::Checkpoint(format!(
            "architecture has {} tensors, checkpoint lists {}",
            layout.len(),
            meta.shapes.len()
        )));
    }
    for (spec, s) in layout.iter().zip(&meta.shapes) {
        let shape = Shape::new(s[0], s[1], s[2]);
        if spec.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{} is {} in the architecture but {} in the checkpoint",
                spec.name, spec.shape, shape
            )));
        }
    }
    let total: usize = layout.iter().map(|s| s.shape.len()).sum();
    if total != meta.param_count {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match the architecture ({total})",
            meta.param_count
        )));
    }
    let body = &bytes[12 + len..];
    if body.len() != 8 * total {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * total,
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    let tensors = layout
        .iter()
        .map(|spec| {
            let data: Vec<T> = values.by_ref().take(spec.shape.len()).collect();
            Tensor::from_vec(spec.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = OperatorParams {
        arch: meta.arch.clone(),
        seed: meta.seed,
        tensors,
    };
    params
        .check_finite()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((params, meta))
}

/// Writes through a temporary file and a rename so readers never see a
/// partial checkpoint.
pub fn save<T: Scalar>(path: &Path, params: &OperatorParams<T>, step: u64, total: Option<f64>) -> Result<()> {
    write_atomic(path, &encode(params, step, total))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(OperatorParams<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_in_f64() {
        let p = OperatorParams::<f64>::init(OperatorArch::with_width(0.25), 9);
        let (q, meta) = decode::<f64>(&encode(&p, 12, Some(0.5))).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta.step, 12);
        assert_eq!(meta.total, Some(0.5));
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let p = OperatorParams::<f32>::init(OperatorArch::with_width(0.25), 9);
        let (q, _) = decode::<f32>(&encode(&p, 0, None)).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = OperatorParams::<f64>::init(OperatorArch::with_width(0.25), 1);
        let bytes = encode(&p, 0, None);
        assert!(decode::<f64>(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode::<f64>(b"PNG....").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode::<f64>(&wrong), Err(Error::Checkpoint(_))));
    }
}

//! Binary checkpoint format.
//!
//! Layout: the 5 ASCII bytes `CMRK1`, the 32-byte SHA-256 digest of the model
//! spec, the parameter count as a little-endian `u64`, then that many
//! little-endian `f32` values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamVector;
use super::spec::ModelSpec;
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CMRK1";
const HEADER_LEN: usize = 5 + 32 + 8;

pub fn encode_checkpoint(spec: &ModelSpec, params: &ParamVector) -> Result<Vec<u8>, NnError> {
    params.check_len(spec.param_count()?)?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&spec.digest());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(spec: &ModelSpec, bytes: &[u8]) -> Result<ParamVector, NnError> {
    if bytes.len() < HEADER_LEN {
        return Err(NnError::Checkpoint(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic, expected CMRK1".into()));
    }
    if bytes[5..37] != spec.digest() {
        return Err(NnError::DigestMismatch);
    }
    let count = u64::from_le_bytes(bytes[37..45].try_into().unwrap()) as usize;
    let expected = spec.param_count()?;
    if count != expected {
        return Err(NnError::ParamCount {
            expected,
            actual: count,
        });
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * count {
        return Err(NnError::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            4 * count,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParamVector::new(values)
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamVector) -> Result<(), NnError> {
    fs::write(path, encode_checkpoint(spec, params)?)
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<ParamVector, NnError> {
    let bytes =
        fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(spec, &bytes)
}

/// SHA-256 of the encoded checkpoint, hex encoded. Identifies a certified model.
pub fn model_digest(spec: &ModelSpec, params: &ParamVector) -> Result<String, NnError> {
    let bytes = encode_checkpoint(spec, params)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

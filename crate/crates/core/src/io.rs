//! Binary and JSON artifact I/O.
//!
//! Tensors are stored as raw little-endian `f32`. All writes go through
//! [`atomic_write`], which writes a sibling temp file and renames it.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `values` as little-endian f32 and returns the SHA-256 of the bytes.
pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<String> {
    let bytes = f32_to_le_bytes(values);
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    f32_from_le_bytes(&bytes).ok_or_else(|| Error::Integrity {
        path: path.to_path_buf(),
        reason: format!("length {} is not a multiple of 4", bytes.len()),
    })
}

/// Reads an f32 file and checks its SHA-256 against `digest`.
pub fn read_f32_file_checked(path: &Path, digest: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let got = sha256_hex(&bytes);
    if got != digest {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            reason: format!("digest {got} does not match manifest {digest}"),
        });
    }
    f32_from_le_bytes(&bytes).ok_or_else(|| Error::Integrity {
        path: path.to_path_buf(),
        reason: "truncated f32 data".into(),
    })
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    bytes
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let bytes = to_json_bytes(value);
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn json_digest<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_file_round_trip_and_digest_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let digest = write_f32_file(&path, &[1.0, -2.5, 3.25]).unwrap();
        assert_eq!(read_f32_file_checked(&path, &digest).unwrap(), vec![1.0, -2.5, 3.25]);
        assert!(matches!(read_f32_file_checked(&path, "00"), Err(Error::Integrity { .. })));
        // raw layout is little-endian
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, [0u8; 5]).unwrap();
        assert!(matches!(read_f32_file(&path), Err(Error::Integrity { .. })));
    }
}

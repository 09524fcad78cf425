//! Versioned named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic  b"IMCK"
//!   u32    version (currently 1)
//!   u64    metadata byte length, then UTF-8 JSON metadata
//!   u32    tensor count
//!   per tensor: u32 name_len, name bytes, u8 dtype (0 = f32),
//!               u32 ndim, u64×ndim dims, u64 payload offset, u64 byte length
//!   payload: raw f32 bytes
//!
//! Offsets are validated to be non-overlapping and in-bounds on load, and a
//! save → load round trip reproduces every tensor bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected IMCK")]
    BadMagic,
    #[error("unsupported version {found}; supported versions: {supported}")]
    BadVersion { found: u32, supported: u32 },
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("corrupt metadata: {0}")]
    BadMetadata(String),
    #[error("tensor {name}: offset {offset}..{end} out of bounds (payload {payload})")]
    OutOfBounds {
        name: String,
        offset: u64,
        end: u64,
        payload: u64,
    },
    #[error("tensor {a} overlaps tensor {b}")]
    Overlap { a: String, b: String },
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Which module this checkpoint belongs to (e.g. "sem-codec").
    pub kind: String,
    /// Training step at save time.
    pub step: u64,
    /// Echo of the module configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");

    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&meta_bytes).map_err(|e| io_err(path, e))?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;

    let mut offset = 0u64;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes()).map_err(|e| io_err(path, e))?;
        w.write_all(nb).map_err(|e| io_err(path, e))?;
        w.write_all(&[0u8]).map_err(|e| io_err(path, e))?; // dtype f32
        w.write_all(&(t.shape().len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
        let byte_len = (t.numel() * 4) as u64;
        w.write_all(&offset.to_le_bytes()).map_err(|e| io_err(path, e))?;
        w.write_all(&byte_len.to_le_bytes()).map_err(|e| io_err(path, e))?;
        offset += byte_len;
    }
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

struct Parsed {
    meta: CheckpointMeta,
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| io_err(path, e))
}

fn parse(path: &Path) -> Result<Parsed, CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    read_exact_or(&mut r, &mut u32b, path)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            found: version,
            supported: VERSION,
        });
    }
    read_exact_or(&mut r, &mut u64b, path)?;
    let meta_len = u64::from_le_bytes(u64b) as usize;
    if meta_len > 1 << 30 {
        return Err(CheckpointError::BadMetadata(format!(
            "implausible metadata length {meta_len}"
        )));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_or(&mut r, &mut meta_bytes, path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;

    read_exact_or(&mut r, &mut u32b, path)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact_or(&mut r, &mut u32b, path)?;
        let name_len = u32::from_le_bytes(u32b) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, path)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::BadMetadata(format!("tensor name: {e}")))?;
        let mut dtype = [0u8; 1];
        read_exact_or(&mut r, &mut dtype, path)?;
        if dtype[0] != 0 {
            return Err(CheckpointError::BadDtype(dtype[0]));
        }
        read_exact_or(&mut r, &mut u32b, path)?;
        let ndim = u32::from_le_bytes(u32b) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            read_exact_or(&mut r, &mut u64b, path)?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        read_exact_or(&mut r, &mut u64b, path)?;
        let offset = u64::from_le_bytes(u64b);
        read_exact_or(&mut r, &mut u64b, path)?;
        let byte_len = u64::from_le_bytes(u64b);
        entries.push(TensorEntry {
            name,
            shape,
            offset,
            byte_len,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;

    // Bounds and overlap validation.
    let payload_len = payload.len() as u64;
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    for e in &entries {
        let numel: usize = e.shape.iter().product();
        let end = e.offset + e.byte_len;
        if e.byte_len != (numel * 4) as u64 || end > payload_len {
            if end > payload_len {
                return Err(CheckpointError::OutOfBounds {
                    name: e.name.clone(),
                    offset: e.offset,
                    end,
                    payload: payload_len,
                });
            }
            return Err(CheckpointError::BadMetadata(format!(
                "tensor {} byte length {} does not match shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        spans.push((e.offset, end, &e.name));
    }
    let mut sorted = spans.clone();
    sorted.sort_by_key(|s| s.0);
    for w in sorted.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(CheckpointError::Overlap {
                a: w[0].2.to_string(),
                b: w[1].2.to_string(),
            });
        }
    }
    let expected: u64 = entries.iter().map(|e| e.byte_len).sum();
    if payload_len < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload_len,
        });
    }
    Ok(Parsed {
        meta,
        entries,
        payload,
    })
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>), CheckpointError> {
    let parsed = parse(path)?;
    let mut out = Vec::with_capacity(parsed.entries.len());
    for e in &parsed.entries {
        let bytes = &parsed.payload[e.offset as usize..(e.offset + e.byte_len) as usize];
        let mut data = Vec::with_capacity(bytes.len() / 4);
        for c in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        let t = Tensor::new(&e.shape, data)
            .map_err(|err| CheckpointError::BadMetadata(err.to_string()))?;
        out.push((e.name.clone(), t));
    }
    Ok((parsed.meta, out))
}

/// Validate a checkpoint and return its metadata and tensor table without
/// materializing tensor data.
pub fn inspect(path: &Path) -> Result<(CheckpointMeta, Vec<TensorEntry>), CheckpointError> {
    let parsed = parse(path)?;
    Ok((parsed.meta, parsed.entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn sample_tensors() -> Vec<(String, Tensor)> {
        let mut rng = seeded_rng(11);
        vec![
            ("enc.w".to_string(), Tensor::randn(&[4, 3], 0.0, 1.0, &mut rng)),
            ("enc.b".to_string(), Tensor::randn(&[4], 0.0, 1.0, &mut rng)),
            ("dec.w".to_string(), Tensor::randn(&[2, 4, 5], 0.0, 1.0, &mut rng)),
        ]
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            kind: "test".into(),
            step: 42,
            config: serde_json::json!({"width": 4}),
        }
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.imck");
        let tensors = sample_tensors();
        let refs: Vec<(String, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        save(&path, &meta(), &refs).unwrap();
        let (m, loaded) = load(&path).unwrap();
        assert_eq!(m.kind, "test");
        assert_eq!(m.step, 42);
        assert_eq!(loaded.len(), tensors.len());
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            // bit-exact
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.imck");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn future_version_names_supported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.imck");
        let tensors = sample_tensors();
        let refs: Vec<(String, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        save(&path, &meta(), &refs).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match load(&path) {
            Err(CheckpointError::BadVersion { found, supported }) => {
                assert_eq!(found, VERSION + 1);
                assert_eq!(supported, VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_bounds_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.imck");
        let tensors = sample_tensors();
        let refs: Vec<(String, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        save(&path, &meta(), &refs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match inspect(&path) {
            Err(CheckpointError::OutOfBounds { .. }) | Err(CheckpointError::Truncated { .. }) => {}
            other => panic!("expected bounds error, got {other:?}"),
        }
    }

    #[test]
    fn inspect_reports_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.imck");
        let tensors = sample_tensors();
        let refs: Vec<(String, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        save(&path, &meta(), &refs).unwrap();
        let (_, entries) = inspect(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[2].shape, vec![2, 4, 5]);
    }
}

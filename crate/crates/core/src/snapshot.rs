//! Binary container for named parameter arrays.
//!
//! Layout: magic `HHIRSNAP`, `u32` version, `u64` header length, a JSON
//! header (free-form `meta` plus an array manifest with shapes and per-array
//! SHA-256), the `f64` little-endian payload in manifest order, and finally
//! a 32-byte SHA-256 over every preceding byte. [`save`] also writes a
//! `<file>.sha256` sidecar holding the hex digest of the whole file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::params::ParamStore;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"HHIRSNAP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("snapshot version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("snapshot checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error(
        "parameter `{name}` has shape {found:?} in the snapshot but {expected:?} in the model"
    )]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("parameter `{0}` is missing from the snapshot")]
    Missing(String),
    #[error("snapshot parameter `{0}` is unknown to the model")]
    Unexpected(String),
    #[error("malformed snapshot: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

fn array_digest(m: &Mat) -> String {
    let mut h = Sha256::new();
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn to_bytes(meta: &serde_json::Value, store: &ParamStore) -> Vec<u8> {
    let header = Header {
        meta: meta.clone(),
        arrays: store
            .iter()
            .map(|(name, m)| ArrayEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                sha256: array_digest(m),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + store.scalar_count() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in store.iter() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore), SnapshotError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    if bytes.len() < 20 + 32 {
        return Err(SnapshotError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(SnapshotError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(SnapshotError::Checksum);
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| SnapshotError::Format("header overruns file".into()))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])
        .map_err(|e| SnapshotError::Format(e.to_string()))?;
    let mut store = ParamStore::default();
    let mut pos = header_end;
    for a in header.arrays {
        let n = a.rows * a.cols;
        let end = pos + n * 8;
        if end > body.len() {
            return Err(SnapshotError::Format(format!(
                "payload of `{}` overruns file",
                a.name
            )));
        }
        let data = body[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        let m = Mat::from_vec(a.rows, a.cols, data);
        if array_digest(&m) != a.sha256 {
            return Err(SnapshotError::Checksum);
        }
        store.insert(a.name, m);
    }
    if pos != body.len() {
        return Err(SnapshotError::Format("trailing payload bytes".into()));
    }
    Ok((header.meta, store))
}

pub fn save(
    path: &Path,
    meta: &serde_json::Value,
    store: &ParamStore,
) -> Result<(), SnapshotError> {
    let bytes = to_bytes(meta, store);
    let io = |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(path, &bytes).map_err(io)?;
    let sidecar = sidecar_path(path);
    fs::write(
        &sidecar,
        format!("{}\n", hex::encode(Sha256::digest(&bytes))),
    )
    .map_err(|source| SnapshotError::Io {
        path: sidecar,
        source,
    })
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore), SnapshotError> {
    let bytes = fs::read(path).map_err(|source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// Fails on the first snapshot array accepted by `filter` that `target`
/// does not hold.
pub fn check_no_extra(
    target: &ParamStore,
    snapshot: &ParamStore,
    filter: impl Fn(&str) -> bool,
) -> Result<(), SnapshotError> {
    match snapshot.names().find(|n| filter(n) && !target.contains(n)) {
        Some(n) => Err(SnapshotError::Unexpected(n.to_string())),
        None => Ok(()),
    }
}

/// Replaces every parameter of `target` accepted by `filter` with the
/// snapshot's array of the same name. Shapes must agree exactly.
pub fn restore_into(
    target: &mut ParamStore,
    snapshot: &ParamStore,
    filter: impl Fn(&str) -> bool,
) -> Result<(), SnapshotError> {
    let names: Vec<String> = target
        .names()
        .filter(|n| filter(n))
        .map(String::from)
        .collect();
    for name in names {
        let src = snapshot
            .get(&name)
            .ok_or_else(|| SnapshotError::Missing(name.clone()))?;
        let dst = target.get_mut(&name).expect("name taken from target");
        if src.shape() != dst.shape() {
            return Err(SnapshotError::Shape {
                name,
                expected: dst.shape(),
                found: src.shape(),
            });
        }
        *dst = src.clone();
    }
    Ok(())
}

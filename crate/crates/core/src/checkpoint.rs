//! Portable checkpoint directories: `manifest.json` plus `tensors.bin`.
//!
//! `tensors.bin` concatenates little-endian float32 tensors, each starting on
//! a 64-byte boundary. The manifest lists every tensor with its shape, byte
//! range and the CRC32 of exactly those bytes. Weight matrices are stored
//! input-major (`[in, out]`), so a layer computes `x · W + b`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::PeLayout;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const FORMAT: &str = "any2point-checkpoint";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// `backbone` or `trainables`.
    pub kind: String,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub pe_layout: Option<PeLayout>,
    #[serde(default)]
    pub pe_resized: bool,
    #[serde(default)]
    pub cls_synthesized: bool,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            config,
            pe_layout: None,
            pe_resized: false,
            cls_synthesized: false,
            tensors: Vec::new(),
        }
    }
}

/// A tensor as stored: arbitrary rank, float32 payload.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    /// Rank-1 for row vectors, rank-2 otherwise.
    pub fn from_matrix<T: Scalar>(name: &str, m: &Matrix<T>) -> Self {
        let shape = if m.rows() == 1 {
            vec![m.cols()]
        } else {
            vec![m.rows(), m.cols()]
        };
        Self::with_shape(name, shape, m)
    }

    pub fn with_shape<T: Scalar>(name: &str, shape: Vec<usize>, m: &Matrix<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), m.len());
        Self {
            name: name.into(),
            shape,
            data: m.data().iter().map(|v| v.as_f32()).collect(),
        }
    }

    /// Converts to a matrix after checking the stored shape is exactly
    /// `expected`; all leading axes fold into rows.
    pub fn to_matrix<T: Scalar>(&self, expected: &[usize]) -> Result<Matrix<T>> {
        if self.shape != expected {
            return Err(Error::ShapeError {
                tensor: self.name.clone(),
                detail: format!("expected shape {expected:?}, found {:?}", self.shape),
            });
        }
        let cols = *expected.last().unwrap_or(&1);
        let rows = if expected.is_empty() { 1 } else { expected[..expected.len() - 1].iter().product() };
        Matrix::from_vec(rows, cols, self.data.iter().map(|&v| T::of(v as f64)).collect())
    }
}

/// Writes `tensors` and a manifest built from `meta` into `dir`.
pub fn write_checkpoint(dir: &Path, meta: &Manifest, tensors: &[StoredTensor]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = meta.clone();
    manifest.format = FORMAT.into();
    manifest.version = VERSION;
    manifest.tensors.clear();
    for t in tensors {
        let pad = (ALIGN - blob.len() % ALIGN) % ALIGN;
        blob.resize(blob.len() + pad, 0);
        let offset = blob.len();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let bytes = &blob[offset..];
        manifest.tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset: offset as u64,
            nbytes: bytes.len() as u64,
            crc32: crc32fast::hash(bytes),
        });
    }
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestError(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::ManifestError(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::ManifestError(format!("unsupported version {}", manifest.version)));
    }
    let mut seen = std::collections::HashSet::new();
    for t in &manifest.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::ManifestError(format!("duplicate tensor `{}`", t.name)));
        }
        if t.dtype != "f32" {
            return Err(Error::ManifestError(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
        }
        if t.offset % ALIGN as u64 != 0 {
            return Err(Error::ManifestError(format!("tensor `{}` is not 64-byte aligned", t.name)));
        }
        let elems: usize = t.shape.iter().product();
        if elems as u64 * 4 != t.nbytes {
            return Err(Error::ShapeError {
                tensor: t.name.clone(),
                detail: format!("shape {:?} does not match {} bytes", t.shape, t.nbytes),
            });
        }
    }
    Ok(manifest)
}

/// Reads and verifies every tensor against the manifest.
pub fn read_checkpoint(dir: &Path) -> Result<(Manifest, Vec<StoredTensor>)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let (start, end) = (t.offset as usize, (t.offset + t.nbytes) as usize);
        if end > blob.len() {
            return Err(Error::ChecksumError {
                tensor: t.name.clone(),
                detail: format!("blob truncated: needs {end} bytes, has {}", blob.len()),
            });
        }
        let bytes = &blob[start..end];
        let crc = crc32fast::hash(bytes);
        if crc != t.crc32 {
            return Err(Error::ChecksumError {
                tensor: t.name.clone(),
                detail: format!("crc32 {crc:08x} != manifest {:08x}", t.crc32),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(StoredTensor {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data,
        });
    }
    Ok((manifest, tensors))
}

/// Looks up a tensor by name, failing with `ManifestError` when absent.
pub fn find<'a>(tensors: &'a [StoredTensor], name: &str) -> Result<&'a StoredTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::ManifestError(format!("tensor `{name}` missing from manifest")))
}

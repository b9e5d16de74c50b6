//! JSON manifest + sibling binary blob container.
//!
//! A manifest lists named blobs living in one sibling `.bin` file, each with
//! a byte offset, byte length, element type and a 64-bit FNV-1a checksum of
//! its bytes. All numeric payloads are little-endian.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub dtype: Dtype,
    pub offset: u64,
    pub length: u64,
    /// Hex-encoded FNV-1a 64 of the blob bytes.
    pub fnv1a64: String,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Path of the blob file that sits next to `manifest`.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

#[derive(Default)]
pub struct BlobWriter {
    file_name: String,
    buf: Vec<u8>,
    entries: Vec<BlobEntry>,
}

impl BlobWriter {
    pub fn new(file_name: impl Into<String>) -> Self {
        Self {
            file_name: file_name.into(),
            ..Default::default()
        }
    }

    fn push_bytes(&mut self, name: &str, dtype: Dtype, bytes: Vec<u8>) {
        let offset = self.buf.len() as u64;
        let checksum = fnv1a64(&bytes);
        self.entries.push(BlobEntry {
            name: name.to_string(),
            file: self.file_name.clone(),
            dtype,
            offset,
            length: bytes.len() as u64,
            fnv1a64: format!("{checksum:016x}"),
        });
        self.buf.extend_from_slice(&bytes);
    }

    /// Stores the values narrowed to `f32`.
    pub fn put_f32(&mut self, name: &str, values: impl IntoIterator<Item = f64>) {
        let bytes = values
            .into_iter()
            .flat_map(|v| (v as f32).to_le_bytes())
            .collect();
        self.push_bytes(name, Dtype::F32, bytes);
    }

    pub fn put_u32(&mut self, name: &str, values: impl IntoIterator<Item = u32>) {
        let bytes = values.into_iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push_bytes(name, Dtype::U32, bytes);
    }

    /// Writes the blob file next to `manifest` and returns the blob table.
    pub fn finish(self, manifest: &Path) -> Result<Vec<BlobEntry>> {
        let path = manifest
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.file_name);
        std::fs::write(path, &self.buf)?;
        Ok(self.entries)
    }
}

pub struct BlobReader {
    blobs: BTreeMap<String, (Dtype, Vec<u8>)>,
}

impl BlobReader {
    /// Loads every blob in `entries`, verifying bounds and checksums.
    /// `field` names the manifest section in error messages.
    pub fn open(manifest: &Path, entries: &[BlobEntry], field: &str) -> Result<Self> {
        let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut blobs = BTreeMap::new();
        for e in entries {
            if !files.contains_key(&e.file) {
                let data = std::fs::read(dir.join(&e.file))
                    .map_err(|err| Error::rig(field, format!("blob file {}: {err}", e.file)))?;
                files.insert(e.file.clone(), data);
            }
            let data = &files[&e.file];
            let start = e.offset as usize;
            let end = start
                .checked_add(e.length as usize)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| Error::rig(&e.name, "blob range outside file"))?;
            let bytes = data[start..end].to_vec();
            if format!("{:016x}", fnv1a64(&bytes)) != e.fnv1a64 {
                return Err(Error::rig(&e.name, "checksum mismatch"));
            }
            if !bytes.len().is_multiple_of(4) {
                return Err(Error::rig(&e.name, "length not a multiple of 4"));
            }
            blobs.insert(e.name.clone(), (e.dtype, bytes));
        }
        Ok(Self { blobs })
    }

    fn raw(&self, name: &str, dtype: Dtype) -> Result<&[u8]> {
        let (dt, bytes) = self
            .blobs
            .get(name)
            .ok_or_else(|| Error::rig(name, "missing blob"))?;
        if *dt != dtype {
            return Err(Error::rig(name, format!("expected {dtype:?}, found {dt:?}")));
        }
        Ok(bytes)
    }

    pub fn f32s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .raw(name, Dtype::F32)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        Ok(self
            .raw(name, Dtype::U32)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Reads an `f32` blob that must hold exactly `count` triples.
    pub fn vec3s(&self, name: &str, count: usize) -> Result<Vec<[f64; 3]>> {
        let flat = self.f32s(name)?;
        if flat.len() != count * 3 {
            return Err(Error::rig(
                name,
                format!("expected {} values, found {}", count * 3, flat.len()),
            ));
        }
        Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Writes `contents` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

//! Binary container for named arrays, shared by datasets, checkpoints and
//! rollout logs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"RBVC"
//! u32    format version
//! bytes  array payloads, back to back
//! bytes  JSON header: kind, metadata map, array index (name, dtype, shape, offset, len)
//! u64    header length
//! [32]   SHA-256 over everything above
//! ```
//!
//! Writing goes to a sibling temporary file that is renamed into place on
//! [`ContainerWriter::finish`]; a writer dropped before that removes its file.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RBVC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I32,
    F32,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I32 | DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::I32(_) => DType::I32,
            ArrayData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::U8(v) => v.clone(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::U8 => ArrayData::U8(bytes.to_vec()),
            DType::I32 => ArrayData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        }
    }
}

/// A named n-dimensional array with a row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "array shape {shape:?} holds {n} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, ArrayData::F32(data))
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            ArrayData::I32(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: BTreeMap<String, String>,
    arrays: Vec<IndexEntry>,
}

/// In-memory view of a container file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, NamedArray>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("container has no array {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("container has no metadata key {key:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ContainerWriter::create(path, &self.kind)?;
        for (name, arr) in &self.arrays {
            w.push(name, arr)?;
        }
        w.finish(&self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }

    fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let body_end = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(corrupt("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(bytes[body_end - 8..body_end].try_into().unwrap()) as usize;
        let header_end = body_end - 8;
        if hlen > header_end - 8 {
            return Err(corrupt("header length out of range"));
        }
        let header: Header = serde_json::from_slice(&bytes[header_end - hlen..header_end])
            .map_err(|e| corrupt(&format!("header: {e}")))?;
        let payload = &bytes[8..header_end - hlen];
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let (start, len) = (e.offset as usize, e.len as usize);
            if start + len > payload.len() || len % e.dtype.size() != 0 {
                return Err(corrupt(&format!("array {} out of bounds", e.name)));
            }
            let data = ArrayData::from_le_bytes(e.dtype, &payload[start..start + len]);
            let arr = NamedArray::new(e.shape, data).map_err(|_| corrupt("array shape"))?;
            arrays.insert(e.name, arr);
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }
}

/// Streaming writer; arrays are appended as they are produced so large
/// datasets never need to be resident at once.
pub struct ContainerWriter {
    final_path: PathBuf,
    tmp_path: PathBuf,
    out: Option<BufWriter<File>>,
    hasher: Sha256,
    kind: String,
    index: Vec<IndexEntry>,
    offset: u64,
}

impl ContainerWriter {
    pub fn create(path: &Path, kind: &str) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(format!(".tmp{}", std::process::id()));
        let tmp_path = path.with_file_name(name);
        let file = File::create(&tmp_path).map_err(|e| Error::io(&tmp_path, e))?;
        let mut w = Self {
            final_path: path.to_path_buf(),
            tmp_path,
            out: Some(BufWriter::new(file)),
            hasher: Sha256::new(),
            kind: kind.to_string(),
            index: Vec::new(),
            offset: 0,
        };
        let mut head = MAGIC.to_vec();
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.write_raw(&head)?;
        Ok(w)
    }

    fn write_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.hasher.update(bytes);
        let out = self.out.as_mut().expect("writer already finished");
        out.write_all(bytes).map_err(|e| Error::io(&self.tmp_path, e))
    }

    pub fn push(&mut self, name: &str, array: &NamedArray) -> Result<()> {
        let bytes = array.data.to_le_bytes();
        self.write_raw(&bytes)?;
        self.index.push(IndexEntry {
            name: name.to_string(),
            dtype: array.data.dtype(),
            shape: array.shape.clone(),
            offset: self.offset,
            len: bytes.len() as u64,
        });
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn finish(mut self, meta: &BTreeMap<String, String>) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: meta.clone(),
            arrays: std::mem::take(&mut self.index),
        };
        let hbytes = serde_json::to_vec(&header).expect("header serializes");
        self.write_raw(&hbytes)?;
        self.write_raw(&(hbytes.len() as u64).to_le_bytes())?;
        let digest = std::mem::take(&mut self.hasher).finalize();
        let mut out = self.out.take().expect("writer already finished");
        let tmp = self.tmp_path.clone();
        out.write_all(&digest).map_err(|e| Error::io(&tmp, e))?;
        let file = out
            .into_inner()
            .map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        fs::rename(&tmp, &self.final_path).map_err(|e| Error::io(&self.final_path, e))?;
        Ok(())
    }
}

impl Drop for ContainerWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp_path);
        }
    }
}

/// Write a small text file atomically (temp file + rename).
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(name);
    let res = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.meta.insert("a".into(), "1".into());
        c.insert(
            "x",
            NamedArray::f32(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
        );
        c.insert(
            "y",
            NamedArray::new(vec![3], ArrayData::U8(vec![1, 2, 255])).unwrap(),
        );
        c.insert(
            "z",
            NamedArray::new(vec![1], ArrayData::I32(vec![-7])).unwrap(),
        );
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = sample();
        c.save(&p).unwrap();
        let back = Container::load(&p).unwrap();
        assert_eq!(c, back);
        let xs = back.array("x").unwrap().as_f32().unwrap();
        assert_eq!(xs[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncated_file_is_reported_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        sample().save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            fs::write(&p, &bytes[..cut]).unwrap();
            match Container::load(&p) {
                Err(Error::Corrupt { .. }) => {}
                other => panic!("cut {cut}: expected corrupt error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        sample().save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[4] = 9;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Container::load(&p), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn dropped_writer_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        {
            let mut w = ContainerWriter::create(&p, "x").unwrap();
            w.push("a", &NamedArray::f32(vec![1], vec![1.0]).unwrap())
                .unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}

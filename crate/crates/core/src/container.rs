//! The `LREL` tensor container shared by model checkpoints and relational
//! operator files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 4            | magic `LREL`                                         |
//! | 4            | format version, `u32`                                |
//! | 8            | header length `h`, `u64`                             |
//! | `h`          | UTF-8 JSON header: `kind`, `meta`, `tensors`         |
//! | rest         | each tensor in header order, row-major `f64`         |
//!
//! `tensors` lists `{name, rows, cols}`; the data section must hold exactly
//! the declared number of values.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LREL";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<f64>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: String| Error::Format(msg);
        if bytes.len() < 16 {
            return Err(fail(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail("missing LREL magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER || header_len > (bytes.len() - 16) as u64 {
            return Err(fail(format!("header length {header_len} exceeds file")));
        }
        let data_start = 16 + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| fail(format!("bad header: {e}")))?;

        let mut expected: usize = 0;
        for t in &header.tensors {
            let n = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| fail(format!("tensor {} is too large", t.name)))?;
            expected = expected
                .checked_add(n)
                .ok_or_else(|| fail("tensor sizes overflow".into()))?;
        }
        let data = &bytes[data_start..];
        if data.len() != expected {
            return Err(fail(format!(
                "data section holds {} bytes, header declares {expected}",
                data.len()
            )));
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut at = 0;
        for t in header.tensors {
            let n = t.rows * t.cols;
            let values: Vec<f64> = data[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            at += 8 * n;
            let arr = Array2::from_shape_vec((t.rows, t.cols), values).expect("checked size");
            tensors.push((t.name, arr));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes through a temporary sibling file and renames it into place, so a
/// reader never observes a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        c.push("w", array![[1.0, 2.0], [3.0, -0.5]]);
        c.push("b", array![[7.0, 8.0, 9.0]]);
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"LREL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + h + 7 * 8);
        // first value of the first tensor follows the header directly
        assert_eq!(f64::from_le_bytes(bytes[16 + h..24 + h].try_into().unwrap()), 1.0);
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 15, 20, bytes.len() - 1] {
            assert!(matches!(
                Container::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("x.lrel");
        sample().write(&path).unwrap();
        assert_eq!(Container::read(&path).unwrap(), sample());
        let names: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let arr = Array2::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap();
            let mut c = Container::new("p", serde_json::Value::Null);
            c.push("t", arr);
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = Container::from_bytes(&bytes);
        }
    }
}

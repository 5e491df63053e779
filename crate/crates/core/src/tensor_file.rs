//! `GLAT` binary tensor files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "GLAT" | version = 1 | ndim | dims[ndim] | dtype = 1 (f64) | payload
//! ```
//!
//! The payload is `8 * prod(dims)` bytes of little-endian `f64`, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{GlaError, Result};
use crate::tensor::{SeqTensor, State};

pub const MAGIC: [u8; 4] = *b"GLAT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> GlaError {
    GlaError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl TensorFile {
    pub fn new(dims: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        let n =
            element_count(&dims).ok_or_else(|| GlaError::InvalidConfig("tensor size overflows".into()))?;
        if n != data.len() {
            return Err(GlaError::shape("TensorFile::new", n, data.len()));
        }
        Ok(TensorFile { dims, data })
    }

    pub fn from_tensor(t: &SeqTensor) -> Self {
        TensorFile {
            dims: vec![t.rows() as u32, t.cols() as u32],
            data: t.as_slice().to_vec(),
        }
    }

    pub fn from_state(s: &State) -> Self {
        TensorFile {
            dims: vec![s.dk() as u32, s.dv() as u32],
            data: s.as_slice().to_vec(),
        }
    }

    /// Requires exactly two dimensions and finite data.
    pub fn to_tensor(&self) -> Result<SeqTensor> {
        match self.dims[..] {
            [r, c] => SeqTensor::new(r as usize, c as usize, self.data.clone()),
            _ => Err(GlaError::shape(
                "TensorFile::to_tensor",
                "2 dims",
                self.dims.len(),
            )),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F64.to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(format_err(path, "bad magic (expected GLAT)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let ndim = r.u32()? as usize;
        if ndim > (bytes.len() - r.pos) / 4 {
            return Err(format_err(path, format!("truncated header (ndim = {ndim})")));
        }
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let dtype = r.u32()?;
        if dtype != DTYPE_F64 {
            return Err(format_err(path, format!("unsupported dtype code {dtype}")));
        }
        let n = element_count(&dims).ok_or_else(|| format_err(path, "dims overflow"))?;
        let payload = &bytes[r.pos..];
        if Some(payload.len()) != n.checked_mul(8) {
            return Err(format_err(
                path,
                format!(
                    "payload is {} bytes, dims {dims:?} need {}",
                    payload.len(),
                    n.saturating_mul(8)
                ),
            ));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(TensorFile { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|source| GlaError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| GlaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        TensorFile::decode(&bytes, path)
    }
}

/// Reads a two-dimensional file as a `SeqTensor`, naming the file on error.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<SeqTensor> {
    let path = path.as_ref();
    TensorFile::read(path)?
        .to_tensor()
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &SeqTensor) -> Result<()> {
    TensorFile::from_tensor(t).write(path)
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("truncated header at byte {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Path helper used when a file lives in a directory keyed by tensor name.
pub fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.glat"))
}

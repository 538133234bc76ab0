//! AVF: a minimal little-endian container of named f32 tensors.
//!
//! Layout: `b"AVF1"`, version `u16`, tensor count `u16`, then per tensor a
//! `u16`-prefixed UTF-8 name, rank `u8`, `rank` dims as `u32`, and the
//! row-major `f32` payload. Values are `f64` in memory.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"AVF1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum AvfError {
    #[error("not an AVF file (bad magic)")]
    BadMagic,
    #[error("unsupported AVF version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: needed {needed} bytes at offset {offset}")]
    Truncated { needed: usize, offset: usize },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate tensor {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} not found")]
    MissingTensor(String),
    #[error("tensor {name:?}: {reason}")]
    Invalid { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, AvfError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| AvfError::Invalid {
            name: name.clone(),
            reason,
        };
        if name.len() > u16::MAX as usize {
            return Err(invalid("name longer than 65535 bytes".into()));
        }
        if dims.len() > u8::MAX as usize {
            return Err(invalid(format!("rank {} exceeds 255", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(invalid(format!("dims {dims:?} overflow u32")));
        }
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid(format!("dims {dims:?} overflow")))?;
        if expected != data.len() {
            return Err(invalid(format!(
                "dims {dims:?} hold {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !(x.abs() <= f32::MAX as f64)) {
            return Err(invalid(format!("value {x} is not representable as a finite f32")));
        }
        Ok(Self { name, dims, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Checks the rank and returns the dims.
    pub fn expect_rank(&self, rank: usize) -> Result<&[usize]> {
        if self.dims.len() == rank {
            Ok(&self.dims)
        } else {
            Err(AvfError::Invalid {
                name: self.name.clone(),
                reason: format!("expected rank {rank}, got dims {:?}", self.dims),
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AvfFile {
    tensors: Vec<Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(AvfError::Truncated {
                needed: n,
                offset: self.pos,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

impl AvfFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(tensor.name()).is_some() {
            return Err(AvfError::DuplicateName(tensor.name));
        }
        if self.tensors.len() == u16::MAX as usize {
            return Err(AvfError::Invalid {
                name: tensor.name,
                reason: "file already holds 65535 tensors".into(),
            });
        }
        self.tensors.push(tensor);
        Ok(())
    }

    /// Builder-style [`push`](Self::push) of a new tensor.
    pub fn with(mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        self.push(Tensor::new(name, dims, data)?)?;
        Ok(self)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| AvfError::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|t| 7 + t.name.len() + 4 * (t.dims.len() + t.data.len()))
            .sum();
        let mut out = Vec::with_capacity(8 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u16).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| AvfError::BadMagic)? != MAGIC {
            return Err(AvfError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(AvfError::UnsupportedVersion(version));
        }
        let count = r.u16()?;
        let mut file = AvfFile::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| AvfError::InvalidName)?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| AvfError::Invalid {
                    name: name.to_string(),
                    reason: format!("dims {dims:?} overflow"),
                })?;
            let data = r
                .take(count)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect();
            file.push(Tensor::new(name, dims, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(AvfError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes to a temporary file next to `path`, then renames it over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }
}

/// Replaces `path` with `bytes` so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

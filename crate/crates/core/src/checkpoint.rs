//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"M2DT" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank x u64 dims | f32 payload (row-major)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"M2DT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Stream(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor `{name}`: {len} values do not fill dims {dims:?}")]
    Payload {
        name: String,
        dims: Vec<u64>,
        len: usize,
    },
    #[error("tensor name `{0}` longer than 65535 bytes")]
    NameTooLong(String),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<u64>,
        expected: Vec<u64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Result<Self, CheckpointError> {
        let name = name.into();
        let expected: u64 = dims.iter().product();
        if expected as usize != data.len() {
            return Err(CheckpointError::Payload { name, dims, len: data.len() });
        }
        Ok(Tensor { name, dims, data })
    }

    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Tensor {
            name: name.into(),
            dims: Vec::new(),
            data: vec![value],
        }
    }
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &[Tensor]) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::NameTooLong(t.name.clone()))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[t.dims.len() as u8])?;
        for d in &t.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<Tensor>, CheckpointError> {
    let magic = read_array::<4, _>(&mut input)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32::from_le_bytes(read_array(&mut input)?);
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(&mut input)?) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let rank = read_array::<1, _>(&mut input)?[0] as usize;
        let dims = (0..rank)
            .map(|_| read_array::<8, _>(&mut input).map(u64::from_le_bytes))
            .collect::<io::Result<Vec<_>>>()?;
        let numel: u64 = dims.iter().product();
        let mut payload = vec![0u8; numel as usize * 4];
        input.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    fs::write(path, buf).map_err(io_err)
}

pub fn load(path: &Path) -> Result<Vec<Tensor>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    read_tensors(bytes.as_slice())
}

/// Looks up a tensor by name.
pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor, CheckpointError> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))
}

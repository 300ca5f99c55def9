//! LTNS binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LTNS" | version u8 = 0x01 | dtype u8 = 0x01 (f32) | ndim u8 | ndim x u32 dims | f32 data (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LTNS";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

#[derive(Debug, Error)]
pub enum LtnsError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("unsupported dtype {0:#04x}")]
    BadDtype(u8),
    #[error("truncated stream while reading {0}")]
    Truncated(&'static str),
    #[error("dimension product overflows: {0:?}")]
    Overflow(Vec<u32>),
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<u32>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(u64),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LtnsError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            LtnsError::BadMagic(_) => 1,
            LtnsError::BadVersion(_) => 2,
            LtnsError::BadDtype(_) => 3,
            LtnsError::Truncated(_) => 4,
            LtnsError::Overflow(_) => 5,
            LtnsError::InvalidShape(_) => 6,
            LtnsError::NonFinite(_) => 7,
            LtnsError::TrailingBytes(_) => 8,
            LtnsError::Io { .. } => 9,
        }
    }
}

pub fn header_len(ndim: usize) -> usize {
    7 + 4 * ndim
}

pub fn write_tensor<W: Write>(t: &Tensor<f32>, sink: &mut W) -> std::io::Result<()> {
    let shape = t.shape();
    let ndim = u8::try_from(shape.len()).map_err(|_| std::io::Error::other("tensor rank exceeds 255"))?;
    let mut header = Vec::with_capacity(header_len(shape.len()));
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&[VERSION, DTYPE_F32, ndim]);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    sink.write_all(&header)?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)
}

pub fn read_tensor<R: Read>(source: &mut R) -> Result<Tensor<f32>, LtnsError> {
    let mut fixed = [0u8; 7];
    read_exact(source, &mut fixed, "header")?;
    let magic = [fixed[0], fixed[1], fixed[2], fixed[3]];
    if magic != MAGIC {
        return Err(LtnsError::BadMagic(magic));
    }
    if fixed[4] != VERSION {
        return Err(LtnsError::BadVersion(fixed[4]));
    }
    if fixed[5] != DTYPE_F32 {
        return Err(LtnsError::BadDtype(fixed[5]));
    }
    let ndim = fixed[6] as usize;
    let mut dims_raw = vec![0u8; 4 * ndim];
    read_exact(source, &mut dims_raw, "dimensions")?;
    let dims: Vec<u32> = dims_raw.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if dims.is_empty() || dims.contains(&0) {
        return Err(LtnsError::InvalidShape(dims));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| LtnsError::Overflow(dims.clone()))?;

    // Read in bounded chunks so a corrupt header cannot force a huge allocation.
    let mut data = Vec::with_capacity(count.min(1 << 20));
    let mut chunk = vec![0u8; 4 * count.min(1 << 16)];
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(chunk.len() / 4);
        read_exact(source, &mut chunk[..4 * n], "payload")?;
        data.extend(chunk[..4 * n].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        remaining -= n;
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(LtnsError::NonFinite(pos));
    }
    let shape = dims.into_iter().map(|d| d as usize).collect();
    Ok(Tensor::from_parts_unchecked(shape, data))
}

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.shape().len()) + 4 * t.len());
    write_tensor(t, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Decodes a complete byte buffer; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, LtnsError> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(LtnsError::TrailingBytes(cursor.len() as u64));
    }
    Ok(t)
}

pub fn save(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<(), LtnsError> {
    let path = path.as_ref();
    let io_err = |source| LtnsError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_tensor(t, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>, LtnsError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| LtnsError::Io { path: path.display().to_string(), source })?;
    let mut r = BufReader::new(file);
    let t = read_tensor(&mut r)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|source| LtnsError::Io { path: path.display().to_string(), source })?;
    if !rest.is_empty() {
        return Err(LtnsError::TrailingBytes(rest.len() as u64));
    }
    Ok(t)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), LtnsError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => LtnsError::Truncated(what),
        _ => LtnsError::Io { path: "<stream>".into(), source: e },
    })
}

//! HCTF: a minimal binary container for one n-dimensional tensor.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4   magic "HCTF"
//! byte  4      format version, currently 1
//! byte  5      dtype: 0 = f32, 1 = f64
//! bytes 6..10  ndim as u32
//! then         ndim × u64 dimension extents
//! then         row-major payload, one f32 or f64 per element
//! ```
//!
//! In-memory tensors are always f64; f32 files are widened on read and a
//! writer may narrow to f32 for compactness.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"HCTF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HctfError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected \"HCTF\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}, expected {VERSION}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("header declares {declared} elements but payload holds {actual}")]
    Truncated { declared: u64, actual: u64 },
    #[error("tensor too large: {0} elements")]
    Overflow(u64),
    #[error("invalid dimensions: {0}")]
    BadDims(String),
}

pub type Result<T> = std::result::Result<T, HctfError>;

/// Serializes `t` with the given on-disk element type.
pub fn write<W: Write>(mut w: W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dtype.code()])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Deserializes one tensor, validating magic, version, dtype and length.
pub fn read<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(HctfError::BadMagic { found: magic });
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(HctfError::BadVersion(head[0]));
    }
    let dtype = Dtype::from_code(head[1]).ok_or(HctfError::BadDtype(head[1]))?;
    let mut ndim_bytes = [0u8; 4];
    r.read_exact(&mut ndim_bytes)?;
    let ndim = u32::from_le_bytes(ndim_bytes) as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: u64 = 1;
    for _ in 0..ndim {
        let mut db = [0u8; 8];
        r.read_exact(&mut db)?;
        let d = u64::from_le_bytes(db);
        numel = numel
            .checked_mul(d)
            .ok_or(HctfError::Overflow(u64::MAX))?;
        dims.push(d);
    }
    if numel > (1 << 32) {
        return Err(HctfError::Overflow(numel));
    }
    let elem_size = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != numel * elem_size {
        return Err(HctfError::Truncated {
            declared: numel,
            actual: payload.len() as u64 / elem_size,
        });
    }
    let mut data = Vec::with_capacity(numel as usize);
    match dtype {
        Dtype::F32 => {
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as Real);
            }
        }
        Dtype::F64 => {
            for chunk in payload.chunks_exact(8) {
                data.push(Real::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Tensor::from_vec(shape, data).map_err(|e| HctfError::BadDims(e.to_string()))
}

pub fn write_file<P: AsRef<Path>>(path: P, t: &Tensor, dtype: Dtype) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let f = File::open(path)?;
    read(BufReader::new(f))
}

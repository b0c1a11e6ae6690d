//! The "GCDT" on-disk tensor container.
//!
//! Layout: magic `GCDT` (4 bytes) | `u8` version = 1 | `u8` dtype
//! (0 = f32, 1 = f64) | `u8` rank | rank x `u64` little-endian dims |
//! row-major payload. Dataset blobs hold a single f32 `[N, C, H, W]`
//! tensor; checkpoints reuse the container with one f64 tensor per
//! parameter plus a JSON sidecar mapping names to byte offsets.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GCDT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            c => Err(Error::BadDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub dims: Vec<u64>,
    /// Always held as f64 in memory; narrowed on write when dtype is F32.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn f32(dims: Vec<u64>, data: Vec<f64>) -> Self {
        Tensor {
            dtype: Dtype::F32,
            dims,
            data,
        }
    }

    pub fn f64(dims: Vec<u64>, data: Vec<f64>) -> Self {
        Tensor {
            dtype: Dtype::F64,
            dims,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn checked_elem_count(dims: &[u64]) -> Result<u64> {
    let mut n: u64 = 1;
    for &d in dims {
        n = n.checked_mul(d).ok_or(Error::DimOverflow)?;
    }
    if n > (usize::MAX as u64) / 8 {
        return Err(Error::DimOverflow);
    }
    Ok(n)
}

/// Serialized byte length of a tensor record, header included.
pub fn record_len(t: &Tensor) -> u64 {
    4 + 1 + 1 + 1 + 8 * t.dims.len() as u64 + (t.data.len() * t.dtype.size()) as u64
}

pub fn write_tensor<W: Write + ?Sized>(w: &mut W, t: &Tensor) -> Result<()> {
    let n = checked_elem_count(&t.dims)?;
    if n != t.data.len() as u64 {
        return Err(Error::Invalid(format!(
            "tensor dims {:?} disagree with data length {}",
            t.dims,
            t.data.len()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.dtype as u8, t.dims.len() as u8])?;
    for &d in &t.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    match t.dtype {
        Dtype::F32 => {
            for &x in &t.data {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut head = [0u8; 3];
    read_exact_or(r, &mut head, "header")?;
    let [version, dtype_code, rank] = head;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = Dtype::from_code(dtype_code)?;
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact_or(r, &mut b, "dims")?;
        dims.push(u64::from_le_bytes(b));
    }
    let n = checked_elem_count(&dims)?;
    let want_bytes = n * dtype.size() as u64;
    let mut payload = vec![0u8; want_bytes as usize];
    match r.read_exact(&mut payload) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(Error::Truncated {
                wanted: want_bytes,
                got: 0,
            });
        }
        Err(e) => return Err(e.into()),
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor { dtype, dims, data })
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                wanted: buf.len() as u64,
                got: 0,
            }
        } else {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("reading {what}: {e}"),
            ))
        }
    })
}

/// Writes bytes to `path` atomically: a temp file in the same directory is
/// renamed over the target, so aborts never leave partial artifacts.
pub fn write_file_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write(&mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn round_trip_f32_and_f64() {
        for dtype in [Dtype::F32, Dtype::F64] {
            let t = Tensor {
                dtype,
                dims: vec![2, 3],
                data: vec![0.0, 0.5, -1.25, 3.0, 4.5, -6.0],
            };
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut Cursor::new(&buf)).unwrap();
            assert_eq!(back, t);
        }
    }

    #[test]
    fn bad_magic_is_distinct() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::f32(vec![1], vec![1.0])).unwrap();
        buf[0] = b'X';
        match read_tensor(&mut Cursor::new(&buf)) {
            Err(Error::BadMagic) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_distinct() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::f32(vec![4], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        buf.truncate(buf.len() - 3);
        match read_tensor(&mut Cursor::new(&buf)) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn dim_overflow_is_distinct() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&[VERSION, 0, 2]);
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        buf.extend_from_slice(&u64::MAX.to_le_bytes());
        match read_tensor(&mut Cursor::new(&buf)) {
            Err(Error::DimOverflow) => {}
            other => panic!("expected DimOverflow, got {other:?}"),
        }
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let vals = vec![std::f64::consts::PI, 1.0 / 3.0, -0.0, 1e-300];
        let t = Tensor::f64(vec![4], vals.clone());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut Cursor::new(&buf)).unwrap();
        for (a, b) in back.data.iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

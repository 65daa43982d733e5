//! Dense row-major tensors and the shared binary tensor-record format.
//!
//! The on-disk layout is fixed regardless of the in-memory scalar type:
//! dims are 64-bit little-endian, payloads are 32-bit little-endian floats.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{Read, Write};

pub const TENSOR_FILE_MAGIC: &[u8; 6] = b"SNTF1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor::new",
                msg: format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == S::zero() || v == S::one())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != S::zero()).count()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy precision conversion (files are always f32 on disk).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of_f64(v.as_f64())).collect(),
        }
    }
}

// --- binary record IO -------------------------------------------------

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes rank, dims (u64 LE) and the payload as f32 LE.
pub fn write_tensor_record<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    write_u64(w, t.shape.len() as u64)?;
    for &d in &t.shape {
        write_u64(w, d as u64)?;
    }
    let mut buf = Vec::with_capacity(t.data.len() * 4);
    for &v in &t.data {
        buf.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_record<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let rank = read_u64(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| S::of_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_named_record<S: Scalar, W: Write>(w: &mut W, name: &str, t: &Tensor<S>) -> Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_tensor_record(w, t)
}

pub fn read_named_record<S: Scalar, R: Read>(r: &mut R) -> Result<(String, Tensor<S>)> {
    let len = read_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let name = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
    let t = read_tensor_record(r)?;
    Ok((name, t))
}

/// Standalone tensor file: magic + one record.
pub fn save_tensor<S: Scalar>(path: &std::path::Path, t: &Tensor<S>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(TENSOR_FILE_MAGIC)?;
    write_tensor_record(&mut w, t)?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: &std::path::Path) -> Result<Tensor<S>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_FILE_MAGIC {
        return Err(Error::Format(format!("{}: bad tensor file magic", path.display())));
    }
    read_tensor_record(&mut r)
}

//! N-dimensional row-major tensors and the raw "XSPT" tensor file format.
//!
//! XSPT layout: magic "XSPT", u16 version (little-endian), u8 dtype tag
//! (0 = f32, 1 = f64), u8 rank, rank u64 little-endian dims, then the
//! row-major payload as little-endian IEEE-754 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const XSPT_MAGIC: &[u8; 4] = b"XSPT";
pub const XSPT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stack single-channel images into a [C, H, W] tensor.
    pub fn stack_channels(channels: &[Image]) -> Result<Tensor> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidInput("no channels to stack".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(channels.len() * h * w);
        for ch in channels {
            if ch.height != h || ch.width != w {
                return Err(Error::ShapeMismatch("channel shapes differ".into()));
            }
            data.extend_from_slice(&ch.data);
        }
        Ok(Tensor {
            shape: vec![channels.len(), h, w],
            data,
        })
    }

    /// View channel `c` of a [C, H, W] tensor as a slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }
}

pub fn write_tensor(t: &Tensor, dtype: DType, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(XSPT_MAGIC)?;
    w.write_all(&XSPT_VERSION.to_le_bytes())?;
    w.write_all(&[match dtype {
        DType::F32 => 0u8,
        DType::F64 => 1u8,
    }])?;
    w.write_all(&[t.shape.len() as u8])?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        DType::F32 => {
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != XSPT_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != XSPT_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let mut tag = [0u8; 2];
    r.read_exact(&mut tag)?;
    let dtype = match tag[0] {
        0 => DType::F32,
        1 => DType::F64,
        t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
    };
    let rank = tag[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim)?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F32 => {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated tensor payload".into()))?;
            for c in buf.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        DType::F64 => {
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("truncated tensor payload".into()))?;
            for c in buf.chunks_exact(8) {
                data.push(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]));
            }
        }
    }
    Tensor::from_data(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xspt_round_trip_f64() {
        let t = Tensor::from_data(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
        let dir = std::env::temp_dir().join("xspec_xspt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.xspt");
        write_tensor(&t, DType::F64, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn xspt_rejects_truncation() {
        let t = Tensor::zeros(&[4, 4]);
        let dir = std::env::temp_dir().join("xspec_xspt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.xspt");
        write_tensor(&t, DType::F64, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(read_tensor(&path).is_err());
    }
}

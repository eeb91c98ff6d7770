//! 2-D real-valued images and binary PGM (P5) I/O.
//!
//! PGM samples are mapped linearly to [0,1] on read: v / maxval. Writing
//! quantizes to 16-bit big-endian samples with maxval 65535.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 2-D image of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        Image {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape images.
    pub fn zip(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn read_pgm_token(reader: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        let n = reader.read(&mut byte)?;
        if n == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of PGM header".into()));
            }
            return Ok(tok);
        }
        let ch = byte[0] as char;
        if in_comment {
            if ch == '\n' {
                in_comment = false;
            }
            continue;
        }
        if ch == '#' {
            in_comment = true;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(ch);
    }
}

/// Read a binary PGM (P5). Samples are scaled to [0,1] by the header maxval.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let magic = read_pgm_token(&mut reader)?;
    if magic != "P5" {
        return Err(Error::Format(format!("not a P5 PGM: magic {magic:?}")));
    }
    let width: usize = read_pgm_token(&mut reader)?
        .parse()
        .map_err(|_| Error::Format("bad PGM width".into()))?;
    let height: usize = read_pgm_token(&mut reader)?
        .parse()
        .map_err(|_| Error::Format("bad PGM height".into()))?;
    let maxval: u32 = read_pgm_token(&mut reader)?
        .parse()
        .map_err(|_| Error::Format("bad PGM maxval".into()))?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    let n = width * height;
    let mut data = Vec::with_capacity(n);
    if maxval < 256 {
        let mut buf = vec![0u8; n];
        reader.read_exact(&mut buf)?;
        for b in buf {
            data.push(b as f64 / maxval as f64);
        }
    } else {
        // 16-bit samples, big-endian per the PGM standard
        let mut buf = vec![0u8; 2 * n];
        reader.read_exact(&mut buf)?;
        for pair in buf.chunks_exact(2) {
            let v = u16::from_be_bytes([pair[0], pair[1]]);
            data.push(v as f64 / maxval as f64);
        }
    }
    Ok(Image {
        height,
        width,
        data,
    })
}

/// Write a 16-bit binary PGM. Values are clamped to [0,1] before quantization.
pub fn write_pgm(img: &Image, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "P5\n{} {}\n65535\n", img.width, img.height)?;
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

//! Dense f32 tensors and the `TNSR` binary file format.
//!
//! Layout on disk, all little-endian:
//!
//! ```text
//! b"TNSR" | ndim: u32 | dims: ndim x u32 | data: prod(dims) x f32
//! ```
//!
//! Data is row-major with the last dimension fastest.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::graph::TensorShape;

pub const MAGIC: &[u8; 4] = b"TNSR";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: TensorShape,
    data: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a TNSR file (bad magic)")]
    BadMagic,
    #[error("tensor data has {got} elements, shape {shape} needs {want}")]
    LengthMismatch { shape: TensorShape, want: usize, got: usize },
    #[error("bad tensor header: {0}")]
    BadHeader(String),
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Result<Tensor, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                want: shape.numel(),
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Tensor {
        let data = vec![0.0; shape.numel()];
        Tensor { shape, data }
    }

    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize) -> f32) -> Tensor {
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &TensorShape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(C, H, W)` view; panics on non-spatial tensors.
    pub fn chw(&self) -> (usize, usize, usize) {
        self.shape
            .as_chw()
            .unwrap_or_else(|| panic!("expected a (C,H,W) tensor, got {}", self.shape))
    }

    /// Channel `c` of a `(C, H, W)` tensor.
    pub fn channel(&self, c: usize) -> &[f32] {
        let (_, h, w) = self.chw();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims().len() as u32).to_le_bytes())?;
        for &d in self.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(mut r: impl Read) -> Result<Tensor, TensorError> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if &word != MAGIC {
            return Err(TensorError::BadMagic);
        }
        r.read_exact(&mut word)?;
        let ndim = u32::from_le_bytes(word) as usize;
        if ndim == 0 || ndim > 8 {
            return Err(TensorError::BadHeader(format!("ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut word)?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let shape = TensorShape::new(dims).map_err(|e| TensorError::BadHeader(e.to_string()))?;
        let mut bytes = vec![0u8; shape.numel() * 4];
        r.read_exact(&mut bytes)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(TensorError::BadHeader(format!("{} trailing bytes", rest.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
        let bytes = fs::read(path)?;
        Tensor::read_from(bytes.as_slice())
    }
}

//! Dense row-major float tensors and the binary tensor file format.
//!
//! The file layout is:
//!
//! ```text
//! bytes 0-3:  magic "SAAK"
//! bytes 4-5:  version, u16 little-endian (currently 1)
//! byte  6:    dtype code (1 = f32 little-endian)
//! byte  7:    ndim
//! then:       ndim dims as u32 little-endian
//! then:       product(dims) f32 values, row-major, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SaakError};

const MAGIC: &[u8; 4] = b"SAAK";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

/// Dense row-major tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(SaakError::Domain(format!(
                "tensor data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                expected
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of `[n, i, j, k]` in a rank-4 tensor.
    #[inline]
    pub fn offset4(&self, n: usize, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.dims[1] + i) * self.dims[2] + j) * self.dims[3] + k
    }

    #[inline]
    pub fn get4(&self, n: usize, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.offset4(n, i, j, k)]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, i: usize, j: usize, k: usize, v: f32) {
        let o = self.offset4(n, i, j, k);
        self.data[o] = v;
    }

    /// Write in the tensor file format. Bit-exact round trip with [`Tensor::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(SaakError::Domain("tensor rank exceeds 255".into()));
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[DTYPE_F32, self.dims.len() as u8])?;
        for &d in &self.dims {
            if d > u32::MAX as usize {
                return Err(SaakError::Domain("tensor dim exceeds u32".into()));
            }
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 8];
        r.read_exact(&mut head).map_err(|e| {
            SaakError::Format(format!("{}: tensor header truncated: {}", path.display(), e))
        })?;
        if &head[0..4] != MAGIC {
            return Err(SaakError::Format(format!(
                "{}: bad magic {:?}, expected \"SAAK\"",
                path.display(),
                &head[0..4]
            )));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(SaakError::Format(format!(
                "{}: unsupported tensor file version {}",
                path.display(),
                version
            )));
        }
        if head[6] != DTYPE_F32 {
            return Err(SaakError::Format(format!(
                "{}: unsupported dtype code {}",
                path.display(),
                head[6]
            )));
        }
        let ndim = head[7] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        // no trailing bytes allowed
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(SaakError::Format(format!(
                "{}: trailing bytes after payload",
                path.display()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(dims, data)
    }
}

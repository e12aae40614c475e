//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SGMA" | version: u32 | dtype: u8 (0 = f32, 1 = f64) | rank: u8 | dims: rank x u64 | row-major payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGMA";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            dtype: DType::F64,
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_vec(v: &[f64]) -> Self {
        Self {
            dtype: DType::F64,
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn into_array2(self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: "rank 2".into(),
                actual: format!("rank {}", self.shape.len()),
            });
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data)
            .map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn into_arrayd(self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let elem = if self.dtype == DType::F32 { 4 } else { 8 };
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + elem * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self.data.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            DType::F64 => self.data.iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if r.len() < n {
                return Err("truncated tensor".into());
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dtype = DType::from_tag(take(1)?[0]).ok_or("unknown dtype tag")?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        if !r.is_empty() {
            return Err("trailing bytes after payload".into());
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Tensor::decode(&bytes).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

pub fn write_matrix(path: &Path, a: &Array2<f64>) -> Result<()> {
    Tensor::from_array2(a).write(path)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    Tensor::read(path)?.into_array2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor {
            dtype: DType::F32,
            shape: vec![2, 1],
            data: vec![1.0, -2.0],
        };
        let b = t.encode();
        assert_eq!(&b[..4], b"SGMA");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..30], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn rejects_corrupt() {
        assert!(Tensor::decode(b"NOPE").is_err());
        let mut b = Tensor::from_vec(&[1.0]).encode();
        b.pop();
        assert!(Tensor::decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn f64_roundtrip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 * 0.37 - 100.0).collect();
            let t = Tensor { dtype: DType::F64, shape: vec![rows, cols], data };
            prop_assert_eq!(Tensor::decode(&t.encode()).unwrap(), t);
        }
    }
}

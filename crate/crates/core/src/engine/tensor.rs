use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("tensor dims {dims:?} must be positive")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidInput(format!(
                "tensor dims {dims:?} need {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(dims);
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        let i = t.index(n, c, y, x);
                        t.data[i] = f(n, c, y, x);
                    }
                }
            }
        }
        t
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One `H×W` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let s = self.dims[2] * self.dims[3];
        let i = self.index(n, c, 0, 0);
        &self.data[i..i + s]
    }

    /// Channels `range` of every batch item.
    pub fn channels(&self, range: std::ops::Range<usize>) -> Self {
        let [n, _, h, w] = self.dims;
        let mut data = Vec::with_capacity(n * range.len() * h * w);
        for b in 0..n {
            for c in range.clone() {
                data.extend_from_slice(self.plane(b, c));
            }
        }
        Self { dims: [n, range.len(), h, w], data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims, data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect() }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 4],
    dtype: String,
    order: String,
}

/// Paths of the header and blob for a tensor file stem.
pub fn tensor_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

impl<T: Scalar> Tensor<T> {
    /// Write `<stem>.json` (header) and `<stem>.bin` (little-endian f32).
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let (hp, bp) = tensor_paths(stem);
        let header = Header { dims: self.dims, dtype: "f32".into(), order: "NCHW".into() };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        std::fs::write(&hp, text + "\n").map_err(|e| Error::io(&hp, e))?;
        let mut blob = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        Ok((hp, bp))
    }

    /// Load from a header path or a stem; the blob sits next to the header.
    pub fn load(path: &Path) -> Result<Self> {
        let (hp, bp) = tensor_paths(path);
        let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| Error::json(hp.display().to_string(), e))?;
        if header.dtype != "f32" || header.order != "NCHW" {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported dtype/order {}/{}",
                hp.display(),
                header.dtype,
                header.order
            )));
        }
        let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        if blob.len() % 4 != 0 {
            return Err(Error::InvalidInput(format!("{}: truncated blob", bp.display())));
        }
        let data = blob
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Self::from_vec(header.dims, data)
    }
}

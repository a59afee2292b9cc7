//! Dense row-major `f64` tensors.
//!
//! Complex arrays use paired real planes: a complex array of logical shape
//! `[.., H, W]` is stored as a real array of shape `[.., 2, H, W]` with the
//! real plane first and the imaginary plane second. All arithmetic and every
//! gradient is taken over that real representation.

mod io;

pub use io::{read_dclt, read_dclt_from, write_dclt, write_dclt_to, DCLT_MAGIC, DCLT_VERSION};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    Real64,
    /// Pair of real planes, see module docs.
    Complex64Pair,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::Real64 => 0,
            DType::Complex64Pair => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Real64),
            1 => Ok(DType::Complex64Pair),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            dtype: DType::Real64,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            dtype: DType::Real64,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            dtype: DType::Real64,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            dtype: DType::Real64,
        }
    }

    /// Builds a complex tensor from separate real and imaginary planes of
    /// identical logical shape (rank ≥ 2).
    pub fn complex_from_planes(logical_shape: &[usize], re: &[f64], im: &[f64]) -> Result<Self> {
        if logical_shape.len() < 2 {
            return Err(Error::invalid("complex tensors need rank >= 2"));
        }
        let n = numel(logical_shape);
        if re.len() != n || im.len() != n {
            return Err(Error::invalid(
                "plane lengths do not match the logical shape",
            ));
        }
        let storage = complex_storage_shape(logical_shape);
        let plane = logical_shape[logical_shape.len() - 2] * logical_shape[logical_shape.len() - 1];
        let outer = n / plane.max(1);
        let mut data = Vec::with_capacity(2 * n);
        for o in 0..outer {
            data.extend_from_slice(&re[o * plane..(o + 1) * plane]);
            data.extend_from_slice(&im[o * plane..(o + 1) * plane]);
        }
        Ok(Tensor {
            shape: storage,
            data,
            dtype: DType::Complex64Pair,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Tags the tensor as complex; the storage shape must carry the plane axis.
    pub fn into_complex(mut self) -> Result<Self> {
        if self.rank() < 3 || self.shape[self.rank() - 3] != 2 {
            return Err(Error::invalid(format!(
                "shape {:?} has no (re, im) plane axis at position -3",
                self.shape
            )));
        }
        self.dtype = DType::Complex64Pair;
        Ok(self)
    }

    pub fn into_real(mut self) -> Self {
        self.dtype = DType::Real64;
        self
    }

    pub(crate) fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    /// Logical shape: the storage shape for real tensors, the storage shape
    /// without the plane axis for complex ones.
    pub fn logical_shape(&self) -> Vec<usize> {
        match self.dtype {
            DType::Real64 => self.shape.clone(),
            DType::Complex64Pair => {
                let mut s = self.shape.clone();
                s.remove(s.len() - 3);
                s
            }
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            dtype: self.dtype,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            dtype: self.dtype,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects index `i` along axis 0, dropping that axis.
    pub fn index0(&self, i: usize) -> Result<Tensor> {
        if self.rank() == 0 || i >= self.shape[0] {
            return Err(Error::invalid(format!(
                "index {i} out of range for shape {:?}",
                self.shape
            )));
        }
        let inner = numel(&self.shape[1..]);
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
            dtype: self.dtype,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor {
            shape,
            data,
            dtype: first.dtype,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }
}

/// Storage shape for a complex array of the given logical shape.
pub fn complex_storage_shape(logical: &[usize]) -> Vec<usize> {
    let mut s = logical.to_vec();
    let at = s.len().saturating_sub(2);
    s.insert(at, 2);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn complex_planes_layout() {
        let t =
            Tensor::complex_from_planes(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0])
                .unwrap();
        assert_eq!(t.shape(), &[2, 2, 1, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        assert_eq!(t.logical_shape(), vec![2, 1, 2]);
        assert_eq!(t.dtype(), DType::Complex64Pair);
    }

    #[test]
    fn into_complex_requires_plane_axis() {
        assert!(Tensor::zeros(&[3, 4, 4]).into_complex().is_err());
        assert!(Tensor::zeros(&[2, 4, 4]).into_complex().is_ok());
    }

    #[test]
    fn stack_and_index_roundtrip() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index0(1).unwrap(), b);
    }
}

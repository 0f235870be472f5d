//! Dense row-major n-dimensional tensors.
//!
//! This is deliberately minimal: a shape vector plus a flat `Vec` of scalars.
//! Tensors are plain values — the differentiation tape stores them per node —
//! and every shipped operation keeps entries finite on finite inputs.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

/// Errors from shape-sensitive tensor constructors and combinators.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("data length {data_len} does not match shape {shape:?} (product {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        data_len: usize,
        expected: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Mismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("matmul needs [m,k]·[k,n]; got {lhs:?} and {rhs:?}")]
    MatMul { lhs: Vec<usize>, rhs: Vec<usize> },
}

/// Dense row-major tensor of [`Scalar`]s.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Build from an explicit shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ShapeError::LengthMismatch {
                shape,
                data_len: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0/rank-1 scalar wrapper (`shape = [1]`).
    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Consume into the flat data vector.
    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, ShapeError> {
        Self::from_vec(shape.to_vec(), self.data.clone())
    }

    /// Row-major flat index of a multi-index (panics on rank mismatch).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&x, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(
                x < dim,
                "index {x} out of bounds for axis {i} (extent {dim})"
            );
            flat = flat * dim + x;
        }
        flat
    }

    /// Value at a multi-index.
    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.flat_index(idx)]
    }

    /// Mutable value at a multi-index.
    pub fn at_mut(&mut self, idx: &[usize]) -> &mut S {
        let flat = self.flat_index(idx);
        &mut self.data[flat]
    }

    /// Elementwise combine two same-shape tensors.
    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self, ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::Mismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    /// In-place `self += scale * other` (shapes must match).
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
    }

    /// Matrix product of `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, ShapeError> {
        let (a, b) = (&self.shape, &rhs.shape);
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(ShapeError::MatMul {
                lhs: a.clone(),
                rhs: b.clone(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let lhs_ip = self.data[i * k + p];
                if lhs_ip == S::zero() {
                    continue;
                }
                let row = &rhs.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &r) in dst.iter_mut().zip(row) {
                    *d = *d + lhs_ip * r;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// True iff every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all entries (index order).
    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    /// Convert every entry through `f64` into another precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0f64; 6]).is_ok());
        let err = Tensor::from_vec(vec![2, 3], vec![0.0f64; 5]).unwrap_err();
        assert!(matches!(err, ShapeError::LengthMismatch { .. }));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = Tensor::from_vec(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(ShapeError::MatMul { .. })));
    }

    #[test]
    fn cast_roundtrips_f32_values() {
        let t = Tensor::from_vec(vec![3], vec![0.5f32, -1.25, 3.0]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}

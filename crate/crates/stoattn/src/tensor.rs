//! Dense row-major tensor value type.
//!
//! `Tensor` is the plain (shape, data) substrate: immutable in spirit,
//! cheap to clone at desk scale, and safely shareable across threads.
//! Gradient tracking lives in [`crate::tape`], which records operations on
//! node ids and stores per-node gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major flat storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, validating `len(data) == product(shape)` and that
    /// every value is finite. NaN/Inf is an error state, never silent.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::param("shape", format!("zero dimension in {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::contract(
                "Tensor::new",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// 0-arity scalar, stored with shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows (test and oracle convenience).
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("Tensor::from_rows", "ragged or empty rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.ndim(), 2);
        self.data[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        debug_assert_eq!(self.ndim(), 2);
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { what: what.to_string() })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("sub", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> T {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(T::zero(), |acc, v| acc + v)
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Plain 2-D matrix product (no gradient tracking).
    pub fn matmul2(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.cols() != other.rows() {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(&self.data, &other.data, m, k, n, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Plain 2-D transpose.
    pub fn transpose2(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::contract("transpose", "expects a 2-D tensor"));
        }
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Plain temperature softmax along `axis` (no gradient tracking).
    pub fn softmax(&self, axis: usize, temperature: T) -> Result<Self> {
        if temperature <= T::zero() {
            return Err(Error::param("temperature", "must be > 0"));
        }
        if axis >= self.ndim() {
            return Err(Error::param(
                "axis",
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        let (outer, len, inner) = axis_lanes(&self.shape, axis);
        let mut out = vec![T::zero(); self.data.len()];
        softmax_kernel(&self.data, &mut out, outer, len, inner, temperature);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// Decompose a shape around `axis` into (outer, len, inner) lane counts.
pub(crate) fn axis_lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// out[m×n] = a[m×k] · b[k×n], cache-friendly ikj order.
pub(crate) fn matmul_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    out.fill(T::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Temperature softmax along a lane decomposition, with max-subtraction
/// applied after the temperature division for stability at large inputs.
pub(crate) fn softmax_kernel<T: Scalar>(
    input: &[T],
    out: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
    temperature: T,
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for l in 0..len {
                let v = input[base + l * inner] / temperature;
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (input[base + l * inner] / temperature - max).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..len {
                out[base + l * inner] = out[base + l * inner] / sum;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("data length"));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0f64, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = a.matmul2(&eye).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_unit_row_selection() {
        let a = Tensor::from_rows(&[vec![1.0f64, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0f64], vec![5.0]]).unwrap();
        let out = a.matmul2(&b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let msg = a.matmul2(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let s = x.softmax(0, 1.0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_analytic_two_thirds() {
        // [ln 4, 0] at temperature 2: exp(ln4/2) = 2 against exp(0) = 1.
        let x = Tensor::new(vec![2], vec![4.0f64.ln(), 0.0]).unwrap();
        let s = x.softmax(0, 2.0).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::<f64>::zeros(vec![3]);
        assert!(x.softmax(0, 0.0).is_err());
        assert!(x.softmax(0, -1.0).is_err());
    }

    #[test]
    fn softmax_stable_at_large_magnitude() {
        let x = Tensor::new(vec![3], vec![1e3f64, -1e3, 0.0]).unwrap();
        let s = x.softmax(0, 1.0).unwrap();
        let sum: f64 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_middle_axis() {
        // shape [2, 2, 2], softmax over axis 1: lanes stride over the middle dim.
        let x = Tensor::new(
            vec![2, 2, 2],
            vec![0.0f64, 1.0, 0.0, 2.0, 3.0, 0.0, 3.0, 4.0],
        )
        .unwrap();
        let s = x.softmax(1, 1.0).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let sum = s.data()[o * 4 + i] + s.data()[o * 4 + 2 + i];
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::from_rows(&[vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = a.transpose2().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.get2(0, 1), 4.0);
        assert_eq!(t.transpose2().unwrap(), a);
    }
}

//! Dense row-major arrays of 64-bit reals plus the handful of raw kernels
//! (matrix products, reductions) the tape dispatches to.

use crate::error::{Error, Result};

/// A dense, row-major array of `f64` values.
///
/// Scalars are arrays of shape `[1]`, vectors `[n]`, matrices `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.is_empty() {
            return Err(Error::Contract(format!(
                "shape {:?} requires {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// True when the array holds exactly one value, regardless of rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Single value of a scalar array.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "item() on non-scalar array of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Rows of a matrix; vectors count as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix; vectors are one row wide.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dims("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Standard matrix product (2-D operands only).
    pub fn matmul(&self, other: &DenseArray) -> Result<DenseArray> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::dims("matmul expects matrices", &self.shape, &other.shape));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dims("matmul inner extents", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&mut out, &self.data, &other.data, m, k, n);
        DenseArray::new(vec![m, n], out)
    }

    /// Element-wise `self += other` (equal shapes).
    pub fn add_assign(&mut self, other: &DenseArray) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }
}

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]` (row-major, contiguous).
pub(crate) fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]` -> `[m,n]`.
pub(crate) fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            orow[j] += acc;
        }
    }
}

/// `out += a^T @ b` with `a: [k,m]`, `b: [k,n]` -> `[m,n]`.
pub(crate) fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

use std::fmt;

use super::{NumericsError, Real};

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `n × m` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(NumericsError::RaggedRows);
        }
        Tensor::new(vec![n, m], rows.concat())
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, NumericsError> {
        Tensor::new(shape, data.iter().map(|&x| T::c(x)).collect())
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a matrix view. Rank-1 tensors are treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::c(x.to_f64().unwrap())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, m) = other.dims2("matmul")?;
        if k != k2 {
            return Err(NumericsError::dimension("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_nn(&self.data, &other.data, &mut out, n, k, m);
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor<T>, NumericsError> {
        let (n, m) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor<T> {
        let m = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [n, m] => Ok((*n, *m)),
            _ => Err(NumericsError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = (*x / sum).flush();
    }
}

/// `out += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// `out += a[k×n]ᵀ · b[k×m]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let b_row = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == T::zero() {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

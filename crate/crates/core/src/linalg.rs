//! Column-major dense matrices and the handful of BLAS-style kernels the
//! network needs. Storage order matches the `vec`/`mat` convention used
//! throughout the crate: element `(r, c)` lives at `r + c * rows`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r + c * self.rows]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r + c * self.rows] = v;
    }

    pub fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    /// Reinterpret the same column-major storage with new dimensions
    /// (`mat(vec(M))` with a different shape).
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        Matrix::from_vec(rows, cols, self.data)
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }
}

/// Borrowed column-major matrix, typically a weight block inside θ.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(MatRef { rows, cols, data })
    }

    fn nd(&self) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols).f(), self.data)
            .expect("MatRef dimensions are validated on construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c ← alpha·op(a)·op(b) + beta·c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f64,
    a: MatRef<'_>,
    ta: Trans,
    b: MatRef<'_>,
    tb: Trans,
    beta: f64,
    c: &mut [f64],
    c_rows: usize,
    c_cols: usize,
) -> Result<()> {
    let av = a.nd();
    let bv = b.nd();
    let av = if ta == Trans::Yes { av.reversed_axes() } else { av };
    let bv = if tb == Trans::Yes { bv.reversed_axes() } else { bv };
    if av.ncols() != bv.nrows() || av.nrows() != c_rows || bv.ncols() != c_cols {
        return Err(Error::dim(format!(
            "gemm: ({}x{})·({}x{}) into {c_rows}x{c_cols}",
            av.nrows(),
            av.ncols(),
            bv.nrows(),
            bv.ncols()
        )));
    }
    if c.len() != c_rows * c_cols {
        return Err(Error::dim("gemm: output buffer length"));
    }
    let mut cv = ArrayViewMut2::from_shape((c_rows, c_cols).f(), c)
        .map_err(|e| Error::dim(e.to_string()))?;
    general_mat_mul(alpha, &av, &bv, beta, &mut cv);
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y ← y + alpha·x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

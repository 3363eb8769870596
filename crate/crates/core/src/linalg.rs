//! Minimal dense linear algebra: row-major `f64` matrices plus the handful
//! of kernels everything else is built on (matmul, column softmax, relu,
//! spectral norm via power iteration).
//!
//! Vectors are matrices with one column. No BLAS, no sparsity; the point is
//! to stay small enough that every operation can be cross-checked against a
//! naive oracle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Immutable after construction except through the explicit in-place
/// mutators (`set`, `apply`, `add_assign`, ...), so shared read-only use
/// across threads is safe.
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build from a row-major data vector; `data.len()` must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column_vector(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place elementwise update.
    pub fn apply(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("hadamard", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn column_norm(&self, c: usize) -> f64 {
        (0..self.rows)
            .map(|r| {
                let v = self.get(r, c);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

/// Standard matrix product. Accumulates each output entry over the shared
/// dimension in ascending order, which keeps results reproducible bit for
/// bit across runs.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    debug_assert!(out.is_finite());
    Ok(out)
}

/// Column-wise softmax with max-subtraction. Each column of the result sums
/// to 1 (within 1e-12) and every entry lies in (0, 1).
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for c in 0..logits.cols {
        let mut max = f64::NEG_INFINITY;
        for r in 0..logits.rows {
            max = max.max(logits.get(r, c));
        }
        let mut sum = 0.0;
        for r in 0..logits.rows {
            let e = (logits.get(r, c) - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for r in 0..logits.rows {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    debug_assert!(out.is_finite());
    out
}

/// Elementwise max(0, x).
pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub const SPECTRAL_NORM_ITERS: usize = 1000;
pub const SPECTRAL_NORM_TOL: f64 = 1e-10;

/// Largest singular value by power iteration on AᵀA, with a deterministic
/// seeded start vector. Returns 0 for the zero matrix.
pub fn spectral_norm(a: &Matrix, iters: usize, tol: f64) -> f64 {
    spectral_norm_seeded(a, iters, tol, 0x5eed)
}

pub fn spectral_norm_seeded(a: &Matrix, iters: usize, tol: f64, seed: u64) -> f64 {
    assert!(iters >= 1, "spectral_norm requires iters >= 1");
    if a.data.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..a.cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);

    let mut sigma = 0.0;
    for _ in 0..iters {
        // w = Av, u = Aᵀw computed without forming AᵀA.
        let w = mat_vec(a, &v);
        let mut u = mat_t_vec(a, &w);
        let prev = sigma;
        sigma = norm(&w);
        let un = norm(&u);
        if un == 0.0 {
            // v landed in the null space; restart from a fresh direction.
            v = (0..a.cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize(&mut v);
            continue;
        }
        normalize(&mut u);
        v = u;
        if (sigma - prev).abs() < tol {
            break;
        }
    }
    sigma
}

fn mat_vec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows)
        .map(|r| a.row(r).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn mat_t_vec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols];
    for r in 0..a.rows {
        for (o, &x) in out.iter_mut().zip(a.row(r)) {
            *o += x * v[r];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

//! Dense row-major vectors and matrices in double precision.
//!
//! A weight matrix row is one output channel, so per-channel operations work on
//! contiguous slices returned by [`Matrix::row`].

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite real-valued vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Vector(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Vector(data)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "dot of vectors with lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(&self.0, &other.0))
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// A finite real-valued matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "row {bad} has {} columns, expected {cols}",
                rows[bad].len()
            )));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    /// Replaces one row. Values must be finite and match the column count.
    pub fn set_row(&mut self, row: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.cols {
            return Err(Error::Shape(format!(
                "row of length {} for a matrix with {} columns",
                values.len(),
                self.cols
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix row"));
        }
        self.data[row * self.cols..(row + 1) * self.cols].copy_from_slice(values);
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|v| v * k).collect())
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..rhs.cols {
                    out[i * rhs.cols + j] += a * rhs.get(k, j);
                }
            }
        }
        Matrix::new(self.rows, rhs.cols, out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `m · x`.
pub fn matvec(m: &Matrix, x: &Vector) -> Result<Vector> {
    if x.len() != m.cols {
        return Err(Error::Shape(format!(
            "{}x{} matrix applied to vector of length {}",
            m.rows,
            m.cols,
            x.len()
        )));
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(m, x.as_slice(), &mut out);
    Ok(Vector::from_vec_unchecked(out))
}

/// Unchecked kernel behind [`matvec`]; `x.len() == m.cols()` and
/// `out.len() == m.rows()` are the caller's responsibility.
pub(crate) fn matvec_into(m: &Matrix, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols.max(1))) {
        *o = dot(row, x);
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    m.frobenius_norm_sq()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_matvec() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = matvec(&m, &Vector::new(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn hand_matvec() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = matvec(&m, &Vector::new(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 5, 4);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = matvec(&m, &Vector::new(x.clone()).unwrap()).unwrap();
        for i in 0..5 {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += m.as_slice()[i * 4 + j] * xj;
            }
            assert!((y[i] - acc).abs() <= 1e-15 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn matvec_rejects_mismatch() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(
            matvec(&m, &Vector::zeros(2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn norms() {
        assert_eq!(Vector::zeros(3).l2_norm(), 0.0);
        assert_eq!(Vector::new(vec![3.0, 4.0]).unwrap().l2_norm(), 5.0);
        assert_eq!(Matrix::zeros(3, 2).frobenius_norm_sq(), 0.0);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(frobenius_norm_sq(&m), 30.0);
    }

    #[test]
    fn norm_squared_is_self_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Vector::new((0..17).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let n = x.l2_norm();
        let d = x.dot(&x).unwrap();
        assert!((n * n - d).abs() <= 1e-12 * d);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn matvec_is_linear(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 6, 7);
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();
            let lhs = matvec(&m, &Vector::new(combo).unwrap()).unwrap();
            let mx = matvec(&m, &Vector::new(x).unwrap()).unwrap();
            let my = matvec(&m, &Vector::new(y).unwrap()).unwrap();
            for i in 0..6 {
                let rhs = a * mx[i] + b * my[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
            }
        }

        #[test]
        fn frobenius_equals_trace_of_gram(seed in any::<u64>(), rows in 1usize..=32, cols in 1usize..=32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, rows, cols);
            let gram = m.transpose().matmul(&m).unwrap();
            let f = m.frobenius_norm_sq();
            prop_assert!((f - gram.trace()).abs() <= 1e-10 * f.max(1e-300));
        }
    }
}

//! Minimal dense row-major matrix and vector helpers.
//!
//! Everything the model and losses need is a handful of matmul variants and
//! stable reductions, so this stays hand-rolled rather than pulling in a
//! tensor crate; the gradient code in [`crate::model`] relies on exact control
//! over every operation.

use serde::{Deserialize, Serialize};

use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * other`, (m x k)(k x n) -> m x n.
    pub fn matmul(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == S::zero() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(r);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`, (m x k)(n x k)^T -> m x n.
    pub fn matmul_nt(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.cols, other.cols, "matmul_nt shape");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a_row = self.row(r);
            for n in 0..other.rows {
                out.set(r, n, dot(a_row, other.row(n)));
            }
        }
        out
    }

    /// `self^T * other`, (k x m)^T (k x n) -> m x n.
    pub fn matmul_tn(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.rows, other.rows, "matmul_tn shape");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for m in 0..self.cols {
                let a = a_row[m];
                if a == S::zero() {
                    continue;
                }
                let out_row = out.row_mut(m);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix<S>, scale: S) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == S::zero())
    }

    /// Euclidean norm of column `c`.
    pub fn col_norm(&self, c: usize) -> S {
        let mut acc = S::zero();
        for r in 0..self.rows {
            let v = self.get(r, c);
            acc += v * v;
        }
        acc.sqrt()
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn l2_norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Numerically stable softmax; the result is renormalized so it sums to one
/// up to a final rounding error.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    assert!(!logits.is_empty(), "softmax of empty slice");
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: S = out.iter().cloned().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Index of the maximum entry; ties resolve to the lowest index so decoding
/// stays deterministic.
pub fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean of a set of equal-length rows.
pub fn mean_rows<S: Scalar>(rows: &[&[S]]) -> Vec<S> {
    assert!(!rows.is_empty());
    let dim = rows[0].len();
    let mut out = vec![S::zero(); dim];
    for row in rows {
        for (o, &v) in out.iter_mut().zip(*row) {
            *o += v;
        }
    }
    let inv = cast::<S>(1.0) / cast::<S>(rows.len() as f64);
    for o in &mut out {
        *o *= inv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = Matrix::from_rows(vec![vec![7.0, 8.0], vec![9.0, 10.0]]);
        let ab = a.matmul(&b);
        assert_eq!(ab.row(0), &[25.0, 28.0]);
        // a * b == a * (b^T)^T
        let bt = Matrix::from_rows(vec![vec![7.0, 9.0], vec![8.0, 10.0]]);
        let ab2 = a.matmul_nt(&bt);
        assert_eq!(ab.data(), ab2.data());
        // (a^T)^T * b via matmul_tn on the transpose
        let at = Matrix::from_rows(vec![vec![1.0, 3.0, 5.0], vec![2.0, 4.0, 6.0]]);
        let ab3 = at.matmul_tn(&b);
        assert_eq!(ab.data(), ab3.data());
    }

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let p = softmax(&[1.0f64, 2.0, 3.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn works_for_f32_too() {
        let a: Matrix<f32> = Matrix::from_fn(2, 2, |r, c| (r + c) as f32);
        assert_eq!(a.matmul(&a).get(1, 1), 5.0);
    }
}

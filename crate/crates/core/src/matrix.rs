//! Small dense matrices for the Laplace oracles.
//!
//! Everything here runs on matrices of at most a few dozen entries; LU with
//! partial pivoting and cyclic Jacobi are plenty at that size.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is singular or near-singular (1-norm condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("matrix is exactly singular")]
    Singular,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, S::one());
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Result<Self, MatrixError> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(MatrixError::Dimension("ragged rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix<S> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix<S>) -> Result<Matrix<S>, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::Dimension(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    let v = out.get(i, j) + a * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix<S>) -> Result<Matrix<S>, MatrixError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MatrixError::Dimension("sub of unequal shapes".into()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, factor: S) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| factor * v).collect(),
        }
    }

    /// `(M + M^T) / 2`.
    pub fn symmetrized(&self) -> Matrix<S> {
        let half = S::from_f64(0.5);
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            half * (self.get(i, j) + self.get(j, i))
        })
    }

    pub fn max_abs_asymmetry(&self) -> S {
        let mut worst = S::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = (self.get(i, j) - self.get(j, i)).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// `y = M x` for a vector `x`.
    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// `x^T M y`.
    pub fn quadratic_form(&self, x: &[S], y: &[S]) -> S {
        let my = self.matvec(y);
        x.iter().zip(&my).map(|(&a, &b)| a * b).sum()
    }

    /// Max absolute column sum.
    pub fn norm_one(&self) -> S {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j).abs()).sum())
            .fold(S::zero(), S::max)
    }

    fn lu(&self) -> Result<Lu<S>, MatrixError> {
        assert!(self.is_square());
        let n = self.rows;
        let mut lu = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = S::one();
        for col in 0..n {
            let mut pivot = col;
            let mut best = lu[col * n + col].abs();
            for row in col + 1..n {
                let v = lu[row * n + col].abs();
                if v > best {
                    best = v;
                    pivot = row;
                }
            }
            if best == S::zero() {
                return Err(MatrixError::Singular);
            }
            if pivot != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot * n + j);
                }
                perm.swap(col, pivot);
                sign = -sign;
            }
            let diag = lu[col * n + col];
            for row in col + 1..n {
                let factor = lu[row * n + col] / diag;
                lu[row * n + col] = factor;
                for j in col + 1..n {
                    let v = lu[row * n + j] - factor * lu[col * n + j];
                    lu[row * n + j] = v;
                }
            }
        }
        Ok(Lu {
            n,
            lu,
            perm,
            sign,
        })
    }

    /// Solve `M x = b`.
    pub fn solve(&self, b: &[S]) -> Result<Vec<S>, MatrixError> {
        self.lu()?.solve(b)
    }

    pub fn inverse(&self) -> Result<Matrix<S>, MatrixError> {
        let lu = self.lu()?;
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        let mut unit = vec![S::zero(); n];
        for j in 0..n {
            unit[j] = S::one();
            let col = lu.solve(&unit)?;
            unit[j] = S::zero();
            for i in 0..n {
                out.set(i, j, col[i]);
            }
        }
        Ok(out)
    }

    pub fn determinant(&self) -> Result<S, MatrixError> {
        let lu = match self.lu() {
            Ok(lu) => lu,
            Err(MatrixError::Singular) => return Ok(S::zero()),
            Err(e) => return Err(e),
        };
        let mut det = lu.sign;
        for i in 0..lu.n {
            det = det * lu.lu[i * lu.n + i];
        }
        Ok(det)
    }

    /// `log |det M|`.
    pub fn log_abs_determinant(&self) -> Result<S, MatrixError> {
        let lu = self.lu()?;
        let mut acc = S::zero();
        for i in 0..lu.n {
            acc = acc + lu.lu[i * lu.n + i].abs().ln();
        }
        Ok(acc)
    }

    /// 1-norm condition estimate `|M|_1 |M^-1|_1`.
    pub fn condition_estimate(&self) -> Result<S, MatrixError> {
        let inv = self.inverse()?;
        Ok(self.norm_one() * inv.norm_one())
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
    /// ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<S> {
        assert!(self.is_square());
        let n = self.rows;
        let mut a = self.clone();
        let tol = S::from_f64(1e-14);
        for _sweep in 0..100 {
            let mut off = S::zero();
            for i in 0..n {
                for j in i + 1..n {
                    off = off + a.get(i, j).abs();
                }
            }
            if off <= tol {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a.get(p, q);
                    if apq.abs() <= tol * S::from_f64(1e-2) {
                        continue;
                    }
                    let app = a.get(p, p);
                    let aqq = a.get(q, q);
                    let theta = S::from_f64(0.5) * (apq + apq).atan2(aqq - app);
                    let (s, c) = theta.sin_cos();
                    for k in 0..n {
                        let akp = a.get(k, p);
                        let akq = a.get(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                    }
                    for k in 0..n {
                        let apk = a.get(p, k);
                        let aqk = a.get(q, k);
                        a.set(p, k, c * apk - s * aqk);
                        a.set(q, k, s * apk + c * aqk);
                    }
                }
            }
        }
        let mut eigs: Vec<S> = (0..n).map(|i| a.get(i, i)).collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        eigs
    }
}

struct Lu<S> {
    n: usize,
    lu: Vec<S>,
    perm: Vec<usize>,
    sign: S,
}

impl<S: Scalar> Lu<S> {
    fn solve(&self, b: &[S]) -> Result<Vec<S>, MatrixError> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<S> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc = acc - self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc = acc - self.lu[i * n + j] * x[j];
            }
            let diag = self.lu[i * n + i];
            if diag == S::zero() {
                return Err(MatrixError::Singular);
            }
            x[i] = acc / diag;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: Vec<Vec<f64>>) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn solve_and_inverse_agree_with_hand_computation() {
        let a = m(vec![vec![4.0, 1.0], vec![1.0, 3.0]]);
        let x = a.solve(&[1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);

        let inv = a.inverse().unwrap();
        let prod = a.matmul(&inv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinant_signs_and_log_det() {
        let a = m(vec![vec![0.0, 2.0], vec![3.0, 0.0]]);
        assert!((a.determinant().unwrap() + 6.0).abs() < 1e-12);
        assert!((a.log_abs_determinant().unwrap() - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_detected() {
        let a = m(vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert_eq!(a.determinant().unwrap(), 0.0);
        assert!(a.inverse().is_err());
    }

    #[test]
    fn symmetric_eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = m(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let eigs = a.symmetric_eigenvalues();
        assert!((eigs[0] - 1.0).abs() < 1e-10);
        assert!((eigs[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn jacobi_handles_diagonal_input() {
        let a = m(vec![vec![5.0, 0.0], vec![0.0, -2.0]]);
        let eigs = a.symmetric_eigenvalues();
        assert_eq!(eigs, vec![-2.0, 5.0]);
    }

    #[test]
    fn condition_estimate_grows_with_near_singularity() {
        let well = m(vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        let ill = m(vec![vec![1.0, 1.0], vec![1.0, 1.0 + 1e-10]]);
        assert!(well.condition_estimate().unwrap() < 10.0);
        assert!(ill.condition_estimate().unwrap() > 1e9);
    }

    #[test]
    fn quadratic_form_matches_expansion() {
        let a = m(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let x = [1.0, -1.0];
        let y = [2.0, 0.5];
        // x^T A y = 1*(1*2+2*0.5) - 1*(3*2+4*0.5).
        assert!((a.quadratic_form(&x, &y) - (3.0 - 8.0)).abs() < 1e-12);
    }
}

//! Dense `f64` linear algebra for the whitening and analysis paths:
//! symmetric eigendecomposition by cyclic Jacobi rotations and the PSD
//! matrix square roots built on it.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("matrix rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", &[self.cols], &[other.rows]));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self[(i, p)];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[p * other.cols..(p + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape("matvec", &[self.cols], &[v.len()]));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("sub", &[self.rows, self.cols], &[other.rows, other.cols]));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("add", &[self.rows, self.cols], &[other.rows, other.cols]));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|a| a * a).sum())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Largest `|m_ij - m_ji|`; infinite for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(m + m^T) / 2`
    pub fn symmetrized(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvector
/// columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEigResult {
    /// `V f(diag(lambda)) V^T`, symmetrized.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mapped: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, m) in mapped.iter().enumerate() {
                    s += v[(i, k)] * m * v[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Elementwise symmetry tolerance, relative to the entry magnitude once it
/// exceeds one.
pub const SYMMETRY_TOL: f64 = 1e-9;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

fn check_symmetric(m: &Matrix) -> Result<()> {
    if m.rows != m.cols {
        return Err(Error::shape("sym_eig", &[m.rows, m.rows], &[m.rows, m.cols]));
    }
    if !m.is_finite() {
        return Err(Error::non_finite("sym_eig input"));
    }
    let mut worst: f64 = 0.0;
    let mut violated = false;
    for i in 0..m.rows {
        for j in i + 1..m.cols {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            let diff = (a - b).abs();
            worst = worst.max(diff);
            if diff > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                violated = true;
            }
        }
    }
    if violated {
        return Err(Error::NotSymmetric(worst));
    }
    Ok(())
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows {
        for j in 0..a.cols {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    libm::sqrt(s)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps run in fixed `(p, q)` order until the off-diagonal Frobenius norm
/// drops below 1e-12 or 100 sweeps have run. Eigenvectors are normalized so
/// that their largest-magnitude component is positive, which makes the
/// output deterministic up to exactly repeated eigenvalues.
pub fn sym_eig(m: &Matrix) -> Result<SymEigResult> {
    check_symmetric(m)?;
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) < OFF_DIAGONAL_TOL {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[(p, p)], a[(q, q)]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + libm::sqrt(theta * theta + 1.0))
                };
                let cos = 1.0 / libm::sqrt(t * t + 1.0);
                let sin = t * cos;
                let tau = sin / (1.0 + cos);

                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    let new_rp = arp - sin * (arq + tau * arp);
                    let new_rq = arq + sin * (arp - tau * arq);
                    a[(r, p)] = new_rp;
                    a[(p, r)] = new_rp;
                    a[(r, q)] = new_rq;
                    a[(q, r)] = new_rq;
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = vrp - sin * (vrq + tau * vrp);
                    v[(r, q)] = vrq + sin * (vrp - tau * vrq);
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for r in 0..n {
            if v[(r, src)].abs() > v[(pivot, src)].abs() {
                pivot = r;
            }
        }
        let sign = if v[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[(r, k)] = sign * v[(r, src)];
        }
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// `V diag(max(lambda, floor))^{-1/2} V^T` for a symmetric PSD matrix.
pub fn psd_inv_sqrt(m: &Matrix, floor: f64) -> Result<Matrix> {
    if !(floor > 0.0) {
        return Err(Error::Contract("eigenvalue floor must be positive".into()));
    }
    let eig = sym_eig(m)?;
    Ok(eig.reconstruct_with(|l| 1.0 / libm::sqrt(l.max(floor))))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (numerical noise) are clamped to zero.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    Ok(eig.reconstruct_with(|l| libm::sqrt(l.max(0.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.uniform(-10.0, 10.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    fn close(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius()
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_axis_aligned() {
        let e = sym_eig(&Matrix::diag(&[9.0, 4.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![4.0, 9.0]);
        assert_eq!(e.eigenvectors[(1, 0)].abs(), 1.0);
        assert_eq!(e.eigenvectors[(0, 1)].abs(), 1.0);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        for (n, seed) in [(8, 1), (17, 2), (64, 3)] {
            let m = random_symmetric(n, seed);
            let e = sym_eig(&m).unwrap();
            assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            let rec = e.reconstruct_with(|l| l);
            assert!(close(&rec, &m) < 1e-10, "n={n}: {}", close(&rec, &m));
            let v = &e.eigenvectors;
            let vtv = v.transpose().matmul(v).unwrap();
            assert!(close(&vtv, &Matrix::identity(n)) < 1e-10);
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let m = random_symmetric(12, 9);
        assert_eq!(sym_eig(&m).unwrap(), sym_eig(&m).unwrap());
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let mut m = Matrix::identity(3);
        m[(0, 2)] = 1e-6;
        assert!(matches!(sym_eig(&m), Err(Error::NotSymmetric(_))));
        m[(0, 2)] = 1e-12;
        assert!(sym_eig(&m).is_ok());
    }

    #[test]
    fn inverse_square_root_examples() {
        let out = psd_inv_sqrt(&Matrix::identity(4), 1e-6).unwrap();
        assert!(close(&out, &Matrix::identity(4)) < 1e-15);
        let out = psd_inv_sqrt(&Matrix::diag(&[4.0, 0.25]), 1e-6).unwrap();
        assert!(close(&out, &Matrix::diag(&[0.5, 2.0])) < 1e-15);
        let out = psd_inv_sqrt(&Matrix::diag(&[1.0, 1e-12]), 1e-6).unwrap();
        assert!(close(&out, &Matrix::diag(&[1.0, 1e3])) < 1e-9);
    }

    #[test]
    fn square_root_examples() {
        let out = psd_sqrt(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(close(&out, &Matrix::diag(&[2.0, 3.0])) < 1e-15);
        let out = psd_sqrt(&Matrix::identity(5)).unwrap();
        assert!(close(&out, &Matrix::identity(5)) < 1e-15);
    }

    #[test]
    fn random_psd_square_root_squares_back() {
        let mut rng = Rng::new(77);
        let b = Matrix::from_vec(6, 6, (0..36).map(|_| rng.normal()).collect()).unwrap();
        let psd = b.matmul(&b.transpose()).unwrap();
        let s = psd_sqrt(&psd).unwrap();
        assert!(s.asymmetry() == 0.0);
        assert!(close(&s.matmul(&s).unwrap(), &psd) < 1e-9);
    }

    #[test]
    fn inverse_square_root_whitens() {
        let mut rng = Rng::new(5);
        let b = Matrix::from_vec(7, 7, (0..49).map(|_| rng.normal()).collect()).unwrap();
        let m = b.matmul(&b.transpose()).unwrap().add(&Matrix::identity(7)).unwrap();
        let w = psd_inv_sqrt(&m, 1e-6).unwrap();
        let i = w.matmul(&m).unwrap().matmul(&w).unwrap();
        assert!(close(&i, &Matrix::identity(7)) < 1e-8);
    }
}

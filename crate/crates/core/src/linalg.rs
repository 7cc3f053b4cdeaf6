//! Small dense row-major matrices.
//!
//! Products go through `matrixmultiply`; the symmetric eigensolver is a
//! cyclic Jacobi sweep, adequate for the K x K systems (K <= 10) solved
//! during multiclass bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawMatrix"))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
#[derive(serde::Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[cfg(feature = "serde")]
impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Self::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch { expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        let mut out = Self::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `self^T x`.
    pub fn mat_t_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate().take(self.rows) {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm(alpha: f64, a: &Matrix, ta: Trans, b: &Matrix, tb: Trans, beta: f64, c: &mut Matrix) {
    let shape_c = (c.rows, c.cols);
    gemm_slices(alpha, &a.data, (a.rows, a.cols), ta, &b.data, (b.rows, b.cols), tb, beta, &mut c.data, shape_c);
}

/// [`gemm`] on raw row-major buffers with explicit `(rows, cols)` shapes.
#[allow(clippy::too_many_arguments)]
pub fn gemm_slices(
    alpha: f64,
    a: &[f64],
    shape_a: (usize, usize),
    ta: Trans,
    b: &[f64],
    shape_b: (usize, usize),
    tb: Trans,
    beta: f64,
    c: &mut [f64],
    shape_c: (usize, usize),
) {
    let (m, k) = match ta {
        Trans::No => shape_a,
        Trans::Yes => (shape_a.1, shape_a.0),
    };
    let (kb, n) = match tb {
        Trans::No => shape_b,
        Trans::Yes => (shape_b.1, shape_b.0),
    };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(shape_c, (m, n), "output shape differs");
    assert_eq!(a.len(), shape_a.0 * shape_a.1);
    assert_eq!(b.len(), shape_b.0 * shape_b.1);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = match ta {
        Trans::No => (shape_a.1 as isize, 1),
        Trans::Yes => (1, shape_a.1 as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (shape_b.1 as isize, 1),
        Trans::Yes => (1, shape_b.1 as isize),
    };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the buffer lengths and shapes were checked above, so every
    // element reached through these strides lies inside its buffer, and `c`
    // is uniquely borrowed.
    #[allow(unsafe_code)]
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `op(a) * op(b)` as a fresh matrix.
pub fn matmul(a: &Matrix, ta: Trans, b: &Matrix, tb: Trans) -> Matrix {
    let m = if ta == Trans::No { a.rows } else { a.cols };
    let n = if tb == Trans::No { b.cols } else { b.rows };
    let mut c = Matrix::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (unsorted) and eigenvectors as the columns of the
/// second matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::ShapeMismatch { expected: n, got: a.cols });
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[(i, i)]).collect();
    Ok((eig, v))
}

/// Singular values of `a`, via the eigenvalues of `a^T a`.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    let ata = matmul(a, Trans::Yes, a, Trans::No);
    let (eig, _) = symmetric_eigen(&ata)?;
    Ok(eig.into_iter().map(|l| math::sqrt(l.max(0.0))).collect())
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn least_squares(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows {
        return Err(Error::ShapeMismatch { expected: a.rows, got: b.len() });
    }
    let ata = matmul(a, Trans::Yes, a, Trans::No);
    let atb = a.mat_t_vec(b);
    let (eig, vecs) = symmetric_eigen(&ata)?;
    let max_eig = eig.iter().copied().fold(0.0, f64::max);
    let cutoff = max_eig * 1e-24;
    let n = a.cols;
    let mut x = vec![0.0; n];
    for (idx, lambda) in eig.iter().enumerate() {
        if *lambda <= cutoff {
            continue;
        }
        let proj: f64 = (0..n).map(|r| vecs[(r, idx)] * atb[r]).sum();
        for r in 0..n {
            x[r] += vecs[(r, idx)] * proj / lambda;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    c[(i, j)] += a[(i, k)] * b[(k, j)];
                }
            }
        }
        c
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = sample(5, 3, 1);
        let b = sample(3, 4, 2);
        let expect = naive(&a, &b);
        let got = matmul(&a, Trans::No, &b, Trans::No);
        let got_t = matmul(&a.transpose(), Trans::Yes, &b.transpose(), Trans::Yes);
        for (x, y) in expect.as_slice().iter().zip(got.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in expect.as_slice().iter().zip(got_t.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn eigen_reconstructs() {
        let a = sample(4, 4, 7);
        let s = matmul(&a, Trans::Yes, &a, Trans::No);
        let (eig, v) = symmetric_eigen(&s).unwrap();
        for i in 0..4 {
            let col: Vec<f64> = (0..4).map(|r| v[(r, i)]).collect();
            let sv = s.mat_vec(&col);
            for r in 0..4 {
                assert!((sv[r] - eig[i] * col[r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn least_squares_solves_square_system() {
        let a = Matrix::from_rows(&[vec![0.625, 0.375], vec![0.375, 0.625]]).unwrap();
        let x = least_squares(&a, &[0.6, 0.4]).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-13);
        assert!((x[1] - 0.1).abs() < 1e-13);
    }

    #[test]
    fn singular_values_of_rank_one() {
        let a = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let mut sv = singular_values(&a).unwrap();
        sv.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(sv[0] < 1e-12);
        assert!((sv[1] - 1.0).abs() < 1e-12);
    }
}

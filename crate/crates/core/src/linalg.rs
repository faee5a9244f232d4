//! Small dense `f64` linear algebra for the latent space: the matrices here
//! are at most D×D with D in the single digits, so everything is direct.

use std::fmt;

use crate::error::{Error, Result};

/// Jitter added to the diagonal, tried in order, when a factorization fails.
pub const JITTER_LADDER: [f64; 3] = [0.0, 1e-8, 1e-6];

/// Inputs whose asymmetry exceeds this (relative to their largest entry) are rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_DIAGONAL_TOLERANCE: f64 = 1e-10;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("matrix", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} · {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self[(i, p)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(p, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(
                "mat_vec",
                format!("{}x{} · {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᵀ · v`
    pub fn tr_mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape(
                "tr_mat_vec",
                format!("({}x{})ᵀ · {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * x;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape("add", "operand shapes differ"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ) / 2`
    pub fn symmetrized(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                let v = 0.5 * (self[(r, c)] + self[(c, r)]);
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Lower-triangular factor with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Matrix,
    jitter: f64,
}

impl Cholesky {
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.factor.rows
    }

    /// True when every pivot is strictly positive.
    pub fn is_positive_definite(&self) -> bool {
        (0..self.dim()).all(|i| self.factor[(i, i)] > 0.0)
    }

    /// `ln det(A + jitter·I)`.
    pub fn log_det(&self) -> f64 {
        (0..self.dim())
            .map(|i| 2.0 * self.factor[(i, i)].ln())
            .sum()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.factor;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.factor;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= l[(j, i)] * x[j];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.fill(0.0);
            e[c] = 1.0;
            let x = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = x[r];
            }
        }
        inv.symmetrized()
    }

    /// `L⁻¹`, lower triangular.
    pub fn lower_inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.fill(0.0);
            e[c] = 1.0;
            let x = self.solve_lower(&e);
            for r in 0..n {
                inv[(r, c)] = x[r];
            }
        }
        inv
    }

    /// `L · v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..=i).map(|j| self.factor[(i, j)] * v[j]).sum())
            .collect()
    }
}

fn check_square_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::shape(
            "cholesky",
            format!("{}x{} is not square", a.rows, a.cols),
        ));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("cholesky input".into()));
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE * a.max_abs().max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    Ok(())
}

/// Plain Cholesky of `a + jitter·I`, reading the lower triangle. With
/// `semidefinite`, a pivot that vanishes together with the rest of its
/// column yields a zero column instead of failing.
fn factorize(a: &Matrix, jitter: f64, semidefinite: bool) -> Option<Matrix> {
    let n = a.rows;
    let scale = (0..n)
        .fold(0.0f64, |m, i| m.max(a[(i, i)].abs()))
        .max(f64::MIN_POSITIVE);
    let zero_tol = 1e-14 * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if d > zero_tol || (!semidefinite && d > 0.0) {
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                l[(i, j)] = s / ljj;
            }
        } else if semidefinite && d.abs() <= zero_tol {
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                if s.abs() > zero_tol.sqrt() * scale.sqrt() {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    l.is_finite().then_some(l)
}

/// Cholesky factor of a symmetric positive-definite matrix, escalating the
/// diagonal jitter through [`JITTER_LADDER`] until every pivot is positive.
pub fn cholesky(a: &Matrix) -> Result<Cholesky> {
    check_square_symmetric(a)?;
    for &jitter in &JITTER_LADDER {
        if let Some(factor) = factorize(a, jitter, false) {
            return Ok(Cholesky { factor, jitter });
        }
    }
    Err(Error::SingularCovariance {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// Like [`cholesky`] but accepts positive semidefinite input: exactly
/// degenerate directions produce zero columns in the factor. Used for
/// sampling, where a zero covariance must give back the mean.
pub fn cholesky_psd(a: &Matrix) -> Result<Cholesky> {
    check_square_symmetric(a)?;
    for &jitter in &JITTER_LADDER {
        if let Some(factor) = factorize(a, jitter, true) {
            return Ok(Cholesky { factor, jitter });
        }
    }
    Err(Error::SingularCovariance {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Column `i` pairs with `values[i]`; orthonormal, each column's
    /// largest-magnitude entry is positive.
    pub vectors: Matrix,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigensolver. Sweeps until the largest off-diagonal entry
/// drops below 1e-10 (relative to the Frobenius norm) or 100 sweeps.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    check_square_symmetric(a)?;
    let n = a.rows;
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let norm = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_OFF_DIAGONAL_TOLERANCE * norm;

    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        let mut off: f64 = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[(p, q)].abs());
            }
        }
        if off <= threshold {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                m[(p, p)] -= t * apq;
                m[(q, q)] += t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = m[(r, p)];
                    let arq = m[(r, q)];
                    m[(r, p)] = c * arp - s * arq;
                    m[(p, r)] = m[(r, p)];
                    m[(r, q)] = s * arp + c * arq;
                    m[(q, r)] = m[(r, q)];
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }

    // stable sort keeps original index order among equal eigenvalues
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |(bi, bv), (i, &x)| {
                if x.abs() > bv {
                    (i, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, x) in col.into_iter().enumerate() {
            vectors[(r, dst)] = x;
        }
    }
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let c = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(c.factor(), &Matrix::identity(3));
        assert_eq!(c.jitter(), 0.0);

        let a = Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 9.0]]).unwrap();
        let c = cholesky(&a).unwrap();
        assert_eq!(c.factor(), &Matrix::diagonal(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_reconstructs_gram_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..7 {
            let b = random_matrix(n + 2, n, &mut rng);
            let a = b.transpose().matmul(&b).unwrap();
            let c = cholesky(&a).unwrap();
            let l = c.factor();
            let rebuilt = l.matmul(&l.transpose()).unwrap();
            assert!(rebuilt.max_abs_diff(&a) <= 1e-5, "n={n}");
            for i in 0..n {
                for j in (i + 1)..n {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn cholesky_escalates_jitter_for_singular_input() {
        // rank one: [[1,1],[1,1]]
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let c = cholesky(&a).unwrap();
        assert!(c.jitter() > 0.0);
        let l = c.factor();
        let rebuilt = l.matmul(&l.transpose()).unwrap();
        let target = a.add(&Matrix::identity(2).scale(c.jitter())).unwrap();
        assert!(rebuilt.max_abs_diff(&target) < 1e-12);
    }

    #[test]
    fn cholesky_fails_on_indefinite() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]).unwrap();
        assert!(matches!(
            cholesky(&a),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::Asymmetric(_))));
    }

    #[test]
    fn psd_cholesky_of_zero_is_zero() {
        let c = cholesky_psd(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(c.jitter(), 0.0);
        assert_eq!(c.factor(), &Matrix::zeros(3, 3));
        assert!(!c.is_positive_definite());
    }

    #[test]
    fn solve_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_matrix(6, 4, &mut rng);
        let a = b.transpose().matmul(&b).unwrap();
        let c = cholesky(&a).unwrap();
        let inv = c.inverse();
        let prod = a.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(4)) < 1e-9);
        let linv = c.lower_inverse();
        assert!(
            linv.matmul(c.factor())
                .unwrap()
                .max_abs_diff(&Matrix::identity(4))
                < 1e-12
        );
    }

    #[test]
    fn eigen_diagonal() {
        let e = symmetric_eigen(&Matrix::diagonal(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert_eq!(
            e.vectors,
            Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap()
        );
    }

    #[test]
    fn eigen_classic_two_by_two() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let e = symmetric_eigen(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[(0, 0)] - h).abs() < 1e-12);
        assert!((e.vectors[(1, 0)] - h).abs() < 1e-12);
    }

    #[test]
    fn eigen_residuals_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = random_matrix(6, 6, &mut rng);
            let a = b.add(&b.transpose()).unwrap();
            let e = symmetric_eigen(&a).unwrap();
            let scale = a.max_abs();
            for i in 0..6 {
                let v = e.vectors.column(i);
                let av = a.mat_vec(&v).unwrap();
                let resid = av
                    .iter()
                    .zip(&v)
                    .map(|(x, y)| (x - e.values[i] * y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(resid <= 1e-5 * scale, "residual {resid}");
            }
            let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
            assert!(vtv.max_abs_diff(&Matrix::identity(6)) < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn eigen_ties_keep_index_order() {
        let e = symmetric_eigen(&Matrix::identity(3)).unwrap();
        assert_eq!(e.vectors, Matrix::identity(3));
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(symmetric_eigen(&a), Err(Error::Asymmetric(_))));
    }
}

//! Dense row-major matrices and the handful of matrix functions the
//! networks need: skew-symmetric construction, the matrix exponential and
//! its adjoint derivative, and a PCA eigendecomposition.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
///
/// Arithmetic helpers panic on shape mismatch; the checked entry points
/// (`expm`, `expm_vjp`, `skew_from_vector`, ...) return `Error` instead.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
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
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols} = {}",
                data.len(),
                rows * cols
            )));
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1))
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column slice out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Vertical concatenation: the rows of `self`, then those of `other`.
    pub fn concat_rows(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "concat_rows: column count mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn concat_cols(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "concat_cols: row count mismatch");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, m) = (self.rows, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_nt: {}x{} · ({}x{})ᵀ",
            self.rows, self.cols, other.rows, other.cols
        );
        Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.rows, other.rows,
            "matmul_tn: ({}x{})ᵀ · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, m) = (self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `row` (length `cols`) to every row.
    pub fn add_row(&self, row: &[f64]) -> Matrix {
        assert_eq!(row.len(), self.cols, "add_row: width mismatch");
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(row) {
                *o += b;
            }
        }
        out
    }

    /// Subtracts `row` from every row.
    pub fn sub_row(&self, row: &[f64]) -> Matrix {
        assert_eq!(row.len(), self.cols, "sub_row: width mismatch");
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(row) {
                *o -= b;
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise op: shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        let n = self.rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean distance between two equal-length vectors.
#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Number of free parameters of an `n`-dimensional skew-symmetric matrix.
pub fn skew_len(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Index pairs `(i, j)`, `i < j`, in the order entries of a skew parameter
/// vector are laid out: row-major over the strict upper triangle.
pub fn skew_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// Builds the skew-symmetric matrix `[v]×`.
///
/// Entry `v[k]` belongs to the k-th pair `(i, j)` of [`skew_pairs`] and is
/// placed as `S[j][i] = v[k]`, `S[i][j] = -v[k]`. In two dimensions this
/// gives `[[0, -θ], [θ, 0]]`, whose exponential is the counter-clockwise
/// rotation by θ.
pub fn skew_from_vector(v: &[f64], n: usize) -> Result<Matrix> {
    if v.len() != skew_len(n) {
        return Err(Error::invalid(format!(
            "skew vector has length {}, expected n(n-1)/2 = {} for n = {n}",
            v.len(),
            skew_len(n)
        )));
    }
    let mut s = Matrix::zeros(n, n);
    for (&value, (i, j)) in v.iter().zip(skew_pairs(n)) {
        s.set(j, i, value);
        s.set(i, j, -value);
    }
    Ok(s)
}

/// Gradient with respect to the skew parameter vector, given the gradient
/// `g` with respect to the materialized matrix.
pub fn skew_vector_grad(g: &Matrix) -> Vec<f64> {
    let n = g.rows();
    skew_pairs(n).map(|(i, j)| g.get(j, i) - g.get(i, j)).collect()
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with the [13/13] Padé
/// approximant.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "expm needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::Numeric("expm input has non-finite entries".into()));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }

    let norm = a.norm1();
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scaled = if squarings > 0 {
        a.scale(0.5f64.powi(squarings as i32))
    } else {
        a.clone()
    };

    let b = &PADE13;
    let ident = Matrix::identity(n);
    let a2 = scaled.matmul(&scaled);
    let a4 = a2.matmul(&a2);
    let a6 = a4.matmul(&a2);

    let lin = |c6: f64, c4: f64, c2: f64, c0: f64| {
        let mut m = a6.scale(c6);
        m.add_assign(&a4.scale(c4));
        m.add_assign(&a2.scale(c2));
        m.add_assign(&ident.scale(c0));
        m
    };

    let mut u_inner = a6.matmul(&lin(b[13], b[11], b[9], 0.0));
    u_inner.add_assign(&lin(b[7], b[5], b[3], b[1]));
    let u = scaled.matmul(&u_inner);

    let mut v = a6.matmul(&lin(b[12], b[10], b[8], 0.0));
    v.add_assign(&lin(b[6], b[4], b[2], b[0]));

    let p = v.add(&u);
    let q = v.sub(&u);
    let mut r = solve(&q, &p)?;
    for _ in 0..squarings {
        r = r.matmul(&r);
    }
    if !r.is_finite() {
        return Err(Error::Numeric("expm overflowed".into()));
    }
    Ok(r)
}

/// Solves `a · x = b` by LU with partial pivoting.
fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let lu = a.to_nalgebra().lu();
    let x = lu
        .solve(&b.to_nalgebra())
        .ok_or_else(|| Error::Numeric("singular Padé denominator in expm".into()))?;
    Ok(Matrix::from_nalgebra(&x))
}

/// Vector-Jacobian product of the matrix exponential:
/// `∂⟨G, expm(S)⟩ / ∂S`.
///
/// This is the adjoint of the Fréchet derivative, `L(Sᵀ, G)`, read off the
/// upper-right block of `expm([[Sᵀ, G], [0, Sᵀ]])`.
pub fn expm_vjp(s: &Matrix, g: &Matrix) -> Result<Matrix> {
    if !s.is_square() || s.shape() != g.shape() {
        return Err(Error::invalid(format!(
            "expm_vjp needs square matrices of equal size, got {}x{} and {}x{}",
            s.rows(),
            s.cols(),
            g.rows(),
            g.cols()
        )));
    }
    let n = s.rows();
    let mut aug = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let st = s.get(j, i);
            aug.set(i, j, st);
            aug.set(n + i, n + j, st);
            aug.set(i, n + j, g.get(i, j));
        }
    }
    let e = expm(&aug)?;
    Ok(Matrix::from_fn(n, n, |i, j| e.get(i, n + j)))
}

/// Result of [`pca_eig`]: eigenvalues descending, eigenvector `k` in
/// column `k` of `eigenvectors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Eigenvector `k` as an owned vector.
    pub fn component(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|r| self.eigenvectors.get(r, k)).collect()
    }
}

/// Sample covariance with denominator `N - 1`.
pub fn covariance(x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let mean = x.column_means();
    let centered = x.sub_row(&mean);
    let cov = centered.matmul_tn(&centered).scale(1.0 / (n - 1) as f64);
    // exact symmetry for the eigen solver
    let d = cov.rows();
    let cov = Matrix::from_fn(d, d, |i, j| 0.5 * (cov.get(i, j) + cov.get(j, i)));
    Ok((mean, cov))
}

/// Eigendecomposition of the sample covariance of the rows of `x`.
///
/// Eigenvalues are sorted descending and tiny negative values from
/// round-off are clamped to zero. Each eigenvector's sign is fixed so that
/// its largest-magnitude entry is positive.
pub fn pca_eig(x: &Matrix) -> Result<Pca> {
    let (mean, cov) = covariance(x)?;
    let d = cov.rows();
    let eig = SymmetricEigen::new(cov.to_nalgebra());

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let eigenvalues = order
        .iter()
        .map(|&k| eig.eigenvalues[k].max(0.0))
        .collect();
    let mut eigenvectors = Matrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            eigenvectors.set(r, dst, sign * col[r]);
        }
    }
    Ok(Pca {
        mean,
        eigenvalues,
        eigenvectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn random_skew(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Matrix) {
        let v: Vec<f64> = (0..skew_len(n))
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        let s = skew_from_vector(&v, n).unwrap();
        (v, s)
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    /// Truncated Taylor series with exact accumulation of powers; used as
    /// an independent oracle for small-norm inputs.
    fn expm_taylor(a: &Matrix, terms: usize) -> Matrix {
        let n = a.rows();
        let mut sum = Matrix::identity(n);
        let mut term = Matrix::identity(n);
        for k in 1..terms {
            term = term.matmul(a).scale(1.0 / k as f64);
            sum = sum.add(&term);
        }
        sum
    }

    fn frob(a: &Matrix, b: &Matrix) -> f64 {
        dot(a.data(), b.data())
    }

    #[test]
    fn skew_two_dims_is_counter_clockwise() {
        let s = skew_from_vector(&[0.3], 2).unwrap();
        assert_eq!(s, Matrix::new(2, 2, vec![0.0, -0.3, 0.3, 0.0]).unwrap());
    }

    #[test]
    fn skew_zero_vector() {
        assert_eq!(skew_from_vector(&[0.0; 3], 3).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn skew_three_dims_layout() {
        let s = skew_from_vector(&[1.0, 2.0, 3.0], 3).unwrap();
        // element-wise construction check
        let pairs = [(0, 1, 1.0), (0, 2, 2.0), (1, 2, 3.0)];
        for (i, j, v) in pairs {
            assert_eq!(s.get(j, i), v);
            assert_eq!(s.get(i, j), -v);
        }
        for i in 0..3 {
            assert_eq!(s.get(i, i), 0.0);
        }
        assert_eq!(s.add(&s.transpose()), Matrix::zeros(3, 3));
    }

    #[test]
    fn skew_length_mismatch() {
        assert!(matches!(
            skew_from_vector(&[1.0, 2.0], 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn expm_of_zero_is_identity() {
        assert_eq!(expm(&Matrix::zeros(4, 4)).unwrap(), Matrix::identity(4));
    }

    #[test]
    fn expm_quarter_turn() {
        let s = skew_from_vector(&[PI / 2.0], 2).unwrap();
        let r = expm(&s).unwrap();
        let want = Matrix::new(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        assert!(r.sub(&want).max_abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn expm_matches_taylor_on_random_skew() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (_, s) = random_skew(5, 0.5, &mut rng);
            let got = expm(&s).unwrap();
            let want = expm_taylor(&s, 60);
            assert!(got.sub(&want).max_abs() < 1e-10);
        }
    }

    #[test]
    fn expm_large_norm_uses_squaring() {
        // ‖S‖ well above θ13; compare against Taylor on the halved matrix,
        // squared, which stays in the Taylor series' accurate range
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, s) = random_skew(4, 4.0, &mut rng);
        assert!(s.norm1() > THETA13);
        let half = expm_taylor(&s.scale(1.0 / 16.0), 40);
        let mut want = half;
        for _ in 0..4 {
            want = want.matmul(&want);
        }
        assert!(expm(&s).unwrap().sub(&want).max_abs() < 1e-9);
    }

    #[test]
    fn expm_of_skew_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 3, 5, 8, 12] {
            for _ in 0..10 {
                let (_, mut s) = random_skew(n, 1.0, &mut rng);
                // cap the norm at 10
                let norm = s.norm1();
                if norm > 10.0 {
                    s = s.scale(10.0 / norm);
                }
                let r = expm(&s).unwrap();
                let err = r.matmul_nt(&r).sub(&Matrix::identity(n)).max_abs();
                assert!(err <= 1e-10, "n={n} err={err}");
            }
        }
    }

    #[test]
    fn expm_rejects_bad_input() {
        assert!(matches!(
            expm(&Matrix::zeros(2, 3)),
            Err(Error::InvalidArgument(_))
        ));
        let bad = Matrix::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(expm(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn expm_vjp_at_zero_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_matrix(4, 4, &mut rng);
        let got = expm_vjp(&Matrix::zeros(4, 4), &g).unwrap();
        assert!(got.sub(&g).max_abs() < 1e-14);
    }

    #[test]
    fn expm_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eps = 1e-5;
        for _ in 0..20 {
            let (v, s) = random_skew(3, 0.8, &mut rng);
            let g = random_matrix(3, 3, &mut rng);
            let f = |v: &[f64]| frob(&g, &expm(&skew_from_vector(v, 3).unwrap()).unwrap());
            let grad_v = skew_vector_grad(&expm_vjp(&s, &g).unwrap());

            // directional derivative along a random skew direction
            let e: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let plus: Vec<f64> = v.iter().zip(&e).map(|(a, b)| a + eps * b).collect();
            let minus: Vec<f64> = v.iter().zip(&e).map(|(a, b)| a - eps * b).collect();
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let analytic = dot(&grad_v, &e);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-5, "numeric {numeric} analytic {analytic}");
        }
    }

    #[test]
    fn expm_vjp_two_dim_closed_form() {
        // R(θ) = [[c, -s], [s, c]], d/dθ ⟨G, R⟩ = -s(g00 + g11) + c(g10 - g01)
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let theta: f64 = rng.random_range(-3.0..3.0);
            let g = random_matrix(2, 2, &mut rng);
            let (sin, cos) = theta.sin_cos();
            let want = -sin * (g.get(0, 0) + g.get(1, 1)) + cos * (g.get(1, 0) - g.get(0, 1));
            let s = skew_from_vector(&[theta], 2).unwrap();
            let got = skew_vector_grad(&expm_vjp(&s, &g).unwrap())[0];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn expm_vjp_shape_mismatch() {
        assert!(matches!(
            expm_vjp(&Matrix::zeros(2, 2), &Matrix::zeros(3, 3)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pca_axis_aligned_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let x = Matrix::from_fn(n, 2, |_, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if c == 0 {
                2.0 * z
            } else {
                z
            }
        });
        let pca = pca_eig(&x).unwrap();
        assert!((pca.eigenvalues[0] - 4.0).abs() < 0.05);
        assert!((pca.eigenvalues[1] - 1.0).abs() < 0.02);
        assert!((pca.eigenvectors.get(0, 0).abs() - 1.0).abs() < 1e-3);
        assert!((pca.eigenvectors.get(1, 1).abs() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pca_identical_rows() {
        let x = Matrix::from_fn(10, 3, |_, c| c as f64);
        let pca = pca_eig(&x).unwrap();
        assert!(pca.eigenvalues.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn pca_two_points_rank_one() {
        let x = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let pca = pca_eig(&x).unwrap();
        assert!(pca.eigenvalues[0] > 0.1);
        assert!(pca.eigenvalues[1..].iter().all(|&l| l < 1e-12));
    }

    #[test]
    fn pca_needs_two_rows() {
        let x = Matrix::zeros(1, 3);
        assert!(matches!(pca_eig(&x), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn pca_reconstructs_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for d in [2, 4, 7] {
            let mix = random_matrix(d, d, &mut rng);
            let x = random_matrix(300, d, &mut rng).matmul(&mix);
            let (_, cov) = covariance(&x).unwrap();
            let pca = pca_eig(&x).unwrap();
            let v = &pca.eigenvectors;
            let lambda = Matrix::from_fn(d, d, |i, j| if i == j { pca.eigenvalues[i] } else { 0.0 });
            let rebuilt = v.matmul(&lambda).matmul_nt(v);
            assert!(rebuilt.sub(&cov).max_abs() < 1e-8);
            assert!(v.matmul_tn(v).sub(&Matrix::identity(d)).max_abs() < 1e-8);
            assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}

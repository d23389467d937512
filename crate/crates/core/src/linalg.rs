//! Dense kernels shared by every other module.
//!
//! Matrices are row-major `f64`. Products go through `matrixmultiply`'s
//! strided GEMM so transposed operands never need to be materialized.
//! Symmetric positive (semi-)definite matrices get their own type because
//! they carry a damping term and are only ever used through Cholesky solves;
//! no explicit inverse is formed anywhere in the crate.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ensure_dim, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dim("matrix data length", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, &x) in v.iter().enumerate() {
            self.set(i, j, x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        ensure_dim("add_scaled rows", self.rows, other.rows)?;
        ensure_dim("add_scaled cols", self.cols, other.cols)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure_dim("matmul inner dimension", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn tr_matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure_dim("tr_matmul inner dimension", self.rows, other.rows)?;
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self.view().t(), other.view(), 0.0, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_tr(&self, other: &Matrix) -> Result<Matrix> {
        ensure_dim("matmul_tr inner dimension", self.cols, other.cols)?;
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self.view(), other.view().t(), 0.0, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub(crate) fn view(&self) -> MatView<'_> {
        MatView {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }
}

/// Strided read-only view used to feed GEMM without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha · a · b + beta · c`
pub(crate) fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, c: &mut Matrix) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.scale(beta);
        return;
    }
    let rsc = c.cols as isize;
    // SAFETY: the views were bounds-checked on construction and the strides
    // describe either a row-major block or its transpose inside that block.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// Symmetric positive (semi-)definite matrix with an explicit damping term.
///
/// Storage is the full square; updates always write both triangles from the
/// same value so the matrix stays exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
    damping: f64,
}

/// First damping tried when a factorization fails, relative to `trace / dim`.
pub const DAMPING_START: f64 = 1e-6;
/// Largest damping tried before giving up, relative to `trace / dim`.
pub const DAMPING_MAX: f64 = 1e-2;

impl SpdMatrix {
    pub fn zeros(dim: usize) -> Self {
        SpdMatrix {
            dim,
            data: vec![0.0; dim * dim],
            damping: 0.0,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = SpdMatrix::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    /// Wraps a square matrix, checking symmetry to 1e-12 relative.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        ensure_dim("spd matrix must be square", m.rows, m.cols)?;
        if !m.is_finite() {
            return Err(Error::NonFinite("spd matrix"));
        }
        let n = m.rows;
        let scale = m.data.iter().fold(0.0f64, |a, v| a.max(libm::fabs(*v))).max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in (i + 1)..n {
                if libm::fabs(m.get(i, j) - m.get(j, i)) > 1e-12 * scale {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let mut s = SpdMatrix {
            dim: n,
            data: m.data,
            damping: 0.0,
        };
        s.symmetrize();
        Ok(s)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = SpdMatrix::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = d;
        }
        m
    }

    fn symmetrize(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping.max(0.0);
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    /// The matrix with its damping folded onto the diagonal.
    pub fn damped_matrix(&self) -> Matrix {
        let mut m = self.to_matrix();
        for i in 0..self.dim {
            m.data[i * self.dim + i] += self.damping;
        }
        m
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// `self += x · xᵀ`
    pub fn accumulate_outer(&mut self, x: &[f64]) -> Result<()> {
        self.accumulate_outer_scaled(x, 1.0)
    }

    /// `self += s · x · xᵀ`
    pub fn accumulate_outer_scaled(&mut self, x: &[f64], s: f64) -> Result<()> {
        ensure_dim("accumulate_outer", self.dim, x.len())?;
        let n = self.dim;
        for i in 0..n {
            let xi = s * x[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..n {
                self.data[i * n + j] += xi * x[j];
            }
        }
        self.mirror_upper();
        Ok(())
    }

    /// `self += s · Xᵀ X` for a batch of row vectors `X`.
    pub fn accumulate_gram(&mut self, x: &Matrix, s: f64) -> Result<()> {
        ensure_dim("accumulate_gram", self.dim, x.cols)?;
        if x.rows == 0 {
            return Ok(());
        }
        let mut g = Matrix::zeros(self.dim, self.dim);
        gemm(s, x.view().t(), x.view(), 0.0, &mut g);
        let n = self.dim;
        for i in 0..n {
            for j in i..n {
                self.data[i * n + j] += g.data[i * n + j];
            }
        }
        self.mirror_upper();
        Ok(())
    }

    fn mirror_upper(&mut self) {
        let n = self.dim;
        for i in 0..n {
            for j in (i + 1)..n {
                self.data[j * n + i] = self.data[i * n + j];
            }
        }
    }

    pub fn scaled(&self, s: f64) -> SpdMatrix {
        SpdMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
            damping: self.damping * s,
        }
    }

    /// `self + other` (dampings add as well).
    pub fn sum(&self, other: &SpdMatrix) -> Result<SpdMatrix> {
        ensure_dim("spd sum", self.dim, other.dim)?;
        Ok(SpdMatrix {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            damping: self.damping + other.damping,
        })
    }

    pub fn principal_submatrix(&self, idx: &[usize]) -> SpdMatrix {
        let k = idx.len();
        let mut data = Vec::with_capacity(k * k);
        for &i in idx {
            for &j in idx {
                data.push(self.get(i, j));
            }
        }
        SpdMatrix {
            dim: k,
            data,
            damping: self.damping,
        }
    }

    /// `vᵀ (A + damping·I) v`
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64> {
        ensure_dim("quadratic_form", self.dim, v.len())?;
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            acc += v[i] * dot(&self.data[i * n..(i + 1) * n], v);
        }
        Ok(acc + self.damping * dot(v, v))
    }

    /// `(A + damping·I) v`
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("spd mul_vec", self.dim, v.len())?;
        let n = self.dim;
        Ok((0..n)
            .map(|i| dot(&self.data[i * n..(i + 1) * n], v) + self.damping * v[i])
            .collect())
    }

    /// Cholesky factorization of `A + damping·I`, escalating the damping when
    /// the matrix is numerically singular.
    ///
    /// Starts from the current damping. On failure the damping is set to
    /// `1e-6 · trace/dim` and multiplied by ten up to `1e-2 · trace/dim`.
    pub fn factor(&self) -> Result<Cholesky> {
        if self.data.iter().any(|v| !v.is_finite()) || !self.damping.is_finite() {
            return Err(Error::NonFinite("spd matrix"));
        }
        if self.dim == 0 {
            return Ok(Cholesky {
                dim: 0,
                l: Vec::new(),
                damping: self.damping,
            });
        }
        if let Some(c) = Cholesky::try_factor(self, self.damping) {
            return Ok(c);
        }
        let base = self.trace() / self.dim as f64;
        if !(base > 0.0) {
            return Err(Error::FactorizationFailed {
                damping: self.damping,
            });
        }
        let mut rel = DAMPING_START;
        let mut last = self.damping;
        while rel <= DAMPING_MAX * (1.0 + 1e-9) {
            let damping = self.damping.max(rel * base);
            if let Some(c) = Cholesky::try_factor(self, damping) {
                return Ok(c);
            }
            last = damping;
            rel *= 10.0;
        }
        Err(Error::FactorizationFailed { damping: last })
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A + damping·I`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
    damping: f64,
}

impl Cholesky {
    fn try_factor(a: &SpdMatrix, damping: f64) -> Option<Cholesky> {
        let n = a.dim;
        let max_diag = (0..n).map(|i| a.get(i, i)).fold(0.0f64, f64::max) + damping;
        let tol = (n as f64) * f64::EPSILON * max_diag.max(f64::MIN_POSITIVE);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j) + damping - dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
            if !(d > tol) {
                return None;
            }
            d = libm::sqrt(d);
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let s = a.get(i, j) - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / d;
            }
        }
        Some(Cholesky { dim: n, l, damping })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Damping that was needed for the factorization to succeed.
    pub fn damping(&self) -> f64 {
        self.damping
    }

    /// Solves `L y = b` in place for a vector.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let s = dot(&self.l[i * n..i * n + i], &b[..i]);
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place for a vector.
    pub fn backward_solve(&self, y: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("cholesky solve", self.dim, b.len())?;
        let mut x = b.to_vec();
        self.forward_solve(&mut x);
        self.backward_solve(&mut x);
        Ok(x)
    }

    /// Solves `L Y = B` in place for a matrix right-hand side.
    pub fn forward_solve_mat(&self, b: &mut Matrix) -> Result<()> {
        ensure_dim("cholesky forward solve", self.dim, b.rows)?;
        let n = self.dim;
        let m = b.cols;
        for i in 0..n {
            let (done, rest) = b.data.split_at_mut(i * m);
            let bi = &mut rest[..m];
            for k in 0..i {
                let lik = self.l[i * n + k];
                if lik != 0.0 {
                    let bk = &done[k * m..(k + 1) * m];
                    for (x, y) in bi.iter_mut().zip(bk) {
                        *x -= lik * y;
                    }
                }
            }
            let inv = 1.0 / self.l[i * n + i];
            bi.iter_mut().for_each(|x| *x *= inv);
        }
        Ok(())
    }

    /// Solves `Lᵀ X = Y` in place for a matrix right-hand side.
    pub fn backward_solve_mat(&self, y: &mut Matrix) -> Result<()> {
        ensure_dim("cholesky backward solve", self.dim, y.rows)?;
        let n = self.dim;
        let m = y.cols;
        for i in (0..n).rev() {
            let (head, tail) = y.data.split_at_mut((i + 1) * m);
            let yi = &mut head[i * m..];
            for k in (i + 1)..n {
                let lki = self.l[k * n + i];
                if lki != 0.0 {
                    let yk = &tail[(k - i - 1) * m..(k - i) * m];
                    for (x, z) in yi.iter_mut().zip(yk) {
                        *x -= lki * z;
                    }
                }
            }
            let inv = 1.0 / self.l[i * n + i];
            yi.iter_mut().for_each(|x| *x *= inv);
        }
        Ok(())
    }

    pub fn solve_mat(&self, b: &Matrix) -> Result<Matrix> {
        let mut x = b.clone();
        self.forward_solve_mat(&mut x)?;
        self.backward_solve_mat(&mut x)?;
        Ok(x)
    }
}

/// Solves `(a + damping·I) x = b`, escalating the damping if `a` is singular.
pub fn spd_solve(a: &SpdMatrix, b: &Matrix) -> Result<Matrix> {
    ensure_dim("spd_solve rows", a.dim(), b.rows())?;
    if !b.is_finite() {
        return Err(Error::NonFinite("spd_solve right-hand side"));
    }
    a.factor()?.solve_mat(b)
}

/// Functional form of [`SpdMatrix::accumulate_outer`].
pub fn accumulate_outer(mut sum: SpdMatrix, x: &[f64]) -> Result<SpdMatrix> {
    sum.accumulate_outer(x)?;
    Ok(sum)
}

/// Functional form of [`SpdMatrix::quadratic_form`].
pub fn quadratic_form(a: &SpdMatrix, v: &[f64]) -> Result<f64> {
    a.quadratic_form(v)
}

/// A bijection on `0..n`. `apply` gathers: `out[i] = input[map[i]]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &m in &map {
            if m >= n {
                return Err(Error::InvalidPermutation(alloc::format!(
                    "index {m} out of range for length {n}"
                )));
            }
            if core::mem::replace(&mut seen[m], true) {
                return Err(Error::InvalidPermutation(alloc::format!("index {m} repeated")));
            }
        }
        Ok(Permutation { map })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            map: (0..n).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Permutation { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { map: inv }
    }

    /// `(self ∘ other).apply(x) == self.apply(&other.apply(x))`
    pub fn compose(&self, other: &Permutation) -> Permutation {
        Permutation {
            map: self.map.iter().map(|&i| other.map[i]).collect(),
        }
    }

    pub fn apply<T: Clone>(&self, input: &[T]) -> Result<Vec<T>> {
        ensure_dim("permutation apply", self.map.len(), input.len())?;
        Ok(self.map.iter().map(|&i| input[i].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let g = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = g.tr_matmul(&g).unwrap();
        for i in 0..n {
            let v = a.get(i, i) + 0.5;
            a.set(i, i, v);
        }
        SpdMatrix::from_matrix(a).unwrap()
    }

    #[test]
    fn solve_identity() {
        let x = spd_solve(&SpdMatrix::identity(2), &Matrix::column_vector(&[3.0, 4.0])).unwrap();
        assert_eq!(x.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn solve_diagonal() {
        let a = SpdMatrix::from_diagonal(&[2.0, 4.0]);
        let x = spd_solve(&a, &Matrix::column_vector(&[2.0, 4.0])).unwrap();
        assert!(x.as_slice().iter().all(|v| (v - 1.0).abs() <= 1e-15));
    }

    #[test]
    fn solve_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_spd(5, &mut rng);
            let b = Matrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
            let x = spd_solve(&a, &b).unwrap();
            let r = a.to_matrix().matmul(&x).unwrap();
            let mut diff = r.clone();
            diff.add_scaled(-1.0, &b).unwrap();
            assert!(diff.frobenius_norm() / b.frobenius_norm() <= 1e-10);
        }
    }

    #[test]
    fn singular_matrix_gets_damped() {
        // rank one: [[1,1],[1,1]]
        let mut a = SpdMatrix::zeros(2);
        a.accumulate_outer(&[1.0, 1.0]).unwrap();
        let c = a.factor().unwrap();
        assert!(c.damping() > 0.0);
        assert!(c.damping() <= 1e-2 * a.trace() / 2.0 + 1e-15);
        let x = c.solve_vec(&[1.0, 1.0]).unwrap();
        let mut damped = a.clone().with_damping(c.damping());
        let r = damped.mul_vec(&x).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-10 && (r[1] - 1.0).abs() < 1e-10);
        damped = damped.with_damping(0.0);
        assert_eq!(damped.damping(), 0.0);
    }

    #[test]
    fn zero_matrix_fails() {
        assert!(matches!(
            SpdMatrix::zeros(3).factor(),
            Err(Error::FactorizationFailed { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = SpdMatrix::identity(2);
        a.data[0] = f64::NAN;
        assert!(matches!(a.factor(), Err(Error::NonFinite(_))));
        let b = Matrix {
            rows: 2,
            cols: 1,
            data: vec![f64::INFINITY, 0.0],
        };
        assert!(spd_solve(&SpdMatrix::identity(2), &b).is_err());
    }

    #[test]
    fn outer_product_examples() {
        let s = accumulate_outer(SpdMatrix::zeros(2), &[1.0, 2.0]).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 2.0, 4.0]);
        let z = accumulate_outer(SpdMatrix::zeros(2), &[0.0, 0.0]).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 4]);
        assert!(SpdMatrix::zeros(2).accumulate_outer(&[1.0]).is_err());
    }

    #[test]
    fn outer_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut s = SpdMatrix::zeros(6);
        for x in &xs {
            s.accumulate_outer(x).unwrap();
        }
        for i in 0..6 {
            for j in 0..6 {
                let direct: f64 = xs.iter().map(|x| x[i] * x[j]).sum();
                assert!((s.get(i, j) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            }
        }
        let batch = Matrix::from_fn(100, 6, |i, j| xs[i][j]);
        let mut g = SpdMatrix::zeros(6);
        g.accumulate_gram(&batch, 1.0).unwrap();
        assert!(g.to_matrix().max_abs_diff(&s.to_matrix()) <= 1e-12 * 100.0);
    }

    #[test]
    fn quadratic_form_examples() {
        assert_eq!(quadratic_form(&SpdMatrix::identity(2), &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(quadratic_form(&SpdMatrix::identity(2), &[0.0, 0.0]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(4, &mut rng);
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut naive = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                naive += v[i] * a.get(i, j) * v[j];
            }
        }
        assert!((a.quadratic_form(&v).unwrap() - naive).abs() < 1e-12);
        assert!(a.quadratic_form(&[1.0]).is_err());
    }

    #[test]
    fn permutation_rejects_non_bijection() {
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(Permutation::new(vec![0, 2]).is_err());
        assert!(Permutation::new(vec![1, 0]).is_ok());
    }

    #[test]
    fn triangular_matrix_solves_match_vector_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_spd(6, &mut rng);
        let c = a.factor().unwrap();
        let b = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let x = c.solve_mat(&b).unwrap();
        for j in 0..4 {
            let xv = c.solve_vec(&b.column(j)).unwrap();
            for i in 0..6 {
                assert!((xv[i] - x.get(i, j)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_inverse_roundtrip(seed in any::<u64>(), n in 0usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Permutation::random(n, &mut rng);
            let data: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let there = p.apply(&data).unwrap();
            let back = p.inverse().apply(&there).unwrap();
            prop_assert_eq!(back, data);
            prop_assert!(p.compose(&p.inverse()).is_identity());
        }

        #[test]
        fn outer_accumulation_order_independent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let mut fwd = SpdMatrix::zeros(5);
            for x in &xs { fwd.accumulate_outer(x).unwrap(); }
            let p = Permutation::random(xs.len(), &mut rng);
            let shuffled = p.apply(&xs).unwrap();
            let mut rev = SpdMatrix::zeros(5);
            for x in &shuffled { rev.accumulate_outer(x).unwrap(); }
            let scale = fwd.to_matrix().frobenius_norm();
            prop_assert!(fwd.to_matrix().max_abs_diff(&rev.to_matrix()) <= 1e-10 * scale);
        }

        #[test]
        fn solve_residual_small(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spd(n, &mut rng);
            let b = Matrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
            let x = spd_solve(&a, &b).unwrap();
            let ax = a.mul_vec(x.as_slice()).unwrap();
            let res: f64 = ax.iter().zip(b.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            prop_assert!(res / b.frobenius_norm().max(1e-300) <= 1e-10);
        }
    }
}

//! Dense row-major matrices, sign-fixed Householder QR and seeded sampling.

use std::ops::{Index, IndexMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense matrix stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::eye(n, n)
    }

    /// First `cols` columns of the `rows`-dimensional identity.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting shape mismatches and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dims(format!("{} entries", rows * cols), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally sized rows.
    ///
    /// # Panics
    /// Panics when the rows are ragged.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns<C: AsRef<[T]>>(columns: &[C]) -> Self {
        let rows = columns.first().map_or(0, |c| c.as_ref().len());
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            let c = c.as_ref();
            assert_eq!(c.len(), rows, "ragged columns");
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
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

    /// `self · other`.
    ///
    /// # Panics
    /// Panics on incompatible shapes.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    ///
    /// # Panics
    /// Panics on incompatible shapes.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        for p in 0..self.rows {
            let b_row = other.row(p);
            for (i, &a) in self.row(p).iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ · x`.
    pub fn t_matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.rows, x.len(), "t_matvec shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|a| a * s)
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Symmetric part `(A + Aᵀ)/2` of a square matrix.
    pub fn sym(&self) -> Self {
        assert_eq!(self.rows, self.cols, "sym needs a square matrix");
        let half = T::lit(0.5);
        let mut s = Self::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                s[(i, j)] = half * (self[(i, j)] + self[(j, i)]);
            }
        }
        s
    }

    pub fn frobenius_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn frobenius(&self) -> T {
        self.frobenius_sq().sqrt()
    }

    /// Frobenius inner product `tr(selfᵀ other)`.
    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    /// `‖selfᵀ self − I‖_F`.
    pub fn orthonormality_defect(&self) -> T {
        let g = self.t_matmul(self);
        g.sub(&Self::identity(self.cols)).frobenius()
    }

    /// Matrix with columns `[self | other]`.
    pub fn hcat(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        let cols = self.cols + other.cols;
        let mut out = Self::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
            out.data[i * cols + self.cols..(i + 1) * cols].copy_from_slice(other.row(i));
        }
        out
    }

    /// Columns `range` of `self`.
    pub fn columns(&self, range: std::ops::Range<usize>) -> Self {
        let mut out = Self::zeros(self.rows, range.len());
        for i in 0..self.rows {
            for (jj, j) in range.clone().enumerate() {
                out[(i, jj)] = self[(i, j)];
            }
        }
        out
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Thin QR factorization `m = Q·R` with `diag(R) ≥ 0`.
///
/// Householder reflections followed by a column sign correction, which makes
/// the factorization unique for full-rank input. `Q` is `d×k` with orthonormal
/// columns and `R` is `k×k` upper triangular.
pub fn qr_positive<T: Real>(m: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (d, k) = m.shape();
    if k == 0 || k > d {
        return Err(Error::dims(format!("k in 1..={d}"), k));
    }
    if !m.is_finite() {
        return Err(Error::Numerical("qr input must be finite".into()));
    }
    let tol = T::lit(1e-12).max(T::epsilon() * T::lit(4.0)) * m.frobenius().max(T::min_positive_value());
    let mut a = m.clone();
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(k);

    for j in 0..k {
        let norm = (j..d).map(|i| a[(i, j)] * a[(i, j)]).sum::<T>().sqrt();
        if norm <= tol {
            return Err(Error::RankDeficient {
                column: j,
                norm: norm.as_f64(),
            });
        }
        let x0 = a[(j, j)];
        let alpha = if x0 >= T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (j..d).map(|i| a[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm_sq: T = v.iter().map(|&t| t * t).sum();
        let two = T::lit(2.0);
        for c in j..k {
            let proj: T = v.iter().enumerate().map(|(p, &vp)| vp * a[(j + p, c)]).sum();
            let f = two * proj / vnorm_sq;
            for (p, &vp) in v.iter().enumerate() {
                a[(j + p, c)] -= f * vp;
            }
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(k, k);
    for i in 0..k {
        for c in i..k {
            r[(i, c)] = a[(i, c)];
        }
    }

    let mut q = Matrix::eye(d, k);
    let two = T::lit(2.0);
    for (j, v) in reflectors.iter().enumerate().rev() {
        let vnorm_sq: T = v.iter().map(|&t| t * t).sum();
        for c in 0..k {
            let proj: T = v.iter().enumerate().map(|(p, &vp)| vp * q[(j + p, c)]).sum();
            if proj.is_zero() {
                continue;
            }
            let f = two * proj / vnorm_sq;
            for (p, &vp) in v.iter().enumerate() {
                q[(j + p, c)] -= f * vp;
            }
        }
    }

    for j in 0..k {
        if r[(j, j)] < T::zero() {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
            for c in j..k {
                r[(j, c)] = -r[(j, c)];
            }
        }
    }
    Ok((q, r))
}

/// Seeded random stream with cheap independent sub-streams.
///
/// Backed by ChaCha8; a sub-stream keeps the seed and moves to a stream id
/// derived from the parent stream and a label, so `(seed, label)` pairs never
/// share output.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0, 0)
    }

    /// Restores a stream at a given position.
    pub fn at(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        inner.set_word_pos(word_pos);
        Self { seed, stream, inner }
    }

    /// Fresh stream for `(seed, parent stream, label)`, positioned at zero.
    pub fn substream(&self, label: &str) -> Self {
        Self::at(self.seed, mix(self.stream ^ fnv1a(label.as_bytes())), 0)
    }

    /// Fresh stream for `(seed, parent stream, label, index)`.
    pub fn substream_indexed(&self, label: &str, index: u64) -> Self {
        let id = mix(self.stream ^ fnv1a(label.as_bytes())) ^ mix(index.wrapping_add(0x9E37_79B9_7F4A_7C15));
        Self::at(self.seed, mix(id), 0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| T::lit(self.normal())).collect()
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix<T: Real>(rows: usize, cols: usize, rng: &mut RngState) -> Matrix<T> {
    Matrix {
        rows,
        cols,
        data: rng.normal_vec(rows * cols),
    }
}

/// Uniform point on the unit sphere `S^{d-1}` (normalized Gaussian).
pub fn sphere_uniform<T: Real>(d: usize, rng: &mut RngState) -> Vec<T> {
    assert!(d >= 1, "sphere dimension must be positive");
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return g.iter().map(|v| T::lit(v / norm)).collect();
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm_sq<T: Real>(a: &[T]) -> T {
    dot(a, a)
}

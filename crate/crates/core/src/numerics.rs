//! Dense row-major matrices, seeded randomness and SPD solves.
//!
//! Everything in the toolkit is `f64`. Kernels are single-threaded and use a
//! fixed summation order, so identical inputs give bit-identical outputs.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()
        } else {
            write!(f, "[..]")
        }
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input; meant
    /// for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.ensure_same_shape(other, "elementwise op")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Gathers rows by index into a new `idx.len() x cols` matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    fn ensure_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Dot product with four interleaved accumulators. The summation order is
/// fixed, so results are reproducible across runs.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = k * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            axpy(a.data[i * a.cols + k], b.row(k), out_row);
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_nt: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_tn: ({}x{})ᵀ times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let br = b.row(i);
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            axpy(aik, br, &mut out.data[k * b.cols..(k + 1) * b.cols]);
        }
    }
    Ok(out)
}

/// Softmax of one row in place, stabilized by subtracting the row max.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu(m: &Matrix) -> Matrix {
    m.map(silu_scalar)
}

fn check_square_symmetric(h: &Matrix) -> Result<()> {
    if h.rows != h.cols {
        return Err(Error::shape(format!(
            "expected a square matrix, got {}x{}",
            h.rows, h.cols
        )));
    }
    let tol = 1e-9 * h.max_abs().max(1.0);
    for i in 0..h.rows {
        for j in 0..i {
            if (h[(i, j)] - h[(j, i)]).abs() > tol {
                return Err(Error::Numerical(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    h[(i, j)],
                    h[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Lower Cholesky factor `L` with `h = L·Lᵀ`.
pub fn cholesky(h: &Matrix) -> Result<Matrix> {
    check_square_symmetric(h)?;
    let n = h.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Numerical(format!(
                "Cholesky failed at pivot {j} (value {d:e}): matrix is not positive definite; \
                 increase dampening"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Upper Cholesky factor `U` with `h = Uᵀ·U`.
pub fn cholesky_upper(h: &Matrix) -> Result<Matrix> {
    Ok(cholesky(h)?.transpose())
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(h: &Matrix) -> Result<Matrix> {
    let l = cholesky(h)?;
    let n = h.rows;
    // Solve L·Y = I column by column, then Lᵀ·X = Y.
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for c in 0..n {
        for i in 0..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * inv[(k, c)];
            }
            inv[(i, c)] = s / l[(i, i)];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = avg;
            inv[(j, i)] = avg;
        }
    }
    if !inv.is_finite() {
        return Err(Error::Numerical(
            "inverse is not finite; increase dampening".into(),
        ));
    }
    Ok(inv)
}

/// Deterministic random source. ChaCha8 keeps the stream identical across
/// platforms and crate upgrades that preserve the algorithm.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; the same `(seed, stream)` pair always yields
    /// the same child.
    pub fn derive(&self, stream: u64) -> SeededRng {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
        SeededRng::new(mixed)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.normal()).collect();
        Matrix { rows, cols, data }
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| lo + (hi - lo) * self.uniform())
            .collect();
        Matrix { rows, cols, data }
    }

    /// `k` distinct indices from `0..n` in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let p = matmul(
            &Matrix::from_rows(&[[1.0, 2.0]]),
            &Matrix::from_rows(&[[3.0], [4.0]]),
        )
        .unwrap();
        assert_eq!(p.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = SeededRng::new(3);
        let a = rng.gaussian_matrix(5, 7, 1.0);
        let b = rng.gaussian_matrix(6, 7, 1.0);
        let c = rng.gaussian_matrix(5, 3, 1.0);
        let nt = matmul_nt(&a, &b).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &b.transpose()).unwrap()) < 1e-12);
        let tn = matmul_tn(&a, &c).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a.transpose(), &c).unwrap()) < 1e-12);
    }

    #[test]
    fn identity_associativity_is_bit_exact() {
        let mut rng = SeededRng::new(11);
        let a = rng.gaussian_matrix(4, 6, 1.0);
        let b = rng.gaussian_matrix(6, 3, 1.0);
        let i = Matrix::identity(6);
        let left = matmul(&matmul(&a, &i).unwrap(), &b).unwrap();
        let right = matmul(&a, &matmul(&i, &b).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn softmax_cases() {
        let s = row_softmax(&Matrix::from_rows(&[[0.0, 0.0], [1000.0, 1000.0]]));
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        // Reference from mpmath at 50 digits: exp(i)/sum(exp(1..3)).
        let s = row_softmax(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]));
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn silu_cases() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(20.0) - 20.0).abs() < 1e-7);
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) - oracle).abs() < 1e-15);
        assert!((silu_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(silu_scalar(-800.0).is_finite());
    }

    #[test]
    fn spd_inverse_cases() {
        assert_eq!(
            spd_inverse(&Matrix::identity(4)).unwrap(),
            Matrix::identity(4)
        );
        let inv = spd_inverse(&Matrix::diag(&[2.0, 4.0])).unwrap();
        assert!(inv.max_abs_diff(&Matrix::diag(&[0.5, 0.25])) < 1e-15);
        let indefinite = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(spd_inverse(&indefinite), Err(Error::Numerical(_))));
    }

    #[test]
    fn spd_inverse_residual_on_random_gram_matrices() {
        let mut rng = SeededRng::new(42);
        for trial in 0..100 {
            let n = 1 + trial % 32;
            let a = rng.gaussian_matrix(n, n, 1.0);
            let mut h = matmul_tn(&a, &a).unwrap();
            h.add_assign(&Matrix::identity(n));
            let inv = spd_inverse(&h).unwrap();
            let resid = matmul(&h, &inv).unwrap().max_abs_diff(&Matrix::identity(n));
            assert!(resid < 1e-8, "n={n} residual {resid:e}");
        }
    }

    #[test]
    fn cholesky_upper_reconstructs() {
        let mut rng = SeededRng::new(5);
        let a = rng.gaussian_matrix(6, 6, 1.0);
        let mut h = matmul_tn(&a, &a).unwrap();
        h.add_assign(&Matrix::identity(6));
        let u = cholesky_upper(&h).unwrap();
        assert!(matmul_tn(&u, &u).unwrap().max_abs_diff(&h) < 1e-10);
        for i in 0..6 {
            for j in 0..i {
                assert_eq!(u[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn rng_is_deterministic() {
        let a: Vec<f64> = {
            let mut r = SeededRng::new(9);
            (0..16).map(|_| r.normal()).collect()
        };
        let b: Vec<f64> = {
            let mut r = SeededRng::new(9);
            (0..16).map(|_| r.normal()).collect()
        };
        assert_eq!(a, b);
        let d = SeededRng::new(9).derive(1).uniform();
        assert_eq!(d, SeededRng::new(9).derive(1).uniform());
        assert_ne!(d, SeededRng::new(9).derive(2).uniform());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions_and_shift_invariant(
            vals in proptest::collection::vec(-50.0f64..50.0, 12),
            shift in -100.0f64..100.0,
        ) {
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let s = row_softmax(&m);
            for r in 0..3 {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
            let shifted = row_softmax(&m.map(|v| v + shift));
            prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
        }
    }
}

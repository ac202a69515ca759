//! Complex dense matrices, seeded random streams and the handful of linear
//! algebra routines the simulator and the linear calibrators need.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{CalibError, Result};

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Deterministic random stream with labelled, order-independent children.
///
/// A child stream depends only on the parent's seed and the label, never on how
/// many values the parent has already produced, so per-trial and per-role
/// streams can be created in any order (or in parallel) with identical output.
#[derive(Debug, Clone)]
pub struct SimRng {
    seed: u64,
    inner: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn derive_seed(parent: u64, key: u64) -> u64 {
    splitmix64(parent ^ splitmix64(key.rotate_left(17) ^ 0xD1B5_4A32_D192_ED03))
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for a named role (e.g. `"noise"`, `"init"`).
    pub fn fork(&self, label: &str) -> SimRng {
        SimRng::new(derive_seed(self.seed, fnv1a(label)))
    }

    /// Child stream for a named role and an index (e.g. trial number).
    pub fn fork_indexed(&self, label: &str, index: u64) -> SimRng {
        let labelled = derive_seed(self.seed, fnv1a(label));
        SimRng::new(derive_seed(labelled, index))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// One circularly symmetric complex Gaussian draw with the given variance.
    pub fn complex_gaussian(&mut self, variance: f64) -> C64 {
        let s = (variance / 2.0).sqrt();
        let re = self.standard_normal();
        let im = self.standard_normal();
        C64::new(s * re, s * im)
    }
}

/// Dense row-major complex matrix.
#[derive(Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                write!(f, "{:+.4}{:+.4}j ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CalibError::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CalibError::shape(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("{} entries", data.len()),
            ));
        }
        Ok(CMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMatrix { rows, cols, data }
    }

    pub fn from_diagonal(diag: &[C64]) -> Self {
        let mut m = CMatrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Column vector from a slice.
    pub fn column_vector(values: &[C64]) -> Self {
        CMatrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Row vector from a slice.
    pub fn row_vector(values: &[C64]) -> Self {
        CMatrix {
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

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[C64]) {
        assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    pub fn set_row(&mut self, r: usize, values: &[C64]) {
        assert_eq!(values.len(), self.cols);
        self.data[r * self.cols..(r + 1) * self.cols].copy_from_slice(values);
    }

    pub fn diagonal(&self) -> Vec<C64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Conjugate (Hermitian) transpose.
    pub fn adjoint(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn scale(&self, s: C64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn add(&self, other: &CMatrix) -> Result<CMatrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &CMatrix) -> Result<CMatrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &CMatrix,
        op: &'static str,
        f: impl Fn(C64, C64) -> C64,
    ) -> Result<CMatrix> {
        if self.shape() != other.shape() {
            return Err(CalibError::shape(op, self.shape_str(), other.shape_str()));
        }
        Ok(CMatrix {
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

    pub fn matmul(&self, other: &CMatrix) -> Result<CMatrix> {
        matmul(self, other)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Standard complex matrix product.
pub fn matmul(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.cols != b.rows {
        return Err(CalibError::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let mut out = CMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == ZERO {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Reduction applied by [`mse_between`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Sum,
    Mean,
}

/// Sum or mean of squared moduli of the entrywise difference.
pub fn mse_between(a: &CMatrix, b: &CMatrix, normalization: Normalization) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CalibError::shape("mse_between", a.shape_str(), b.shape_str()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y).norm_sqr())
        .sum();
    Ok(match normalization {
        Normalization::Sum => sum,
        Normalization::Mean => sum / a.data.len() as f64,
    })
}

/// I.i.d. circularly symmetric complex Gaussian entries, CN(0, variance):
/// real and imaginary parts are each N(0, variance / 2).
pub fn sample_complex_gaussian(
    rng: &mut SimRng,
    rows: usize,
    cols: usize,
    variance: f64,
) -> Result<CMatrix> {
    if !variance.is_finite() || variance < 0.0 {
        return Err(CalibError::invalid(format!(
            "variance must be finite and non-negative, got {variance}"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(CalibError::invalid(format!(
            "matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| rng.complex_gaussian(variance))
        .collect();
    Ok(CMatrix { rows, cols, data })
}

/// Haar-distributed `m x m` unitary matrix.
///
/// Columns of a CN(0,1) matrix are orthonormalized with modified Gram-Schmidt
/// (two passes). The implied triangular factor has a positive real diagonal, so
/// no extra phase correction is needed for the result to be Haar distributed.
pub fn random_unitary(rng: &mut SimRng, m: usize) -> Result<CMatrix> {
    if m < 1 {
        return Err(CalibError::invalid("unitary dimension must be at least 1"));
    }
    loop {
        let g = sample_complex_gaussian(rng, m, m, 1.0)?;
        let mut cols: Vec<Vec<C64>> = (0..m).map(|c| g.column(c)).collect();
        let mut ok = true;
        for j in 0..m {
            for _pass in 0..2 {
                for i in 0..j {
                    let (done, rest) = cols.split_at_mut(j);
                    let qi = &done[i];
                    let v = &mut rest[0];
                    let proj: C64 = qi.iter().zip(v.iter()).map(|(q, x)| q.conj() * x).sum();
                    for (x, q) in v.iter_mut().zip(qi) {
                        *x -= proj * q;
                    }
                }
            }
            let norm = cols[j].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for x in cols[j].iter_mut() {
                *x /= norm;
            }
        }
        if ok {
            let mut q = CMatrix::zeros(m, m);
            for (c, col) in cols.iter().enumerate() {
                q.set_column(c, col);
            }
            return Ok(q);
        }
    }
}

/// Solves `a * x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(CalibError::shape("solve", a.shape_str(), "square matrix"));
    }
    if b.rows != n {
        return Err(CalibError::shape("solve", a.shape_str(), b.shape_str()));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| lu[(i, k)].norm().total_cmp(&lu[(j, k)].norm()))
            .unwrap_or(k);
        if lu[(pivot, k)].norm() <= 1e-14 * scale {
            return Err(CalibError::Degenerate(format!(
                "singular matrix at column {k}"
            )));
        }
        if pivot != k {
            for c in 0..n {
                let tmp = lu[(k, c)];
                lu[(k, c)] = lu[(pivot, c)];
                lu[(pivot, c)] = tmp;
            }
            for c in 0..x.cols {
                let tmp = x[(k, c)];
                x[(k, c)] = x[(pivot, c)];
                x[(pivot, c)] = tmp;
            }
        }
        let inv = ONE / lu[(k, k)];
        for i in k + 1..n {
            let f = lu[(i, k)] * inv;
            if f == ZERO {
                continue;
            }
            for c in k..n {
                let v = lu[(k, c)];
                lu[(i, c)] -= f * v;
            }
            for c in 0..x.cols {
                let v = x[(k, c)];
                x[(i, c)] -= f * v;
            }
        }
    }
    for k in (0..n).rev() {
        for c in 0..x.cols {
            let mut acc = x[(k, c)];
            for j in k + 1..n {
                acc -= lu[(k, j)] * x[(j, c)];
            }
            x[(k, c)] = acc / lu[(k, k)];
        }
    }
    Ok(x)
}

pub fn inverse(a: &CMatrix) -> Result<CMatrix> {
    solve(a, &CMatrix::identity(a.rows))
}

/// Solves `a * x = b` for Hermitian positive definite `a` via Cholesky.
///
/// Returns the solution together with a condition estimate, the squared ratio of
/// the largest to the smallest Cholesky pivot (a lower bound on the 2-norm
/// condition number). A non-positive pivot reports an infinite estimate.
pub fn cholesky_solve(a: &CMatrix, b: &CMatrix) -> Result<(CMatrix, f64)> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(CalibError::shape("cholesky_solve", a.shape_str(), b.shape_str()));
    }
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d.is_nan() || d <= 0.0 {
            return Ok((CMatrix::zeros(n, b.cols), f64::INFINITY));
        }
        let ljj = d.sqrt();
        l[(j, j)] = C64::new(ljj, 0.0);
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / ljj;
        }
    }
    let pivots: Vec<f64> = (0..n).map(|i| l[(i, i)].re).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    let min = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = (max / min).powi(2);

    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)].conj() * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok((x, condition))
}

/// Formats a float with 17 significant digits, enough for a bit-exact round trip.
pub fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{x:.16e}")
}

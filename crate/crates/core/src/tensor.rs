//! Dense linear algebra substrate: row-major matrices, Cholesky factorization
//! with a jitter escalation policy, SPD solves and inverses, Kronecker and
//! vectorisation utilities, and seeded Gaussian sampling on independent
//! counter-based streams.
//!
//! Storage is row-major throughout the crate. `vec`/`unvec` are defined
//! mathematically (column stacking) independent of storage order, so the usual
//! Kronecker identities such as `vec(AXB) = (Bᵀ⊗A)·vec(X)` hold verbatim.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check before Cholesky factorization.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Relative base jitter used when a bare factorization fails.
pub const JITTER_BASE_REL: f64 = 1e-9;
/// Relative jitter cap; escalation beyond this is an error.
pub const JITTER_CAP_REL: f64 = 1e-3;

/// Dense real matrix with row-major storage.
///
/// Arithmetic helpers panic on shape mismatch (programmer error); numerical
/// failures such as loss of positive definiteness surface as [`Error`] from
/// the factorization entry points.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self.get(i, j))?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data; errors on length mismatch or
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                context: "Matrix::new",
                detail: format!("{}x{} needs {} entries, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = scale;
        }
        m
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

    /// Row-major convenience constructor for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
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

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline(always)]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    fn assert_same_shape(&self, other: &Matrix, context: &str) {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "{}: shape {}x{} vs {}x{}",
            context,
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.assert_same_shape(other, "Matrix::add");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.assert_same_shape(other, "Matrix::sub");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_in_place(&mut self, other: &Matrix) {
        self.assert_same_shape(other, "Matrix::add_in_place");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// self ← decay·self + w·src, the fused EMA kernel.
    pub fn ema_in_place(&mut self, decay: f64, src: &Matrix, w: f64) {
        self.assert_same_shape(src, "Matrix::ema_in_place");
        for (a, b) in self.data.iter_mut().zip(&src.data) {
            *a = decay * *a + w * b;
        }
    }

    /// A·B with an ikj kernel (contiguous inner loop over B's rows).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert!(
            self.cols == other.rows,
            "Matrix::matmul: {}x{} by {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                for j in 0..other.cols {
                    orow[j] += aik * brow[j];
                }
            }
        }
        out
    }

    /// selfᵀ·B accumulated over shared rows; the workhorse for XᵀX and XᵀY.
    pub fn tr_matmul(&self, other: &Matrix) -> Matrix {
        assert!(
            self.rows == other.rows,
            "Matrix::tr_matmul: {}x{} by {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += aki * brow[j];
                }
            }
        }
        out
    }

    /// self·Bᵀ via row dot products.
    pub fn matmul_tr(&self, other: &Matrix) -> Matrix {
        assert!(
            self.cols == other.cols,
            "Matrix::matmul_tr: {}x{} by {}x{}ᵀ",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += arow[k] * brow[k];
                }
                out.data[i * other.rows + j] = s;
            }
        }
        out
    }

    /// self·v for a vector v.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert!(self.cols == v.len(), "Matrix::matvec: {}x{} by {}", self.rows, self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// selfᵀ·v.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert!(self.rows == v.len(), "Matrix::tr_matvec: {}x{} by {}", self.rows, self.cols, v.len());
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let vi = v[i];
            for j in 0..self.cols {
                out[j] += row[j] * vi;
            }
        }
        out
    }

    /// (self + selfᵀ)/2 for square matrices.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols, "Matrix::symmetrized needs a square matrix");
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.assert_same_shape(other, "Matrix::max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}

/// Kronecker product A⊗B: block (i,j) equals A[i,j]·B.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    let oc = out.cols;
    for i in 0..a.rows() {
        for k in 0..b.rows() {
            let orow = &mut out.data[(i * b.rows() + k) * oc..(i * b.rows() + k + 1) * oc];
            let brow = b.row(k);
            for j in 0..a.cols() {
                let aij = a.get(i, j);
                let seg = &mut orow[j * b.cols()..(j + 1) * b.cols()];
                for (o, &bv) in seg.iter_mut().zip(brow) {
                    *o = aij * bv;
                }
            }
        }
    }
    out
}

/// Mathematical vectorisation: stacks columns in order (independent of the
/// row-major storage).
pub fn vec_cols(a: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.rows() * a.cols());
    for j in 0..a.cols() {
        for i in 0..a.rows() {
            out.push(a.get(i, j));
        }
    }
    out
}

/// Inverse of [`vec_cols`]: reshapes a column-stacked vector into rows×cols.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(Error::Shape {
            context: "unvec",
            detail: format!("{} entries cannot fill {}x{}", v.len(), rows, cols),
        });
    }
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            out.set(i, j, v[j * rows + i]);
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    lower: Matrix,
    dim: usize,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log det A = 2·Σ log L[i,i].
    pub fn logdet(&self) -> f64 {
        (0..self.dim).map(|i| self.lower.get(i, i).ln()).sum::<f64>() * 2.0
    }

    /// Factor of s²·A obtained by scaling the lower triangle; s must be
    /// positive to preserve the positive diagonal.
    pub fn scaled(&self, s: f64) -> CholeskyFactor {
        assert!(s > 0.0, "CholeskyFactor::scaled requires a positive factor, got {s}");
        CholeskyFactor { lower: self.lower.scale(s), dim: self.dim }
    }

    /// Solves A·x = b.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim, "CholeskyFactor::solve_vec length mismatch");
        let n = self.dim;
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = l.row(i);
            let mut s = y[i];
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l.get(k, i) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        y
    }

    /// Solves A·X = B column-wise.
    pub fn solve_mat(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim, "CholeskyFactor::solve_mat shape mismatch");
        let y = self.half_solve_mat(b);
        self.half_solve_tr_mat(&y)
    }

    /// L⁻¹·B (forward substitution on every column).
    pub fn half_solve_mat(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim, "CholeskyFactor::half_solve_mat shape mismatch");
        let n = self.dim;
        let c = b.cols();
        let l = &self.lower;
        let mut out = b.clone();
        for i in 0..n {
            let lrow = l.row(i);
            // out[i,:] = (b[i,:] − Σ_{k<i} L[i,k]·out[k,:]) / L[i,i]
            for k in 0..i {
                let lik = lrow[k];
                if lik == 0.0 {
                    continue;
                }
                let (head, tail) = out.data.split_at_mut(i * c);
                let okrow = &head[k * c..(k + 1) * c];
                let oirow = &mut tail[..c];
                for j in 0..c {
                    oirow[j] -= lik * okrow[j];
                }
            }
            let inv = 1.0 / lrow[i];
            for v in out.row_mut(i) {
                *v *= inv;
            }
        }
        out
    }

    /// L⁻ᵀ·B (back substitution on every column).
    pub fn half_solve_tr_mat(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim, "CholeskyFactor::half_solve_tr_mat shape mismatch");
        let n = self.dim;
        let c = b.cols();
        let l = &self.lower;
        let mut out = b.clone();
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l.get(k, i);
                if lki == 0.0 {
                    continue;
                }
                let (head, tail) = out.data.split_at_mut(k * c);
                let oirow = &mut head[i * c..(i + 1) * c];
                let okrow = &tail[..c];
                for j in 0..c {
                    oirow[j] -= lki * okrow[j];
                }
            }
            let inv = 1.0 / l.get(i, i);
            for v in out.row_mut(i) {
                *v *= inv;
            }
        }
        out
    }

    /// Lᵀ·B (triangular product, used for quadratic forms MᵀA M = (LᵀM)ᵀ(LᵀM)).
    pub fn tr_mul_mat(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim, "CholeskyFactor::tr_mul_mat shape mismatch");
        let n = self.dim;
        let c = b.cols();
        let mut out = Matrix::zeros(n, c);
        for k in 0..n {
            let lrow = self.lower.row(k);
            let brow = b.row(k);
            // Lᵀ[i,k] = L[k,i] is nonzero only for i ≤ k.
            for i in 0..=k {
                let lki = lrow[i];
                if lki == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += lki * brow[j];
                }
            }
        }
        out
    }

    /// L·B (triangular product, used by the matrix-normal sampler).
    pub fn mul_mat(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim, "CholeskyFactor::mul_mat shape mismatch");
        let n = self.dim;
        let c = b.cols();
        let mut out = Matrix::zeros(n, c);
        for i in 0..n {
            let lrow = self.lower.row(i);
            let orow = &mut out.data[i * c..(i + 1) * c];
            for k in 0..=i {
                let lik = lrow[k];
                if lik == 0.0 {
                    continue;
                }
                let brow = &b.data[k * c..(k + 1) * c];
                for j in 0..c {
                    orow[j] += lik * brow[j];
                }
            }
        }
        out
    }

    /// B·Lᵀ (right product with the transposed factor).
    pub fn mul_tr_right(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.cols(), self.dim, "CholeskyFactor::mul_tr_right shape mismatch");
        let n = self.dim;
        let mut out = Matrix::zeros(b.rows(), n);
        for i in 0..b.rows() {
            let brow = b.row(i);
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                let lrow = self.lower.row(j);
                let mut s = 0.0;
                for k in 0..=j {
                    s += brow[k] * lrow[k];
                }
                orow[j] = s;
            }
        }
        out
    }

    /// A⁻¹ = (L⁻¹)ᵀ(L⁻¹), symmetric by construction.
    pub fn inverse(&self) -> Matrix {
        let linv = self.half_solve_mat(&Matrix::identity(self.dim));
        linv.tr_matmul(&linv)
    }
}

fn cholesky_attempt(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j) + if i == j { jitter } else { 0.0 };
            {
                let (ljrow, lirow) = if i == j {
                    (l.row(j), l.row(j))
                } else {
                    (l.row(j), l.row(i))
                };
                for k in 0..j {
                    s -= lirow[k] * ljrow[k];
                }
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Cholesky factorization with the repo jitter policy.
///
/// The bare factorization is attempted first; on failure, jitter·I is added
/// starting from `base_jitter` (or the relative default 1e-9·mean(diag) when
/// `base_jitter <= 0`) and escalated geometrically by 10 up to the cap
/// 1e-3·mean(diag). Inputs are checked for symmetry (relative tolerance 1e-8)
/// and symmetrized before factorization.
pub fn cholesky(a: &Matrix, base_jitter: f64) -> Result<CholeskyFactor> {
    if a.rows() != a.cols() {
        return Err(Error::Shape {
            context: "cholesky",
            detail: format!("matrix is {}x{}", a.rows(), a.cols()),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Ok(CholeskyFactor { lower: Matrix::zeros(0, 0), dim: 0 });
    }
    let scale = a.max_abs();
    let mut max_asym = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            max_asym = max_asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    let sym_tol = SYMMETRY_TOL * scale.max(1e-300);
    if max_asym > sym_tol {
        return Err(Error::NotSymmetric { max_asym, tol: sym_tol });
    }
    let sym = a.symmetrized();
    let diag_scale = {
        let d: f64 = sym.diag().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        if d > 0.0 {
            d
        } else {
            1.0
        }
    };
    if let Some(lower) = cholesky_attempt(&sym, 0.0) {
        return Ok(CholeskyFactor { lower, dim: n });
    }
    let mut jitter = if base_jitter > 0.0 { base_jitter } else { JITTER_BASE_REL * diag_scale };
    let cap = JITTER_CAP_REL * diag_scale;
    let mut last_jitter = 0.0;
    while jitter <= cap * (1.0 + 1e-12) {
        last_jitter = jitter;
        if let Some(lower) = cholesky_attempt(&sym, jitter) {
            return Ok(CholeskyFactor { lower, dim: n });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { dim: n, jitter: last_jitter })
}

/// A⁻¹ for SPD A via Cholesky (default jitter policy).
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    Ok(cholesky(a, 0.0)?.inverse())
}

/// Serializable snapshot of an [`RngStream`] position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// Counter-based random stream: identical (seed, stream id, draw index)
/// yields identical output across runs, and the exact position round-trips
/// through [`RngState`] for checkpointing.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn shuffle(&mut self, xs: &mut [usize]) {
        xs.shuffle(&mut self.rng);
    }

    pub fn state(&self) -> RngState {
        let pos = self.rng.get_word_pos();
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut s = RngStream::new(state.seed, state.stream);
        let pos = ((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128;
        s.rng.set_word_pos(pos);
        s
    }
}

/// rows×cols matrix of i.i.d. standard normal entries, filled in row-major
/// order; deterministic under a fixed stream position.
pub fn sample_gaussian(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
        sample_gaussian(rng, rows, cols)
    }

    fn random_spd(rng: &mut RngStream, n: usize) -> Matrix {
        let a = random_matrix(rng, n, n);
        a.matmul_tr(&a).add(&Matrix::identity(n))
    }

    #[test]
    fn kron_identity_left_is_block_diagonal() {
        let b = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let k = kron(&Matrix::identity(2), &b);
        let expect = Matrix::from_rows(&[
            &[1.0, 2.0, 0.0, 0.0],
            &[3.0, 4.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 2.0],
            &[0.0, 0.0, 3.0, 4.0],
        ]);
        assert_eq!(k, expect, "kron(I2, B) must be block-diagonal");
    }

    #[test]
    fn kron_hand_unrolled_blocks() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let k = kron(&a, &b);
        let expect = Matrix::from_rows(&[
            &[0.0, 1.0, 0.0, 2.0],
            &[1.0, 0.0, 2.0, 0.0],
            &[0.0, 3.0, 0.0, 4.0],
            &[3.0, 0.0, 4.0, 0.0],
        ]);
        assert_eq!(k, expect, "kron blocks must equal a[i,j]·B");
    }

    #[test]
    fn kron_mixed_product_rule() {
        let mut rng = RngStream::new(7, 0);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 2, 2);
        let c = random_matrix(&mut rng, 2, 3);
        let d = random_matrix(&mut rng, 2, 2);
        let lhs = kron(&a, &b).matmul(&kron(&c, &d));
        let rhs = kron(&a.matmul(&c), &b.matmul(&d));
        assert!(
            lhs.max_abs_diff(&rhs) <= 1e-12,
            "(A⊗B)(C⊗D) must equal (AC)⊗(BD), max diff {}",
            lhs.max_abs_diff(&rhs)
        );
    }

    #[test]
    fn vec_stacks_columns() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(vec_cols(&a), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn unvec_round_trips() {
        let mut rng = RngStream::new(3, 0);
        let a = random_matrix(&mut rng, 4, 3);
        let back = unvec(&vec_cols(&a), 4, 3).unwrap();
        assert_eq!(a, back);
        assert!(unvec(&[1.0, 2.0], 3, 3).is_err(), "length mismatch must error");
    }

    #[test]
    fn vec_of_product_matches_kron_action() {
        let mut rng = RngStream::new(11, 0);
        let a = random_matrix(&mut rng, 2, 3);
        let x = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 2, 2);
        let lhs = vec_cols(&a.matmul(&x).matmul(&b));
        let rhs = kron(&b.transpose(), &a).matvec(&vec_cols(&x));
        let diff = lhs.iter().zip(&rhs).fold(0.0_f64, |m, (u, v)| m.max((u - v).abs()));
        assert!(diff <= 1e-12, "vec(AXB) must equal (Bᵀ⊗A)vec(X), max diff {diff}");
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert!(f.lower().max_abs_diff(&Matrix::identity(3)) == 0.0);
    }

    #[test]
    fn cholesky_of_diagonal_takes_square_roots() {
        let a = Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 9.0]]);
        let f = cholesky(&a, 0.0).unwrap();
        let expect = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]);
        assert!(f.lower().max_abs_diff(&expect) == 0.0);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..20 {
            let a = random_spd(&mut rng, 5);
            let f = cholesky(&a, 0.0).unwrap();
            let rec = f.lower().matmul_tr(f.lower());
            let rel = rec.max_abs_diff(&a) / a.max_abs();
            assert!(rel <= 1e-10, "L·Lᵀ must reconstruct A, relative error {rel}");
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric_input() {
        let a = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]);
        match cholesky(&a, 0.0) {
            Err(Error::NotSymmetric { .. }) => {}
            other => panic!("expected NotSymmetric, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_jitter_rescues_semidefinite_input() {
        // Rank-1 PSD matrix: bare factorization fails, jitter succeeds.
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let f = cholesky(&a, 0.0).unwrap();
        let rec = f.lower().matmul_tr(f.lower());
        assert!(rec.max_abs_diff(&a) <= 2e-3, "jitter stays below the relative cap");
    }

    #[test]
    fn cholesky_fails_beyond_jitter_cap() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]);
        match cholesky(&a, 0.0) {
            Err(Error::NotPositiveDefinite { .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn spd_inverse_identity_and_diagonal() {
        assert!(spd_inverse(&Matrix::identity(4)).unwrap().max_abs_diff(&Matrix::identity(4)) <= 1e-15);
        let a = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 5.0]]);
        let inv = spd_inverse(&a).unwrap();
        let expect = Matrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.2]]);
        assert!(inv.max_abs_diff(&expect) <= 1e-15);
    }

    #[test]
    fn spd_inverse_residual_is_small() {
        let mut rng = RngStream::new(13, 0);
        for _ in 0..20 {
            let a = random_spd(&mut rng, 6);
            let inv = spd_inverse(&a).unwrap();
            let residual = a.matmul(&inv).max_abs_diff(&Matrix::identity(6));
            assert!(residual <= 1e-8, "A·A⁻¹ − I max-abs {residual}");
        }
    }

    #[test]
    fn cholesky_solves_match_inverse() {
        let mut rng = RngStream::new(17, 0);
        let a = random_spd(&mut rng, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let f = cholesky(&a, 0.0).unwrap();
        let x = f.solve_mat(&b);
        assert!(a.matmul(&x).max_abs_diff(&b) <= 1e-10, "A·(A⁻¹B) must return B");
        let half = f.half_solve_mat(&b);
        assert!(f.lower().matmul(&half).max_abs_diff(&b) <= 1e-10, "L·(L⁻¹B) must return B");
        let v: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let xv = f.solve_vec(&v);
        let back = a.matvec(&xv);
        let diff = back.iter().zip(&v).fold(0.0_f64, |m, (u, w)| m.max((u - w).abs()));
        assert!(diff <= 1e-10);
    }

    #[test]
    fn triangular_products_match_dense() {
        let mut rng = RngStream::new(19, 0);
        let a = random_spd(&mut rng, 4);
        let f = cholesky(&a, 0.0).unwrap();
        let b = random_matrix(&mut rng, 4, 3);
        assert!(f.mul_mat(&b).max_abs_diff(&f.lower().matmul(&b)) == 0.0 || f.mul_mat(&b).max_abs_diff(&f.lower().matmul(&b)) <= 1e-14);
        assert!(f.tr_mul_mat(&b).max_abs_diff(&f.lower().transpose().matmul(&b)) <= 1e-14);
        let c = random_matrix(&mut rng, 3, 4);
        assert!(f.mul_tr_right(&c).max_abs_diff(&c.matmul(&f.lower().transpose())) <= 1e-14);
        let half_tr = f.half_solve_tr_mat(&b);
        assert!(f.lower().transpose().matmul(&half_tr).max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn logdet_matches_known_value() {
        let a = Matrix::from_rows(&[&[4.0, 0.0], &[0.0, 9.0]]);
        let f = cholesky(&a, 0.0).unwrap();
        assert!((f.logdet() - 36.0_f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn sample_gaussian_is_deterministic_per_stream() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let ma = sample_gaussian(&mut a, 4, 5);
        let mb = sample_gaussian(&mut b, 4, 5);
        assert_eq!(ma, mb, "same (seed, stream, draw index) must agree bitwise");
    }

    #[test]
    fn sample_gaussian_streams_are_distinct() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        let ma = sample_gaussian(&mut a, 4, 5);
        let mb = sample_gaussian(&mut b, 4, 5);
        assert!(ma.max_abs_diff(&mb) > 0.0, "different stream ids must decouple draws");
    }

    #[test]
    fn sample_gaussian_moments() {
        let mut rng = RngStream::new(1, 0);
        let m = sample_gaussian(&mut rng, 1000, 1000);
        let n = (m.rows() * m.cols()) as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.005, "sample mean {mean} outside ±0.005");
        assert!((var - 1.0).abs() <= 0.01, "sample variance {var} outside 1±0.01");
    }

    #[test]
    fn rng_state_round_trips_mid_sequence() {
        let mut rng = RngStream::new(9, 2);
        for _ in 0..37 {
            rng.standard_normal();
        }
        let state = rng.state();
        let next: Vec<f64> = (0..10).map(|_| rng.standard_normal()).collect();
        let mut restored = RngStream::restore(&state);
        let replay: Vec<f64> = (0..10).map(|_| restored.standard_normal()).collect();
        assert_eq!(next, replay, "restored stream must continue bitwise-identically");
    }

    #[test]
    fn matmul_kernels_agree_with_naive_loops() {
        let mut rng = RngStream::new(23, 0);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 6, 5);
        let naive = Matrix::from_fn(4, 5, |i, j| (0..6).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert!(a.matmul(&b).max_abs_diff(&naive) <= 1e-13);
        let c = random_matrix(&mut rng, 4, 3);
        assert!(a.tr_matmul(&c).max_abs_diff(&a.transpose().matmul(&c)) <= 1e-13);
        let d = random_matrix(&mut rng, 5, 6);
        assert!(a.matmul_tr(&d).max_abs_diff(&a.matmul(&d.transpose())) <= 1e-13);
        let v: Vec<f64> = (0..6).map(|i| 0.5 * i as f64 - 1.0).collect();
        let mv = a.matvec(&v);
        let mv_ref: Vec<f64> = (0..4).map(|i| (0..6).map(|k| a.get(i, k) * v[k]).sum()).collect();
        let diff = mv.iter().zip(&mv_ref).fold(0.0_f64, |m, (u, w)| m.max((u - w).abs()));
        assert!(diff <= 1e-13);
    }

    #[test]
    fn serde_round_trip_is_bitwise() {
        let mut rng = RngStream::new(31, 0);
        let a = random_matrix(&mut rng, 3, 7);
        let json = serde_json::to_string(&a).unwrap();
        let back: Matrix = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back, "shortest-representation f64 JSON must round-trip bitwise");
    }
}

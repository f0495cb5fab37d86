//! Matrices and iterative solvers used by the cell, direct and effective modules.
//!
//! Matrix-vector products parallelize over rows; each row is reduced in a fixed
//! order, so results do not depend on the thread count.

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows below this count are processed sequentially.
const PAR_ROWS: usize = 256;

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn for_each_row(y: &mut [f64], f: impl Fn(usize) -> f64 + Sync + Send) {
    if y.len() >= PAR_ROWS {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = f(i));
    } else {
        y.iter_mut().enumerate().for_each(|(i, yi)| *yi = f(i));
    }
}

/// Row-major dense square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        DenseMatrix { n, data }
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.data)
    }
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for_each_row(y, |i| dot(self.row(i), x));
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from per-row `(column, value)` lists; each list must be
    /// sorted by column.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nnz = rows.iter().map(Vec::len).sum();
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        indptr.push(0);
        for row in &rows {
            for &(j, v) in row {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr {
            n_rows: rows.len(),
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter()
                    .position(|&j| j == i)
                    .map_or(0.0, |k| vals[k])
            })
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n_rows.max(self.n_cols));
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn transpose(&self) -> Csr {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_cols];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                rows[j].push((i, v));
            }
        }
        Csr::from_rows(self.n_rows, rows)
    }

    /// `alpha * I + beta * self`, keeping the sparsity pattern plus the diagonal.
    pub fn scaled_shift(&self, alpha: f64, beta: f64) -> Csr {
        let rows = (0..self.n_rows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                let mut row: Vec<(usize, f64)> =
                    cols.iter().zip(vals).map(|(&j, &v)| (j, beta * v)).collect();
                match row.binary_search_by_key(&i, |e| e.0) {
                    Ok(k) => row[k].1 += alpha,
                    Err(k) => row.insert(k, (i, alpha)),
                }
                row
            })
            .collect();
        Csr::from_rows(self.n_cols, rows)
    }
}

impl LinearOperator for Csr {
    fn dim(&self) -> usize {
        self.n_rows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for_each_row(y, |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
        });
    }
}

/// `shift * I - inner`, the nonnegative matrix on which Perron iteration runs.
pub struct ShiftedNegation<'a, A: ?Sized> {
    pub shift: f64,
    pub inner: &'a A,
}

impl<A: LinearOperator + ?Sized> LinearOperator for ShiftedNegation<'_, A> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.inner.apply(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = self.shift * xi - *yi;
        }
    }
}

/// `inner + shift * I`.
pub struct PlusIdentity<'a, A: ?Sized> {
    pub shift: f64,
    pub inner: &'a A,
}

impl<A: LinearOperator + ?Sized> LinearOperator for PlusIdentity<'_, A> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.inner.apply(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += self.shift * xi;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerronResult {
    /// Spectral radius estimate.
    pub rho: f64,
    /// Positive eigenvector, infinity-norm 1.
    pub vector: Vec<f64>,
    /// `||P v - rho v||_inf / ||v||_inf`.
    pub residual: f64,
    pub iterations: usize,
}

/// How often the vector iterate is extrapolated.
pub const AITKEN_PERIOD: usize = 16;

/// Power iteration for the Perron root of an entrywise nonnegative operator.
///
/// Starts from the all-ones vector, normalizes in the infinity norm, and
/// estimates the root by the Rayleigh quotient each sweep. Every
/// [`AITKEN_PERIOD`] sweeps the iterate is extrapolated along the last
/// difference using the observed contraction ratio; the extrapolation is kept
/// only if it stays positive and lowers the residual.
pub fn perron<A: LinearOperator + ?Sized>(op: &A, tol: f64, max_iter: usize) -> Result<PerronResult> {
    perron_from(op, vec![1.0; op.dim()], tol, max_iter)
}

/// [`perron`] from a given positive start vector.
pub fn perron_from<A: LinearOperator + ?Sized>(
    op: &A,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<PerronResult> {
    let n = op.dim();
    if start.len() != n || start.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("start vector must be positive".into()));
    }
    let mut x = start;
    let mut y = vec![0.0; n];
    let mut prev: Vec<f64> = x.clone();
    let mut prev2: Vec<f64> = x.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        op.apply(&x, &mut y);
        let (rho, r) = rayleigh_residual(&x, &y);
        residual = r;
        if r <= tol {
            return finish(x, rho, r, it);
        }
        let norm = norm_inf(&y);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Reducible(
                "iteration collapsed to zero; the kernel part does not connect the grid".into(),
            ));
        }
        std::mem::swap(&mut prev2, &mut prev);
        std::mem::swap(&mut prev, &mut x);
        x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi = yi / norm);

        if it % AITKEN_PERIOD == 0 {
            if let Some(cand) = extrapolate(&x, &prev, &prev2) {
                op.apply(&x, &mut y);
                let (_, r_cur) = rayleigh_residual(&x, &y);
                op.apply(&cand, &mut y);
                let (_, r_new) = rayleigh_residual(&cand, &y);
                if r_new < r_cur {
                    x = cand;
                }
            }
        }
    }
    Err(Error::NonConvergence {
        what: "power iteration",
        iterations: max_iter,
        residual,
    })
}

fn rayleigh_residual(x: &[f64], y: &[f64]) -> (f64, f64) {
    let rho = dot(x, y) / dot(x, x);
    let xn = norm_inf(x);
    let r = x
        .iter()
        .zip(y)
        .fold(0.0f64, |m, (xi, yi)| m.max((yi - rho * xi).abs()));
    (rho, r / xn)
}

fn finish(mut x: Vec<f64>, rho: f64, residual: f64, iterations: usize) -> Result<PerronResult> {
    let norm = norm_inf(&x);
    x.iter_mut().for_each(|v| *v /= norm);
    if x.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Reducible(
            "Perron vector has a nonpositive component".into(),
        ));
    }
    Ok(PerronResult {
        rho,
        vector: x,
        residual,
        iterations,
    })
}

fn extrapolate(x: &[f64], prev: &[f64], prev2: &[f64]) -> Option<Vec<f64>> {
    let d1: Vec<f64> = x.iter().zip(prev).map(|(a, b)| a - b).collect();
    let n1 = norm2(&d1);
    let n0 = x
        .iter()
        .zip(prev)
        .zip(prev2)
        .map(|((_, b), c)| (b - c) * (b - c))
        .sum::<f64>()
        .sqrt();
    if n0 == 0.0 || n1 == 0.0 {
        return None;
    }
    let ratio = n1 / n0;
    if !(ratio > 0.0 && ratio < 0.999) {
        return None;
    }
    let factor = ratio / (1.0 - ratio);
    let cand: Vec<f64> = x.iter().zip(&d1).map(|(a, d)| a + factor * d).collect();
    if cand.iter().all(|&v| v > 0.0) {
        let norm = norm_inf(&cand);
        Some(cand.into_iter().map(|v| v / norm).collect())
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    /// Final `||b - A x||_2 / ||b||_2`.
    pub relative_residual: f64,
    pub iterations: usize,
}

/// Restarted GMRES. When `project` is given, the right-hand side and every
/// Krylov vector are passed through it, so the solve stays in its range (used
/// for singular systems whose null space the projection removes).
pub fn gmres<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
    project: Option<&dyn Fn(&mut [f64])>,
) -> Result<SolveReport> {
    let n = op.dim();
    let proj = |v: &mut [f64]| {
        if let Some(p) = project {
            p(v)
        }
    };
    let mut rhs = b.to_vec();
    proj(&mut rhs);
    let bnorm = norm2(&rhs);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(SolveReport {
            solution: x,
            relative_residual: 0.0,
            iterations: 0,
        });
    }
    let mut total = 0;
    let mut ax = vec![0.0; n];
    while total < max_iter {
        op.apply(&x, &mut ax);
        let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        proj(&mut r);
        let beta = norm2(&r);
        if beta / bnorm <= tol {
            break;
        }
        let m = restart.min(max_iter - total).max(1);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut hess = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut w = vec![0.0; n];
            op.apply(&basis[k], &mut w);
            proj(&mut w);
            // Modified Gram-Schmidt, applied twice for stability.
            for _ in 0..2 {
                for (j, v) in basis.iter().enumerate() {
                    let h = dot(&w, v);
                    hess[j][k] += h;
                    w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= h * vi);
                }
            }
            let wn = norm2(&w);
            hess[k + 1][k] = wn;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let denom = hess[k][k].hypot(hess[k + 1][k]);
            cs[k] = hess[k][k] / denom;
            sn[k] = hess[k + 1][k] / denom;
            hess[k][k] = denom;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            total += 1;
            if g[k + 1].abs() / bnorm <= tol || wn == 0.0 {
                break;
            }
            basis.push(w.into_iter().map(|v| v / wn).collect());
        }
        let mut yk = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| hess[i][j] * yk[j]).sum();
            yk[i] = (g[i] - s) / hess[i][i];
        }
        for (j, c) in yk.iter().enumerate() {
            x.iter_mut().zip(&basis[j]).for_each(|(xi, vi)| *xi += c * vi);
        }
        proj(&mut x);
    }
    op.apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    proj(&mut r);
    let true_rel = norm2(&r) / bnorm;
    if true_rel > tol * 10.0 {
        return Err(Error::NonConvergence {
            what: "GMRES",
            iterations: total,
            residual: true_rel,
        });
    }
    Ok(SolveReport {
        solution: x,
        relative_residual: true_rel,
        iterations: total,
    })
}

/// Conjugate gradients for symmetric positive definite operators.
pub fn cg<A: LinearOperator + ?Sized>(op: &A, b: &[f64], tol: f64, max_iter: usize) -> Result<SolveReport> {
    let n = op.dim();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(SolveReport {
            solution: x,
            relative_residual: 0.0,
            iterations: 0,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, ai)| *ri -= alpha * ai);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * bnorm {
            return Ok(SolveReport {
                solution: x,
                relative_residual: rr_new.sqrt() / bnorm,
                iterations: it,
            });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p.iter_mut().zip(&r).for_each(|(pi, ri)| *pi = ri + beta * *pi);
    }
    Err(Error::NonConvergence {
        what: "conjugate gradients",
        iterations: max_iter,
        residual: rr.sqrt() / bnorm,
    })
}

/// Cholesky factor of a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// Row `i` holds `L[i, i-bw..=i]`.
    data: Vec<f64>,
}

impl BandedCholesky {
    /// Factors the matrix given by `entry(i, j)` for `j` in `i-bw..=i`.
    pub fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = entry(i, j);
                for k in k0..j {
                    s -= data[i * w + (k + bw - i)] * data[j * w + (k + bw - j)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite { min_eigenvalue: s });
                    }
                    data[i * w + bw] = s.sqrt();
                } else {
                    data[i * w + (j + bw - i)] = s / data[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, data })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let s: f64 = (j0..i).map(|j| self.data[i * w + (j + bw - i)] * b[j]).sum();
            b[i] = (b[i] - s) / self.data[i * w + bw];
        }
        for i in (0..n).rev() {
            let j1 = (i + bw).min(n - 1);
            let s: f64 = (i + 1..=j1).map(|j| self.data[j * w + (i + bw - j)] * b[j]).sum();
            b[i] = (b[i] - s) / self.data[i * w + bw];
        }
    }
}

/// LU factors of a band matrix without pivoting, for diagonally dominant systems.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    /// Row `i` holds columns `i-bw..=i+bw`.
    data: Vec<f64>,
}

impl BandedLu {
    pub fn new(n: usize, bw: usize) -> Self {
        BandedLu {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn factor(&mut self) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::InvalidArgument("zero pivot in banded LU".into()));
            }
            for i in k + 1..=(k + bw).min(n - 1) {
                let li = self.idx(i, k);
                let l = self.data[li] / pivot;
                self.data[li] = l;
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=(k + bw).min(n - 1) {
                    let u = self.data[self.idx(k, j)];
                    let t = self.idx(i, j);
                    self.data[t] -= l * u;
                }
            }
        }
        Ok(())
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let s: f64 = (j0..i).map(|j| self.data[self.idx(i, j)] * b[j]).sum();
            b[i] -= s;
        }
        for i in (0..n).rev() {
            let j1 = (i + bw).min(n - 1);
            let s: f64 = (i + 1..=j1).map(|j| self.data[self.idx(i, j)] * b[j]).sum();
            b[i] = (b[i] - s) / self.data[self.idx(i, i)];
        }
    }
}

/// All eigenvalues of a dense matrix, sorted by increasing real part.
pub fn dense_eigenvalues(m: &DenseMatrix) -> Vec<Complex<f64>> {
    let mat = faer::Mat::<f64>::from_fn(m.n, m.n, |i, j| m.get(i, j));
    let mut ev: Vec<Complex<f64>> = mat
        .eigenvalues::<faer::complex_native::c64>()
        .into_iter()
        .map(|c| Complex::new(c.re, c.im))
        .collect();
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    ev
}

/// Smallest real part of the spectrum of a dense Z-matrix (nonpositive off the
/// diagonal) from full decompositions.
///
/// A first decomposition locates the bottom; dense inverse iteration then gives
/// its right and left eigenvectors `u`, `w`, and the spectrum is recomputed for
/// `D^-1 M D` with `D = diag(sqrt(u/w))`. The similarity is exact; it removes the
/// exponential grading of tilted operators that otherwise costs the plain
/// decomposition several digits.
pub fn dense_bottom_real(m: &DenseMatrix) -> f64 {
    let first = dense_eigenvalues(m)[0].re;
    let n = m.n;
    let offset = 1e-4 * first.abs().max(1.0);
    let shifted = DMatrix::from_fn(n, n, |i, j| m.get(i, j) - if i == j { first - offset } else { 0.0 });
    let (Some(u), Some(w)) = (
        inverse_iterate(&shifted),
        inverse_iterate(&shifted.transpose()),
    ) else {
        return first;
    };
    let g: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 0.5 * (a.ln() - b.ln())).collect();
    let scaled = DenseMatrix {
        n,
        data: (0..n * n).map(|k| m.data[k] * (g[k % n] - g[k / n]).exp()).collect(),
    };
    dense_eigenvalues(&scaled)[0].re
}

/// Positive dominant vector of `a^-1` by 30 steps of inverse iteration.
fn inverse_iterate(a: &DMatrix<f64>) -> Option<Vec<f64>> {
    let lu = a.clone().lu();
    let mut x = nalgebra::DVector::from_element(a.nrows(), 1.0);
    for _ in 0..30 {
        x = lu.solve(&x)?;
        let norm = x.amax();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        x /= norm;
    }
    let v: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    v.iter().all(|&t| t > 0.0).then_some(v)
}

/// Eigenvalues of a symmetric dense matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[cfg(test)]
mod circulant_regression {
    use super::*;

    #[test]
    fn dense_eigenvalues_of_a_large_symmetric_circulant() {
        let n = 128;
        let mut m = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let k = (i as i64 - j as i64).rem_euclid(n as i64).min((j as i64 - i as i64).rem_euclid(n as i64));
                let z = k as f64 / n as f64;
                m.set(i, j, if i == j { 2.0 } else { 0.0 } - (-z * z / 2.0).exp() / n as f64);
            }
        }
        let ev = dense_eigenvalues(&m);
        assert_eq!(ev.len(), n);
        let rowsum: f64 = (0..n).map(|j| m.get(0, j)).sum();
        assert!(ev.iter().any(|c| (c.re - rowsum).abs() < 1e-10));
    }

    #[test]
    fn graded_drift_matrix_bottom_matches_closed_form() {
        // diag 2, off-diagonals -b e^{+-c}: similar to the symmetric case, so the
        // bottom is 2 - 2b cos(pi/(n+1)) while the eigenvectors are graded by e^{c n}.
        let (n, b, c) = (200, 0.9, 0.15);
        let mut m = DenseMatrix::zeros(n);
        for i in 0..n {
            m.set(i, i, 2.0);
            if i + 1 < n {
                m.set(i + 1, i, -b * f64::exp(c));
                m.set(i, i + 1, -b * f64::exp(-c));
            }
        }
        let exact = 2.0 - 2.0 * b * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((dense_bottom_real(&m) - exact).abs() < 1e-10);
    }
}

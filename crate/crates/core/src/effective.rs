//! Finite-difference discretization of `-sum_ij A_ij d_i d_j` with Dirichlet
//! conditions on a box, its lowest eigenvalues and resolvent.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{cg, dot, symmetric_eigenvalues, BandedCholesky, Csr, LinearOperator, PlusIdentity};
use crate::model::Domain;

/// Below this many unknowns the spectrum comes from a dense decomposition.
pub const DENSE_LIMIT: usize = 4096;
/// Budget `n * bw^2` for the banded Cholesky factorization.
const BANDED_BUDGET: f64 = 4e9;

/// Interior nodes of a box, `counts[i]` per axis, first axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGrid {
    pub domain: Domain,
    pub counts: Vec<usize>,
}

impl FdGrid {
    pub fn new(domain: Domain, counts: Vec<usize>) -> Result<Self> {
        if counts.len() != domain.dim() {
            return Err(Error::InvalidArgument("one node count per axis is required".into()));
        }
        if counts.iter().any(|&c| c < 3) {
            return Err(Error::InvalidArgument(format!("at least 3 interior nodes per axis, got {counts:?}")));
        }
        let grid = FdGrid { domain, counts };
        let h = grid.spacing();
        let (lo, hi) = h.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        if hi / lo > 8.0 {
            return Err(Error::InvalidArgument(format!(
                "grid anisotropy {:.3} exceeds 8",
                hi / lo
            )));
        }
        Ok(grid)
    }

    pub fn uniform(domain: Domain, n: usize) -> Result<Self> {
        let d = domain.dim();
        FdGrid::new(domain, vec![n; d])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.domain.width(k) / (self.counts[k] + 1) as f64)
            .collect()
    }

    pub fn multi_index(&self, k: usize) -> Vec<usize> {
        let mut rem = k;
        self.counts
            .iter()
            .map(|&c| {
                let i = rem % c;
                rem /= c;
                i
            })
            .collect()
    }

    pub fn node(&self, k: usize) -> Vec<f64> {
        let h = self.spacing();
        self.multi_index(k)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.domain.lower[a] + h[a] * (i + 1) as f64)
            .collect()
    }

    /// Linear index of `idx + shift`, or `None` outside the interior.
    fn shifted(&self, idx: &[usize], shift: &[(usize, i64)]) -> Option<usize> {
        let mut out = 0;
        let mut stride = 1;
        for (a, &c) in self.counts.iter().enumerate() {
            let mut v = idx[a] as i64;
            for &(axis, s) in shift {
                if axis == a {
                    v += s;
                }
            }
            if v < 0 || v >= c as i64 {
                return None;
            }
            out += v as usize * stride;
            stride *= c;
        }
        Some(out)
    }

    /// Half bandwidth of the stencil matrix in this ordering.
    pub fn bandwidth(&self) -> usize {
        let d = self.dim();
        let mut stride = 1;
        let mut strides = Vec::with_capacity(d);
        for &c in &self.counts {
            strides.push(stride);
            stride *= c;
        }
        match d {
            1 => 1,
            _ => strides[d - 1] + strides[d - 2],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EffectiveOperator {
    pub grid: FdGrid,
    pub a: Vec<Vec<f64>>,
    pub matrix: Csr,
}

impl LinearOperator for EffectiveOperator {
    fn dim(&self) -> usize {
        self.matrix.n_rows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.apply(x, y)
    }
}

fn check_spd(a: &[Vec<f64>]) -> Result<()> {
    let d = a.len();
    for i in 0..d {
        if a[i].len() != d {
            return Err(Error::InvalidArgument("coefficient matrix is not square".into()));
        }
        for j in 0..d {
            let scale = a[i][j].abs().max(a[j][i].abs()).max(1e-300);
            if (a[i][j] - a[j][i]).abs() > 1e-12 * scale {
                return Err(Error::InvalidArgument("coefficient matrix is not symmetric".into()));
            }
        }
    }
    let m = DMatrix::from_fn(d, d, |i, j| a[i][j]);
    let lmin = symmetric_eigenvalues(&m)[0];
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: lmin });
    }
    Ok(())
}

/// Three-point stencils for pure second derivatives and the four-point cross
/// stencil for mixed ones; Dirichlet neighbours are dropped.
pub fn assemble_effective(a: &[Vec<f64>], grid: &FdGrid) -> Result<EffectiveOperator> {
    let d = grid.dim();
    if a.len() != d {
        return Err(Error::InvalidArgument("coefficient matrix size does not match the grid".into()));
    }
    check_spd(a)?;
    let h = grid.spacing();
    let rows: Vec<Vec<(usize, f64)>> = (0..grid.len())
        .map(|k| {
            let idx = grid.multi_index(k);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(1 + 2 * d + 2 * d * d);
            let diag: f64 = (0..d).map(|i| 2.0 * a[i][i] / (h[i] * h[i])).sum();
            row.push((k, diag));
            for i in 0..d {
                let w = -a[i][i] / (h[i] * h[i]);
                for s in [-1, 1] {
                    if let Some(j) = grid.shifted(&idx, &[(i, s)]) {
                        row.push((j, w));
                    }
                }
                for j in i + 1..d {
                    if a[i][j] == 0.0 {
                        continue;
                    }
                    // -2 A_ij d_i d_j u with the symmetric cross stencil.
                    let w = 2.0 * a[i][j] / (4.0 * h[i] * h[j]);
                    for (si, sj, sign) in [(1, 1, -1.0), (-1, -1, -1.0), (1, -1, 1.0), (-1, 1, 1.0)] {
                        if let Some(c) = grid.shifted(&idx, &[(i, si), (j, sj)]) {
                            row.push((c, sign * w));
                        }
                    }
                }
            }
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    Ok(EffectiveOperator {
        grid: grid.clone(),
        a: a.to_vec(),
        matrix: Csr::from_rows(grid.len(), rows),
    })
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Relative residuals `||A x - l x|| / (l ||x||)`; zero for the dense route.
    pub residuals: Vec<f64>,
    pub method: &'static str,
}

/// The `k <= 8` smallest eigenvalues.
pub fn dirichlet_spectrum(op: &EffectiveOperator, k: usize) -> Result<Spectrum> {
    if k == 0 || k > 8 || k > op.dim() {
        return Err(Error::InvalidArgument(format!("requested {k} eigenvalues")));
    }
    if op.dim() <= DENSE_LIMIT {
        let mut dense = op.matrix.to_dense();
        // Symmetrize exactly; the stencils are symmetric up to rounding.
        let n = dense.n;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (dense.get(i, j) + dense.get(j, i));
                dense.set(i, j, v);
                dense.set(j, i, v);
            }
        }
        let values = symmetric_eigenvalues(&dense.to_nalgebra());
        return Ok(Spectrum {
            values: values[..k].to_vec(),
            residuals: vec![0.0; k],
            method: "dense",
        });
    }
    subspace_iteration(op, k, 1e-10, 2000)
}

enum InverseSolver {
    Banded(BandedCholesky),
    Cg,
}

/// Inverse subspace iteration with block size `k + 2` and Rayleigh-Ritz
/// extraction, stopping when each of the first `k` Ritz pairs has relative
/// residual at most `tol`.
pub fn subspace_iteration(op: &EffectiveOperator, k: usize, tol: f64, max_iter: usize) -> Result<Spectrum> {
    let n = op.dim();
    let b = (k + 2).min(n);
    let bw = op.grid.bandwidth();
    let solver = if n as f64 * (bw * bw) as f64 <= BANDED_BUDGET {
        let dense_row = |i: usize, j: usize| {
            let (cols, vals) = op.matrix.row(i);
            cols.iter().position(|&c| c == j).map_or(0.0, |p| vals[p])
        };
        InverseSolver::Banded(BandedCholesky::factor(n, bw, dense_row)?)
    } else {
        InverseSolver::Cg
    };
    let solve = |rhs: &[f64]| -> Result<Vec<f64>> {
        match &solver {
            InverseSolver::Banded(ch) => {
                let mut x = rhs.to_vec();
                ch.solve_in_place(&mut x);
                Ok(x)
            }
            InverseSolver::Cg => Ok(cg(op, rhs, 1e-14, 100 * n)?.solution),
        }
    };
    // Deterministic start: low cosine modes plus a fixed arithmetic perturbation.
    let mut basis: Vec<Vec<f64>> = (0..b)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let t = (i as f64 + 0.5) / n as f64;
                    (std::f64::consts::PI * (j + 1) as f64 * t).cos()
                        + 1e-3 * ((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0
                })
                .collect()
        })
        .collect();
    orthonormalize(&mut basis);
    let mut residuals = vec![f64::INFINITY; k];
    let mut values = vec![0.0; k];
    for _ in 0..max_iter {
        let next: Vec<Vec<f64>> = basis.iter().map(|v| solve(v)).collect::<Result<_>>()?;
        basis = next;
        orthonormalize(&mut basis);
        let images: Vec<Vec<f64>> = basis
            .iter()
            .map(|v| {
                let mut y = vec![0.0; n];
                op.apply(v, &mut y);
                y
            })
            .collect();
        let g = DMatrix::from_fn(b, b, |i, j| 0.5 * (dot(&basis[i], &images[j]) + dot(&basis[j], &images[i])));
        let eig = g.symmetric_eigen();
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let rotate = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            order
                .iter()
                .map(|&c| {
                    let mut out = vec![0.0; n];
                    for (r, v) in vs.iter().enumerate() {
                        let w = eig.eigenvectors[(r, c)];
                        out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
                    }
                    out
                })
                .collect()
        };
        basis = rotate(&basis);
        let rotated_images = rotate(&images);
        for j in 0..k {
            let theta = eig.eigenvalues[order[j]];
            let r: f64 = rotated_images[j]
                .iter()
                .zip(&basis[j])
                .map(|(y, x)| (y - theta * x).powi(2))
                .sum::<f64>()
                .sqrt();
            values[j] = theta;
            residuals[j] = r / (theta.abs() * dot(&basis[j], &basis[j]).sqrt());
        }
        if residuals.iter().all(|&r| r <= tol) {
            return Ok(Spectrum {
                values,
                residuals,
                method: "inverse subspace iteration",
            });
        }
    }
    Err(Error::NonConvergence {
        what: "inverse subspace iteration",
        iterations: max_iter,
        residual: residuals.iter().copied().fold(0.0, f64::max),
    })
}

fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for _ in 0..2 {
            for j in 0..i {
                let c = dot(&vs[i], &vs[j]);
                let (head, tail) = vs.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = dot(&vs[i], &vs[i]).sqrt();
        vs[i].iter_mut().for_each(|a| *a /= norm);
    }
}

/// Solves `(op + I) v = f` by conjugate gradients to relative residual 1e-10.
pub fn resolvent_effective(op: &EffectiveOperator, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != op.dim() {
        return Err(Error::InvalidArgument("right-hand side has the wrong length".into()));
    }
    let shifted = PlusIdentity { shift: 1.0, inner: op };
    Ok(cg(&shifted, f, 1e-10, 20 * op.dim() + 100)?.solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_grid(d: usize, n: usize) -> FdGrid {
        FdGrid::uniform(Domain::unit(d), n).unwrap()
    }

    #[test]
    fn one_dimensional_stencil() {
        let op = assemble_effective(&[vec![0.5]], &unit_grid(1, 3)).unwrap();
        let dense = op.matrix.to_dense();
        let s = 0.5 * 16.0;
        let expected = [[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense.get(i, j) - s * expected[i][j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn two_dimensional_identity_is_five_point_laplacian() {
        let grid = unit_grid(2, 4);
        let op = assemble_effective(&[vec![1.0, 0.0], vec![0.0, 1.0]], &grid).unwrap();
        let h2 = 25.0;
        for k in 0..grid.len() {
            let (cols, vals) = op.matrix.row(k);
            for (&c, &v) in cols.iter().zip(vals) {
                if c == k {
                    assert!((v - 4.0 * h2).abs() < 1e-12);
                } else {
                    assert!((v + h2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mixed_stencil_is_symmetric() {
        let grid = unit_grid(2, 9);
        let op = assemble_effective(&[vec![1.0, 0.3], vec![0.3, 0.7]], &grid).unwrap();
        let dense = op.matrix.to_dense();
        assert_eq!(dense, dense.transpose());
        assert!(assemble_effective(&[vec![1.0, 2.0], vec![2.0, 1.0]], &grid).is_err());
    }

    #[test]
    fn subspace_iteration_agrees_with_dense() {
        let grid = unit_grid(2, 20);
        let op = assemble_effective(&[vec![1.0, 0.2], vec![0.2, 0.6]], &grid).unwrap();
        let dense = dirichlet_spectrum(&op, 5).unwrap();
        let sub = subspace_iteration(&op, 5, 1e-10, 2000).unwrap();
        for (a, b) in dense.values.iter().zip(&sub.values) {
            assert!((a - b).abs() <= 1e-9 * a);
        }
    }

    #[test]
    fn exact_one_dimensional_eigenvalue() {
        let op = assemble_effective(&[vec![0.5]], &unit_grid(1, 511)).unwrap();
        let s = dirichlet_spectrum(&op, 3).unwrap();
        assert!((s.values[0] - PI * PI / 2.0).abs() <= 1e-4 * PI * PI / 2.0);
        assert!(s.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn resolvent_manufactured_solution() {
        let grid = unit_grid(1, 255);
        let op = assemble_effective(&[vec![1.0]], &grid).unwrap();
        let f: Vec<f64> = (0..grid.len()).map(|k| (1.0 + PI * PI) * (PI * grid.node(k)[0]).sin()).collect();
        let v = resolvent_effective(&op, &f).unwrap();
        let err = (0..grid.len()).map(|k| (v[k] - (PI * grid.node(k)[0]).sin()).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
        let zero = resolvent_effective(&op, &vec![0.0; grid.len()]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }
}

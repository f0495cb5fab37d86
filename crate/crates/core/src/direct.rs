//! The `eps`-scale operator `L_eps` on the box, its bottom eigenpair, lower
//! bound certificates and the factorized resolvent.
//!
//! Nodes are the points of the lattice `h_x Z^d`, `h_x = eps / q`, lying
//! strictly inside the box. With `eps = 1/K`, a node `x = k h_x` has fast
//! coordinate `x / eps = k / q`, which is exactly a node of the torus grid with
//! `q` points per axis, so direct and cell computations see the same
//! coefficient samples. The integral over `Omega` is the rectangle rule on the
//! nodes; rows near the boundary lose the mass that would fall outside.

use rayon::prelude::*;

use crate::cell::{principal_of, CellOptions, CellSetup, TorusGrid};
use crate::error::{Error, Result};
use crate::linalg::{dense_bottom_real, dense_eigenvalues, gmres, perron_from, Csr, DenseMatrix, LinearOperator, PlusIdentity, ShiftedNegation};
use crate::model::{truncation_radius, Domain, Model};

/// Default cap on the number of direct grid nodes.
pub const DEFAULT_NODE_CAP: usize = 1 << 22;
/// Cap on stored nonzeros of the direct operator.
pub const NNZ_CAP: usize = 1 << 28;
/// Largest grid for which dense decompositions are attempted.
pub const DENSE_ORACLE_LIMIT: usize = 2000;

/// Lattice nodes strictly inside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsGrid {
    pub domain: Domain,
    /// `eps = 1 / k_inv`.
    pub k_inv: usize,
    pub q: usize,
    /// First lattice index per axis.
    pub first: Vec<i64>,
    /// Node count per axis.
    pub counts: Vec<usize>,
}

impl EpsGrid {
    pub fn new(domain: Domain, eps: f64, q: usize) -> Result<Self> {
        Self::with_cap(domain, eps, q, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(domain: Domain, eps: f64, q: usize, cap: usize) -> Result<Self> {
        let k_inv = eps_reciprocal(eps)?;
        if q < 4 || !q.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "refinement q must be a power of two >= 4 so that x/eps lands on the torus grid, got {q}"
            )));
        }
        let scale = (k_inv * q) as f64;
        let mut first = Vec::new();
        let mut counts = Vec::new();
        for a in 0..domain.dim() {
            let lo = (domain.lower[a] * scale).floor() as i64 + 1;
            let hi = (domain.upper[a] * scale).ceil() as i64 - 1;
            if hi < lo {
                return Err(Error::InvalidArgument(format!("axis {} holds no grid nodes", a + 1)));
            }
            first.push(lo);
            counts.push((hi - lo + 1) as usize);
        }
        let total = counts.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c)).unwrap_or(usize::MAX);
        if total > cap {
            return Err(Error::Capacity {
                what: "direct grid",
                needed: total,
                cap,
            });
        }
        Ok(EpsGrid {
            domain,
            k_inv,
            q,
            first,
            counts,
        })
    }

    pub fn eps(&self) -> f64 {
        1.0 / self.k_inv as f64
    }

    pub fn h_x(&self) -> f64 {
        1.0 / (self.k_inv * self.q) as f64
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

    /// Lattice index of node `k` per axis.
    pub fn lattice(&self, k: usize) -> Vec<i64> {
        let mut rem = k;
        self.counts
            .iter()
            .zip(&self.first)
            .map(|(&c, &f)| {
                let i = rem % c;
                rem /= c;
                f + i as i64
            })
            .collect()
    }

    pub fn node(&self, k: usize) -> Vec<f64> {
        let scale = (self.k_inv * self.q) as f64;
        self.lattice(k).into_iter().map(|l| l as f64 / scale).collect()
    }

    /// Fast coordinate `x / eps` folded into the torus.
    pub fn fast(&self, k: usize) -> Vec<f64> {
        let q = self.q as i64;
        self.lattice(k)
            .into_iter()
            .map(|l| l.rem_euclid(q) as f64 / q as f64)
            .collect()
    }

    /// Index of the node on the torus grid with `q` points per axis.
    pub fn torus_index(&self, k: usize) -> usize {
        let q = self.q as i64;
        let mut out = 0;
        let mut stride = 1;
        for l in self.lattice(k) {
            out += l.rem_euclid(q) as usize * stride;
            stride *= self.q;
        }
        out
    }
}

/// `K` with `eps = 1/K`, rejecting values that are not reciprocals of integers.
pub fn eps_reciprocal(eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1], got {eps}")));
    }
    let k = (1.0 / eps).round();
    if (1.0 / eps - k).abs() > 1e-9 * k {
        return Err(Error::InvalidArgument(format!(
            "eps = {eps} is not 1/K for an integer K; x/eps must sample the torus grid exactly"
        )));
    }
    Ok(k as usize)
}

/// Enumerates neighbours of node `k` within `reach` lattice steps per axis,
/// in increasing index order.
fn neighbours(grid: &EpsGrid, k: usize, reach: i64, mut visit: impl FnMut(usize, &[i64])) {
    let d = grid.dim();
    let mut rem = k;
    let idx: Vec<i64> = grid
        .counts
        .iter()
        .map(|&c| {
            let i = rem % c;
            rem /= c;
            i as i64
        })
        .collect();
    let lo: Vec<i64> = idx.iter().map(|&i| (i - reach).max(0)).collect();
    let hi: Vec<i64> = idx
        .iter()
        .zip(&grid.counts)
        .map(|(&i, &c)| (i + reach).min(c as i64 - 1))
        .collect();
    let mut cur = lo.clone();
    let mut offset = vec![0i64; d];
    loop {
        let mut lin = 0usize;
        let mut stride = 1usize;
        for a in 0..d {
            lin += cur[a] as usize * stride;
            stride *= grid.counts[a];
            offset[a] = idx[a] - cur[a];
        }
        visit(lin, &offset);
        let mut a = 0;
        loop {
            if a == d {
                return;
            }
            if cur[a] < hi[a] {
                cur[a] += 1;
                break;
            }
            cur[a] = lo[a];
            a += 1;
        }
    }
}

/// Kernel weights `q^-d J(m / q) e^{p.m/q}` for integer offsets `m`, `|m|_inf <= reach`.
struct OffsetTable {
    reach: i64,
    side: usize,
    values: Vec<f64>,
}

impl OffsetTable {
    fn new(model: &Model, q: usize, reach: i64, p: &[f64]) -> Result<Self> {
        let d = model.dim();
        let side = (2 * reach + 1) as usize;
        let w = (q as f64).powi(-(d as i32));
        let values = (0..side.pow(d as u32))
            .map(|k| {
                let mut rem = k;
                let z: Vec<f64> = (0..d)
                    .map(|_| {
                        let m = (rem % side) as i64 - reach;
                        rem /= side;
                        m as f64 / q as f64
                    })
                    .collect();
                let pz: f64 = p.iter().zip(&z).map(|(a, b)| a * b).sum();
                Ok(w * model.kernel.value(&z)? * pz.exp())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(OffsetTable { reach, side, values })
    }

    fn get(&self, offset: &[i64]) -> f64 {
        let mut k = 0;
        let mut stride = 1;
        for &m in offset {
            k += (m + self.reach) as usize * stride;
            stride *= self.side;
        }
        self.values[k]
    }
}

/// Coupling values, cached by torus residues when kappa has no slow arguments.
enum Coupling {
    Constant(f64),
    Residues { q_nodes: usize, table: Vec<f64> },
    Direct,
}

impl Coupling {
    fn new(model: &Model, grid: &EpsGrid) -> Result<Self> {
        let slow = model.kappa.uses(crate::expr::VarKind::X) || model.kappa.uses(crate::expr::VarKind::Y);
        if slow {
            return Ok(Coupling::Direct);
        }
        let d = grid.dim();
        let torus = TorusGrid { d, n: grid.q };
        let zero = vec![0.0; d];
        if model.kappa_is_fast_constant() {
            return Ok(Coupling::Constant(model.kappa(&zero, &zero, &zero, &zero)?));
        }
        let n = torus.len();
        let nodes: Vec<Vec<f64>> = (0..n).map(|k| torus.node(k)).collect();
        let mut table = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                table.push(model.kappa(&zero, &zero, &nodes[i], &nodes[j])?);
            }
        }
        Ok(Coupling::Residues { q_nodes: n, table })
    }

    fn value(&self, model: &Model, grid: &EpsGrid, i: usize, j: usize) -> Result<f64> {
        match self {
            Coupling::Constant(c) => Ok(*c),
            Coupling::Residues { q_nodes, table } => Ok(table[grid.torus_index(i) * q_nodes + grid.torus_index(j)]),
            Coupling::Direct => model.kappa(&grid.node(i), &grid.node(j), &grid.fast(i), &grid.fast(j)),
        }
    }
}

fn reach_for(model: &Model, opts: &CellOptions, p: &[f64], q: usize) -> Result<i64> {
    let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = truncation_radius(&model.kernel, model.dim(), p_norm, opts.kappa_max, opts.tol_trunc)?;
    Ok((r * q as f64).ceil() as i64)
}

fn check_nnz(grid: &EpsGrid, reach: i64) -> Result<()> {
    let per_row: usize = grid.counts.iter().map(|&c| c.min(2 * reach as usize + 1)).product();
    let needed = per_row.saturating_mul(grid.len());
    if needed > NNZ_CAP {
        return Err(Error::Capacity {
            what: "direct operator nonzeros",
            needed,
            cap: NNZ_CAP,
        });
    }
    Ok(())
}

/// Assembled `L_eps`.
#[derive(Debug, Clone)]
pub struct DirectOperator {
    pub grid: EpsGrid,
    pub matrix: Csr,
    /// `a(x_i, x_i / eps)`.
    pub rate: Vec<f64>,
    /// `max a + 1`.
    pub shift: f64,
    pub reach: i64,
}

impl LinearOperator for DirectOperator {
    fn dim(&self) -> usize {
        self.matrix.n_rows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.apply(x, y)
    }
}

impl DirectOperator {
    /// Sum of the kernel part of each row, `sum_j (h_x/eps)^d J kappa`.
    pub fn kernel_mass(&self) -> Vec<f64> {
        self.matrix
            .row_sums()
            .iter()
            .zip(&self.rate)
            .map(|(s, a)| a - s)
            .collect()
    }

    /// Smallest real part over all eigenvalues by dense decomposition.
    pub fn dense_bottom(&self) -> Result<f64> {
        if self.dim() > DENSE_ORACLE_LIMIT {
            return Err(Error::Capacity {
                what: "dense direct decomposition",
                needed: self.dim(),
                cap: DENSE_ORACLE_LIMIT,
            });
        }
        Ok(dense_bottom_real(&self.matrix.to_dense()))
    }
}

/// `(L rho)_i = -sum_j (h_x/eps)^d J((x_i - x_j)/eps) kappa(x_i, x_j, x_i/eps, x_j/eps) rho_j + a_i rho_i`
/// over nodes with `|x_i - x_j|_inf <= eps R`.
pub fn assemble_l_eps(model: &Model, grid: &EpsGrid, opts: &CellOptions) -> Result<DirectOperator> {
    if grid.dim() != model.dim() {
        return Err(Error::InvalidArgument("grid and model dimensions differ".into()));
    }
    let d = grid.dim();
    let reach = reach_for(model, opts, &vec![0.0; d], grid.q)?;
    check_nnz(grid, reach)?;
    let table = OffsetTable::new(model, grid.q, reach, &vec![0.0; d])?;
    let coupling = Coupling::new(model, grid)?;
    let rate: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| model.rate(&grid.node(k), &grid.fast(k)))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<(usize, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            let mut err = None;
            neighbours(grid, i, reach, |j, offset| {
                if err.is_some() {
                    return;
                }
                match coupling.value(model, grid, i, j) {
                    Ok(kv) => {
                        let mut v = -table.get(offset) * kv;
                        if j == i {
                            v += rate[i];
                        }
                        row.push((j, v));
                    }
                    Err(e) => err = Some(e),
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok(row),
            }
        })
        .collect::<Result<_>>()?;
    let shift = rate.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    Ok(DirectOperator {
        grid: grid.clone(),
        matrix: Csr::from_rows(grid.len(), rows),
        rate,
        shift,
        reach,
    })
}

#[derive(Debug, Clone)]
pub struct SpectralResult {
    pub lambda_eps: f64,
    /// Positive eigenvector, infinity-norm 1.
    pub rho: Vec<f64>,
    pub residual: f64,
    pub lower_bound: f64,
    pub iterations: usize,
}

/// Perron iteration on `shift I - L_eps`.
pub fn bottom_of_spectrum(op: &DirectOperator, tol: f64, max_iter: usize) -> Result<SpectralResult> {
    let pair = principal_of(&op.matrix, op.shift, tol, max_iter)?;
    let lower_bound = certify_lower_bound(op, &pair.vector)?;
    Ok(SpectralResult {
        lambda_eps: pair.value,
        rho: pair.vector,
        residual: pair.residual,
        lower_bound,
        iterations: pair.iterations,
    })
}

/// Same as [`bottom_of_spectrum`] from a scaled all-ones start vector.
pub fn bottom_of_spectrum_scaled_start(op: &DirectOperator, scale: f64, tol: f64, max_iter: usize) -> Result<SpectralResult> {
    let shifted = ShiftedNegation {
        shift: op.shift,
        inner: &op.matrix,
    };
    let r = perron_from(&shifted, vec![scale; op.dim()], tol, max_iter)?;
    let lower_bound = certify_lower_bound(op, &r.vector)?;
    Ok(SpectralResult {
        lambda_eps: op.shift - r.rho,
        rho: r.vector,
        residual: r.residual,
        lower_bound,
        iterations: r.iterations,
    })
}

/// `min_i (L v)_i / v_i`, a lower bound for the bottom eigenvalue when `v > 0`.
pub fn certify_lower_bound(op: &DirectOperator, v: &[f64]) -> Result<f64> {
    if v.len() != op.dim() || v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument("test function must be positive at every node".into()));
    }
    let mut lv = vec![0.0; v.len()];
    op.apply(v, &mut lv);
    Ok(lv.iter().zip(v).map(|(a, b)| a / b).fold(f64::INFINITY, f64::min))
}

/// `(lambda_eps - H0) / eps^2`.
pub fn mu_from_lambda(lambda_eps: f64, h0: f64, eps: f64) -> f64 {
    (lambda_eps - h0) / (eps * eps)
}

/// The factorized operator
/// `(Lt v)_i = eps^-2 (D_i v_i - sum_{j in Omega} Kt_ij v_j)` with
/// `Kt_ij = q^-d phi_i^-1 J(z) e^{p0.z} kappa phi_j` and `D_i` the full-space
/// row mass of `Kt`, so that `L_eps = H + eps^2 Lt` after the substitution
/// `rho = e^{-p0.x/eps} phi(x/eps) v`.
#[derive(Debug, Clone)]
pub struct FactorizedOperator {
    pub grid: EpsGrid,
    pub eps: f64,
    /// `eps^-2 (D - Kt_Omega)`.
    pub matrix: Csr,
    /// Cell eigenvalue on the grid with `q` points per axis.
    pub h_disc: f64,
}

impl LinearOperator for FactorizedOperator {
    fn dim(&self) -> usize {
        self.matrix.n_rows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.apply(x, y)
    }
}

/// Builds the factorized operator for a periodic model at momentum `p0`.
pub fn factorized_operator(model: &Model, grid: &EpsGrid, p0: &[f64], opts: &CellOptions) -> Result<FactorizedOperator> {
    if !model.is_periodic() {
        return Err(Error::InvalidArgument(
            "the factorized operator needs coefficients without slow-variable dependence".into(),
        ));
    }
    let d = grid.dim();
    let torus = TorusGrid::new(d, grid.q)?;
    let setup = CellSetup::new(model, torus, &vec![0.0; d], *opts)?;
    let cell_op = setup.operator(p0)?;
    let pair = cell_op.principal(opts.tol, opts.max_iter)?;
    let phi = pair.vector;
    // Full-space row mass: (T phi)_i / phi_i on the torus.
    let mut t_phi = vec![0.0; phi.len()];
    cell_op.kernel.apply(&phi, &mut t_phi);
    let full_mass: Vec<f64> = t_phi.iter().zip(&phi).map(|(a, b)| a / b).collect();

    let reach = reach_for(model, opts, p0, grid.q)?;
    check_nnz(grid, reach)?;
    let table = OffsetTable::new(model, grid.q, reach, p0)?;
    let coupling = Coupling::new(model, grid)?;
    let eps = grid.eps();
    let inv_eps2 = 1.0 / (eps * eps);
    let rows: Vec<Vec<(usize, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let ti = grid.torus_index(i);
            let mut row = Vec::new();
            let mut err = None;
            neighbours(grid, i, reach, |j, offset| {
                if err.is_some() {
                    return;
                }
                match coupling.value(model, grid, i, j) {
                    Ok(kv) => {
                        let k = table.get(offset) * kv * phi[grid.torus_index(j)] / phi[ti];
                        let mut v = -k * inv_eps2;
                        if j == i {
                            v += full_mass[ti] * inv_eps2;
                        }
                        row.push((j, v));
                    }
                    Err(e) => err = Some(e),
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok(row),
            }
        })
        .collect::<Result<_>>()?;
    Ok(FactorizedOperator {
        grid: grid.clone(),
        eps,
        matrix: Csr::from_rows(grid.len(), rows),
        h_disc: pair.value,
    })
}

/// Solves `(Lt + I) v = f` with `v = 0` outside the box, to relative residual 1e-9.
pub fn factorized_resolvent_solve(op: &FactorizedOperator, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != op.dim() {
        return Err(Error::InvalidArgument("right-hand side has the wrong length".into()));
    }
    let shifted = PlusIdentity { shift: 1.0, inner: op };
    let n = op.dim();
    Ok(gmres(&shifted, f, 1e-9, n.min(200), 50 * n + 1000, None)?.solution)
}

/// Eigenvalues of the factorized operator sorted by real part (dense; small grids only).
pub fn factorized_spectrum(op: &FactorizedOperator) -> Result<Vec<nalgebra::Complex<f64>>> {
    if op.dim() > DENSE_ORACLE_LIMIT {
        return Err(Error::Capacity {
            what: "dense factorized decomposition",
            needed: op.dim(),
            cap: DENSE_ORACLE_LIMIT,
        });
    }
    let dense: DenseMatrix = op.matrix.to_dense();
    Ok(dense_eigenvalues(&dense))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::model::KernelSpec;

    fn trivial(a: &str) -> Model {
        Model::new(
            KernelSpec::gaussian(1.0, 2.325, 0.5),
            parse("1").unwrap(),
            parse(a).unwrap(),
            Domain::unit(1),
        )
        .unwrap()
    }

    fn opts(m: &Model) -> CellOptions {
        CellOptions::for_model(m).unwrap()
    }

    #[test]
    fn eps_must_be_reciprocal_integer() {
        assert!(EpsGrid::new(Domain::unit(1), 0.3, 8).is_err());
        let g = EpsGrid::new(Domain::unit(1), 0.125, 8).unwrap();
        assert_eq!(g.len(), 63);
        assert_eq!(g.node(0), vec![1.0 / 64.0]);
        assert_eq!(g.fast(7), vec![0.0]);
        assert_eq!(g.torus_index(8), 1);
    }

    #[test]
    fn hand_assembled_row() {
        let m = trivial("2");
        let g = EpsGrid::new(Domain::unit(1), 0.125, 8).unwrap();
        let op = assemble_l_eps(&m, &g, &opts(&m)).unwrap();
        let jd = |z: f64| (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let i = 30;
        let (cols, vals) = op.matrix.row(i);
        assert_eq!(cols.len(), g.len());
        for (&j, &v) in cols.iter().zip(vals) {
            let z = (i as f64 - j as f64) / 8.0;
            let expected = if i == j { 2.0 - jd(0.0) / 8.0 } else { -jd(z) / 8.0 };
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn interior_rows_carry_full_mass_and_boundary_rows_lose_it() {
        let m = trivial("2");
        let g = EpsGrid::new(Domain::new(vec![0.0], vec![4.0]).unwrap(), 1.0 / 8.0, 8).unwrap();
        let op = assemble_l_eps(&m, &g, &opts(&m)).unwrap();
        let mass = op.kernel_mass();
        let mid = g.len() / 2;
        assert!((mass[mid] - 1.0).abs() < 1e-9);
        assert!(mass[0] < mass[mid] - 0.1);
    }

    #[test]
    fn bottom_matches_dense_and_certificate() {
        let m = trivial("2 + 0.3*sin(2*pi*xi1)");
        let g = EpsGrid::new(Domain::unit(1), 1.0 / 16.0, 8).unwrap();
        let op = assemble_l_eps(&m, &g, &opts(&m)).unwrap();
        let res = bottom_of_spectrum(&op, 1e-11, 5_000_000).unwrap();
        assert!((res.lambda_eps - op.dense_bottom().unwrap()).abs() < 1e-8);
        assert!(res.rho.iter().all(|&v| v > 0.0));
        assert!(res.lower_bound >= res.lambda_eps - 10.0 * res.residual);
        assert!(res.lower_bound <= res.lambda_eps + 1e-12);
    }

    #[test]
    fn shifting_a_shifts_lambda() {
        let g = EpsGrid::new(Domain::unit(1), 1.0 / 8.0, 8).unwrap();
        let m1 = trivial("2");
        let m2 = trivial("2 + 0.75");
        let l1 = bottom_of_spectrum(&assemble_l_eps(&m1, &g, &opts(&m1)).unwrap(), 1e-12, 1_000_000).unwrap();
        let l2 = bottom_of_spectrum(&assemble_l_eps(&m2, &g, &opts(&m2)).unwrap(), 1e-12, 1_000_000).unwrap();
        assert!((l2.lambda_eps - l1.lambda_eps - 0.75).abs() < 1e-12);
    }

    #[test]
    fn start_scaling_does_not_change_the_iteration() {
        let m = trivial("2");
        let g = EpsGrid::new(Domain::unit(1), 1.0 / 8.0, 8).unwrap();
        let op = assemble_l_eps(&m, &g, &opts(&m)).unwrap();
        let a = bottom_of_spectrum(&op, 1e-11, 1_000_000).unwrap();
        let b = bottom_of_spectrum_scaled_start(&op, 8.0, 1e-11, 1_000_000).unwrap();
        assert_eq!(a.lambda_eps.to_bits(), b.lambda_eps.to_bits());
        assert_eq!(a.rho, b.rho);
    }

    #[test]
    fn factorization_is_a_similarity() {
        let m = Model::new(
            KernelSpec::gaussian(0.25, 2.0, 0.5),
            parse("1 + 0.3*sin(2*pi*(xi1 - eta1))").unwrap(),
            parse("2 + 0.4*cos(2*pi*xi1)").unwrap(),
            Domain::unit(1),
        )
        .unwrap();
        let o = opts(&m);
        let g = EpsGrid::new(Domain::unit(1), 1.0 / 8.0, 8).unwrap();
        let p0 = [0.2];
        let fact = factorized_operator(&m, &g, &p0, &o).unwrap();
        let direct = assemble_l_eps(&m, &g, &o).unwrap();
        let ev_direct = dense_eigenvalues(&direct.matrix.to_dense());
        let ev_fact = factorized_spectrum(&fact).unwrap();
        let eps2 = fact.eps * fact.eps;
        for k in 0..4 {
            let mapped = fact.h_disc + eps2 * ev_fact[k].re;
            assert!((mapped - ev_direct[k].re).abs() < 1e-8, "{mapped} vs {}", ev_direct[k].re);
        }
        let f: Vec<f64> = vec![0.0; g.len()];
        assert!(factorized_resolvent_solve(&fact, &f).unwrap().iter().all(|&v| v == 0.0));
    }
}

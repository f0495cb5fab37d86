//! Periodic cell eigenproblems on the unit torus.
//!
//! For a frozen slow point `x` and momentum `p` the cell operator is
//!
//! ```text
//! (M phi)(xi) = a(x, xi) phi(xi) - Int J(z) exp(p.z) kappa(x, x, xi, xi - z) phi(xi - z) dz
//! ```
//!
//! discretized by the rectangle rule on the grid `h Z^d`, with offsets folded
//! onto the torus grid so no interpolation is needed. Its principal eigenvalue
//! is `H(p, x)`, a concave function of `p` bounded above by `min_xi a(x, xi)`.
//!
//! At the maximizer `p0` of `H` the module also builds the factorized kernel
//! `Q(xi, eta) = phi*(xi) J e^{p0.z} kappa phi(eta)`, solves the corrector
//! equations and assembles the effective matrix `A = -1/2 D^2 H(p0)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, dense_bottom_real, gmres, perron, DenseMatrix, LinearOperator, ShiftedNegation};
use crate::model::{truncation_radius, validate_model, Model};

/// Default cap on the number of torus nodes.
pub const DEFAULT_NODE_CAP: usize = 1 << 20;
/// Cap on the entries of a dense cell matrix.
pub const DENSE_ENTRY_CAP: usize = 1 << 24;
/// Relative gap below which classification compares against a refined grid.
pub const REFINEMENT_GAP_FRACTION: f64 = 0.05;
/// Gap contraction under refinement at or below which the bottom is essential.
pub const ESSENTIAL_GAP_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Classification {
    PrincipalEigenvalue,
    EssentialBottom,
}

/// Uniform grid with `n` points per axis on `[0, 1)^d`, first axis fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TorusGrid {
    pub d: usize,
    pub n: usize,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        Self::with_cap(d, n, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(d: usize, n: usize, cap: usize) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidArgument(format!("torus dimension {d} unsupported")));
        }
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "torus points per axis must be a power of two >= 4, got {n}"
            )));
        }
        let total = n.checked_pow(d as u32).unwrap_or(usize::MAX);
        if total > cap {
            return Err(Error::Capacity {
                what: "torus grid",
                needed: total,
                cap,
            });
        }
        Ok(TorusGrid { d, n })
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// `h^d`, the quadrature weight of one node.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    pub fn multi_index(&self, k: usize) -> Vec<usize> {
        let mut rem = k;
        (0..self.d)
            .map(|_| {
                let i = rem % self.n;
                rem /= self.n;
                i
            })
            .collect()
    }

    pub fn node(&self, k: usize) -> Vec<f64> {
        self.multi_index(k)
            .into_iter()
            .map(|i| i as f64 / self.n as f64)
            .collect()
    }

    /// Index of the offset `xi_i - xi_j` reduced modulo the torus.
    pub fn offset_index(&self, i: usize, j: usize) -> usize {
        let n = self.n;
        let (mut a, mut b, mut stride, mut out) = (i, j, 1, 0);
        for _ in 0..self.d {
            let delta = (a % n + n - b % n) % n;
            out += delta * stride;
            stride *= n;
            a /= n;
            b /= n;
        }
        out
    }

    pub fn refined(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.d, self.n * 2)
    }
}

/// Numerical settings for cell solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellOptions {
    /// Eigen-residual tolerance.
    pub tol: f64,
    /// Tail tolerance for the kernel truncation radius.
    pub tol_trunc: f64,
    pub max_iter: usize,
    /// Upper bound on kappa used for truncation.
    pub kappa_max: f64,
    /// Classification threshold; `None` means `10 tol (1 + |m|)`.
    pub tol_class: Option<f64>,
    /// Compare gaps on a refined grid when the gap is small.
    pub refine_classification: bool,
}

impl CellOptions {
    /// Defaults with `kappa_max` taken from model validation.
    pub fn for_model(model: &Model) -> Result<Self> {
        let report = validate_model(model)?;
        Ok(CellOptions {
            tol: 1e-10,
            tol_trunc: 1e-10,
            max_iter: 1_000_000,
            kappa_max: report.kappa_max,
            tol_class: None,
            refine_classification: true,
        })
    }

    pub fn class_threshold(&self, m: f64) -> f64 {
        self.tol_class.unwrap_or(10.0 * self.tol * (1.0 + m.abs()))
    }
}

/// p-independent data of a cell problem: coupling matrix and rates at a frozen `x`.
#[derive(Debug, Clone)]
pub struct CellSetup<'m> {
    pub model: &'m Model,
    pub grid: TorusGrid,
    pub x: Vec<f64>,
    pub opts: CellOptions,
    /// `kappa(x, x, xi_i, xi_j)`, row-major; `None` when kappa is constant on the torus.
    kappa: Option<Vec<f64>>,
    kappa_const: f64,
    /// `a(x, xi_i)`.
    pub rate: Vec<f64>,
    /// `min_i a(x, xi_i)`.
    pub m: f64,
    /// `max_i a(x, xi_i)`.
    pub a_max: f64,
}

impl<'m> CellSetup<'m> {
    pub fn new(model: &'m Model, grid: TorusGrid, x: &[f64], opts: CellOptions) -> Result<Self> {
        if grid.d != model.dim() || x.len() != model.dim() {
            return Err(Error::InvalidArgument("dimension mismatch between grid, model and x".into()));
        }
        let len = grid.len();
        if len * len > DENSE_ENTRY_CAP {
            return Err(Error::Capacity {
                what: "dense cell matrix",
                needed: len * len,
                cap: DENSE_ENTRY_CAP,
            });
        }
        let nodes: Vec<Vec<f64>> = (0..len).map(|k| grid.node(k)).collect();
        let frozen = model.freeze_rate(x)?;
        let rate = nodes.iter().map(|xi| frozen.eval(xi)).collect::<Result<Vec<f64>>>()?;
        let (kappa, kappa_const) = if model.kappa_is_fast_constant() {
            (None, model.kappa(x, x, &nodes[0], &nodes[0])?)
        } else {
            let rows: Vec<Vec<f64>> = (0..len)
                .into_par_iter()
                .map(|i| {
                    (0..len)
                        .map(|j| model.kappa(x, x, &nodes[i], &nodes[j]))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            (Some(rows.concat()), 0.0)
        };
        let m = rate.iter().copied().fold(f64::INFINITY, f64::min);
        let a_max = rate.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(CellSetup {
            model,
            grid,
            x: x.to_vec(),
            opts,
            kappa,
            kappa_const,
            rate,
            m,
            a_max,
        })
    }

    #[inline]
    fn kappa_at(&self, i: usize, j: usize) -> f64 {
        match &self.kappa {
            Some(k) => k[i * self.grid.len() + j],
            None => self.kappa_const,
        }
    }

    fn radius(&self, p: &[f64]) -> Result<f64> {
        let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        truncation_radius(&self.model.kernel, self.grid.d, p_norm, self.opts.kappa_max, self.opts.tol_trunc)
    }

    /// Folded tilted weights `S(delta) = h^d sum_{z = delta mod 1} J(z) e^{p.z}`
    /// and, if requested, their first and second moments in `z`.
    pub fn tilted_weights(&self, p: &[f64], moments: bool) -> Result<TiltedWeights> {
        let g = self.grid;
        let d = g.d;
        let n = g.n as i64;
        let radius = self.radius(p)?;
        let reach = (radius * g.n as f64).ceil() as i64;
        let side = (2 * reach + 1) as usize;
        let len = g.len();
        let mut s = vec![0.0; len];
        let mut s1 = if moments { vec![vec![0.0; len]; d] } else { Vec::new() };
        let mut s2 = if moments { vec![vec![0.0; len]; d * d] } else { Vec::new() };
        let h = g.h();
        let w0 = g.cell_volume();
        let mut z = vec![0.0; d];
        for k in 0..side.pow(d as u32) {
            let mut rem = k;
            let mut bin = 0usize;
            let mut stride = 1usize;
            for c in 0..d {
                let m = (rem % side) as i64 - reach;
                rem /= side;
                z[c] = m as f64 * h;
                bin += (m.rem_euclid(n) as usize) * stride;
                stride *= g.n;
            }
            let pz: f64 = p.iter().zip(&z).map(|(a, b)| a * b).sum();
            let w = w0 * self.model.kernel.value(&z)? * pz.exp();
            if w == 0.0 {
                continue;
            }
            s[bin] += w;
            if moments {
                for a in 0..d {
                    s1[a][bin] += w * z[a];
                    for b in 0..d {
                        s2[a * d + b][bin] += w * z[a] * z[b];
                    }
                }
            }
        }
        Ok(TiltedWeights { s, s1, s2, radius })
    }

    /// Dense matrix `T_ij = kappa_ij w(i - j)` for folded weights `w`.
    fn kernel_matrix(&self, w: &[f64]) -> DenseMatrix {
        let len = self.grid.len();
        let data: Vec<f64> = (0..len)
            .into_par_iter()
            .flat_map_iter(|i| (0..len).map(move |j| (i, j)))
            .map(|(i, j)| self.kappa_at(i, j) * w[self.grid.offset_index(i, j)])
            .collect();
        DenseMatrix { n: len, data }
    }

    /// Assembles the cell operator at momentum `p`.
    pub fn operator(&self, p: &[f64]) -> Result<CellOperator> {
        if p.len() != self.grid.d {
            return Err(Error::InvalidArgument("momentum has wrong dimension".into()));
        }
        let weights = self.tilted_weights(p, false)?;
        let kernel = self.kernel_matrix(&weights.s);
        let len = self.grid.len();
        for i in 0..len {
            let off: f64 = (0..len).filter(|&j| j != i).map(|j| kernel.get(i, j)).sum();
            if len > 1 && !(off > 0.0) {
                return Err(Error::Reducible(format!(
                    "cell row {i} has no positive off-diagonal kernel weight"
                )));
            }
        }
        let mut matrix = kernel.clone();
        for (v, k) in matrix.data.iter_mut().zip(&kernel.data) {
            *v = -k;
        }
        for i in 0..len {
            matrix.data[i * len + i] += self.rate[i];
        }
        Ok(CellOperator {
            p: p.to_vec(),
            kernel,
            matrix,
            rate: self.rate.clone(),
            shift: self.a_max + 1.0,
            radius: weights.radius,
        })
    }

    /// Principal eigenvalue only.
    pub fn h(&self, p: &[f64]) -> Result<f64> {
        let op = self.operator(p)?;
        Ok(op.principal(self.opts.tol, self.opts.max_iter)?.value)
    }

    /// Direct and adjoint eigenpairs with threshold classification.
    pub fn eigenpair(&self, p: &[f64]) -> Result<CellEigenpair> {
        let op = self.operator(p)?;
        self.eigenpair_of(&op)
    }

    pub fn eigenpair_of(&self, op: &CellOperator) -> Result<CellEigenpair> {
        let direct = op.principal(self.opts.tol, self.opts.max_iter)?;
        let adjoint = op.adjoint(self.opts.tol, self.opts.max_iter)?;
        let hd = self.grid.cell_volume();
        let normalize = |v: Vec<f64>| {
            let s: f64 = v.iter().sum::<f64>() * hd;
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let threshold = self.opts.class_threshold(self.m);
        let classification = if self.m - direct.value <= threshold {
            Classification::EssentialBottom
        } else {
            Classification::PrincipalEigenvalue
        };
        Ok(CellEigenpair {
            p: op.p.clone(),
            h: direct.value,
            h_adjoint: adjoint.value,
            phi: normalize(direct.vector),
            phi_star: normalize(adjoint.vector),
            residual_direct: direct.residual,
            residual_adjoint: adjoint.residual,
            classification,
            m: self.m,
            a_max: self.a_max,
            gap_ratio: None,
        })
    }

    /// `dH/dp_k = -phi*^T T1_k phi / phi*^T phi` with `T1_k` the first-moment kernel.
    pub fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        let pair = self.eigenpair(p)?;
        let w = self.tilted_weights(p, true)?;
        let denom = linalg::dot(&pair.phi, &pair.phi_star);
        let len = self.grid.len();
        Ok((0..self.grid.d)
            .map(|k| {
                let t1 = self.kernel_matrix(&w.s1[k]);
                let mut tphi = vec![0.0; len];
                t1.apply(&pair.phi, &mut tphi);
                -linalg::dot(&pair.phi_star, &tphi) / denom
            })
            .collect())
    }
}

/// Folded tilted weights and their moments.
#[derive(Debug, Clone)]
pub struct TiltedWeights {
    pub s: Vec<f64>,
    /// `s1[k]`: weights times `z_k`.
    pub s1: Vec<Vec<f64>>,
    /// `s2[k * d + l]`: weights times `z_k z_l`.
    pub s2: Vec<Vec<f64>>,
    pub radius: f64,
}

/// Assembled cell operator `M = diag(a) - T`.
#[derive(Debug, Clone)]
pub struct CellOperator {
    pub p: Vec<f64>,
    /// Nonnegative kernel part `T`.
    pub kernel: DenseMatrix,
    pub matrix: DenseMatrix,
    pub rate: Vec<f64>,
    /// `max a + 1`.
    pub shift: f64,
    pub radius: f64,
}

/// A principal eigenvalue with its positive eigenvector.
#[derive(Debug, Clone)]
pub struct PrincipalPair {
    pub value: f64,
    /// Infinity-norm 1.
    pub vector: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl CellOperator {
    /// Perron iteration on `shift I - M`.
    pub fn principal(&self, tol: f64, max_iter: usize) -> Result<PrincipalPair> {
        principal_of(&self.matrix, self.shift, tol, max_iter)
    }

    /// Same on the transpose.
    pub fn adjoint(&self, tol: f64, max_iter: usize) -> Result<PrincipalPair> {
        principal_of(&self.matrix.transpose(), self.shift, tol, max_iter)
    }

    /// Smallest real part over all eigenvalues, from a dense decomposition.
    pub fn dense_bottom(&self) -> f64 {
        dense_bottom_real(&self.matrix)
    }
}

pub fn principal_of<A: LinearOperator + ?Sized>(
    matrix: &A,
    shift: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PrincipalPair> {
    let shifted = ShiftedNegation {
        shift,
        inner: matrix,
    };
    let r = perron(&shifted, tol, max_iter)?;
    Ok(PrincipalPair {
        value: shift - r.rho,
        vector: r.vector,
        residual: r.residual,
        iterations: r.iterations,
    })
}

#[derive(Debug, Clone)]
pub struct CellEigenpair {
    pub p: Vec<f64>,
    pub h: f64,
    /// Eigenvalue of the adjoint iteration; equal to `h` up to solver error.
    pub h_adjoint: f64,
    /// Direct eigenfunction, `sum phi h^d = 1`.
    pub phi: Vec<f64>,
    /// Adjoint eigenfunction, `sum phi* h^d = 1`.
    pub phi_star: Vec<f64>,
    pub residual_direct: f64,
    pub residual_adjoint: f64,
    pub classification: Classification,
    /// `min_i a(x, xi_i)`.
    pub m: f64,
    pub a_max: f64,
    /// `gap(2n) / gap(n)` when the refined comparison was made.
    pub gap_ratio: Option<f64>,
}

/// `H(p, x)` with classification.
///
/// The bottom is called essential when `m - H` is within the threshold. When
/// the gap is small compared to the range of `a` it is also compared against
/// the gap on the grid refined once: a principal eigenvalue keeps its gap under
/// refinement while a discrete bottom approaching an essential edge loses it.
pub fn hamiltonian(model: &Model, p: &[f64], x: &[f64], grid: TorusGrid, opts: CellOptions) -> Result<CellEigenpair> {
    let setup = CellSetup::new(model, grid, x, opts)?;
    let mut pair = setup.eigenpair(p)?;
    if pair.classification == Classification::PrincipalEigenvalue && opts.refine_classification {
        let gap = pair.m - pair.h;
        let range = pair.a_max - pair.m;
        if range > 0.0 && gap < REFINEMENT_GAP_FRACTION * range {
            if let Ok(fine) = grid.refined() {
                let fine_setup = CellSetup::new(model, fine, x, opts)?;
                let fine_pair = fine_setup.eigenpair(p)?;
                let ratio = (fine_pair.m - fine_pair.h) / gap;
                pair.gap_ratio = Some(ratio);
                if ratio <= ESSENTIAL_GAP_RATIO {
                    pair.classification = Classification::EssentialBottom;
                }
            }
        }
    }
    Ok(pair)
}

/// Coarse grid of `7^d` points on `[-p_max, p_max]^d`, then compass search
/// with step halving down to `tol_p`, then Newton steps on the analytic
/// gradient. A maximizer on the box boundary enlarges the box once.
pub fn maximize_h(setup: &CellSetup<'_>, tol_p: f64, p_max: f64) -> Result<(Vec<f64>, f64)> {
    match maximize_in_box(setup, tol_p, p_max)? {
        (p, h, false) => Ok((p, h)),
        (_, _, true) => match maximize_in_box(setup, tol_p, 2.0 * p_max)? {
            (p, h, false) => Ok((p, h)),
            (p, _, true) => Err(Error::BoundaryMaximizer { p, p_max: 2.0 * p_max }),
        },
    }
}

fn maximize_in_box(setup: &CellSetup<'_>, tol_p: f64, p_max: f64) -> Result<(Vec<f64>, f64, bool)> {
    let d = setup.grid.d;
    let per_axis = 7usize;
    let spacing = 2.0 * p_max / (per_axis - 1) as f64;
    let mut best = (vec![0.0; d], f64::NEG_INFINITY);
    for k in 0..per_axis.pow(d as u32) {
        let mut rem = k;
        let p: Vec<f64> = (0..d)
            .map(|_| {
                let i = rem % per_axis;
                rem /= per_axis;
                -p_max + spacing * i as f64
            })
            .collect();
        let h = setup.h(&p)?;
        if h > best.1 {
            best = (p, h);
        }
    }
    let (mut p, mut h) = best;
    let mut step = spacing / 2.0;
    while step >= tol_p {
        let mut moved = false;
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut q = p.clone();
                q[k] = (q[k] + sign * step).clamp(-p_max, p_max);
                if q[k] == p[k] {
                    continue;
                }
                let hq = setup.h(&q)?;
                if hq > h {
                    p = q;
                    h = hq;
                    moved = true;
                }
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    let on_boundary = p.iter().any(|v| v.abs() >= p_max - tol_p);
    if on_boundary {
        return Ok((p, h, true));
    }
    // Newton polish: gradient analytic, Jacobian by central differences of it.
    let fd = 1e-4;
    for _ in 0..4 {
        let g = setup.gradient(&p)?;
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-11 {
            break;
        }
        let mut jac = nalgebra::DMatrix::zeros(d, d);
        for k in 0..d {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[k] += fd;
            pm[k] -= fd;
            let (gp, gm) = (setup.gradient(&pp)?, setup.gradient(&pm)?);
            for l in 0..d {
                jac[(l, k)] = (gp[l] - gm[l]) / (2.0 * fd);
            }
        }
        let rhs = nalgebra::DVector::from_vec(g.iter().map(|v| -v).collect());
        let Some(delta) = jac.lu().solve(&rhs) else { break };
        if delta.amax() > 4.0 * tol_p.max(1e-3) {
            break;
        }
        let q: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
        let hq = setup.h(&q)?;
        if hq < h - 10.0 * setup.opts.tol {
            break;
        }
        p = q;
        h = hq;
    }
    Ok((p, h, false))
}

/// Factorized kernel data at a principal eigenpair:
/// `agg[i, j] = phi*_i T_ij phi_j` and its first and second moments in the
/// offset `z = xi_i - xi_j` (unfolded).
#[derive(Debug, Clone)]
pub struct QKernel {
    pub grid: TorusGrid,
    pub agg: DenseMatrix,
    pub first: Vec<DenseMatrix>,
    /// Index `k * d + l`.
    pub second: Vec<DenseMatrix>,
}

impl QKernel {
    pub fn build(setup: &CellSetup<'_>, pair: &CellEigenpair) -> Result<QKernel> {
        let w = setup.tilted_weights(&pair.p, true)?;
        let scale = |t: DenseMatrix| {
            let len = t.n;
            let mut out = t;
            for i in 0..len {
                for j in 0..len {
                    out.data[i * len + j] *= pair.phi_star[i] * pair.phi[j];
                }
            }
            out
        };
        Ok(QKernel {
            grid: setup.grid,
            agg: scale(setup.kernel_matrix(&w.s)),
            first: w.s1.iter().map(|s| scale(setup.kernel_matrix(s))).collect(),
            second: w.s2.iter().map(|s| scale(setup.kernel_matrix(s))).collect(),
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.agg.n).map(|i| self.agg.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.agg.n;
        (0..n).map(|j| (0..n).map(|i| self.agg.get(i, j)).sum()).collect()
    }

    /// `(max_i |rowsum_i - colsum_i|, max_i rowsum_i)`.
    pub fn mass_balance(&self) -> (f64, f64) {
        let r = self.row_sums();
        let c = self.col_sums();
        let imbalance = r.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        (imbalance, r.iter().copied().fold(0.0, f64::max))
    }
}

/// The corrector operator `chi -> sum_i' Q(i', k) (chi(i') - chi(k))`.
struct CorrectorOperator<'a> {
    q: &'a QKernel,
    colsum: Vec<f64>,
}

impl LinearOperator for CorrectorOperator<'_> {
    fn dim(&self) -> usize {
        self.q.agg.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.q.agg.n;
        let a = &self.q.agg;
        y.par_iter_mut().enumerate().for_each(|(k, yk)| {
            let s: f64 = (0..n).map(|i| a.data[i * n + k] * x[i]).sum();
            *yk = s - self.colsum[k] * x[k];
        });
    }
}

fn project_mean_zero(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

#[derive(Debug, Clone)]
pub struct CorrectorSolution {
    /// Mean-zero grid function.
    pub chi: Vec<f64>,
    /// Infinity norm of the assembled equation residual.
    pub residual: f64,
}

/// Solves `sum_z Q(xi + z, xi) (z_axis + chi(xi + z) - chi(xi)) = 0` in the
/// mean-zero subspace.
pub fn corrector_solve(q: &QKernel, axis: usize, tol: f64) -> Result<CorrectorSolution> {
    let op = CorrectorOperator {
        q,
        colsum: q.col_sums(),
    };
    let n = q.agg.n;
    let f = &q.first[axis];
    let b: Vec<f64> = (0..n).map(|k| -(0..n).map(|i| f.get(i, k)).sum::<f64>()).collect();
    let report = gmres(&op, &b, tol, 60, 20_000, Some(&project_mean_zero))?;
    let mut chi = report.solution;
    project_mean_zero(&mut chi);
    let mut r = vec![0.0; n];
    op.apply(&chi, &mut r);
    let residual = r.iter().zip(&b).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    Ok(CorrectorSolution { chi, residual })
}

/// `A*_ij = h^d sum_k sum_i' Q(i', k) (z_i z_j / 2 + chi_i(i') z_j)`,
/// symmetrized and divided by `sum phi phi* h^d`.
pub fn effective_matrix(q: &QKernel, chi: &[Vec<f64>], pair: &CellEigenpair) -> Vec<Vec<f64>> {
    let d = q.grid.d;
    let n = q.agg.n;
    let hd = q.grid.cell_volume();
    let mut a_star = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let q2 = &q.second[i * d + j];
            let q1 = &q.first[j];
            let mut s = 0.0;
            for ip in 0..n {
                let row2 = q2.row(ip);
                let row1 = q1.row(ip);
                let row_sum2: f64 = row2.iter().sum();
                let row_sum1: f64 = row1.iter().sum();
                s += 0.5 * row_sum2 + chi[i][ip] * row_sum1;
            }
            a_star[i][j] = s * hd;
        }
    }
    let norm: f64 = pair.phi.iter().zip(&pair.phi_star).map(|(a, b)| a * b).sum::<f64>() * hd;
    let mut a = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            a[i][j] = 0.5 * (a_star[i][j] + a_star[j][i]) / norm;
        }
    }
    a
}

/// `A_fd = -1/2` times the central-difference Hessian of `H` at `p0`.
pub fn hessian_fd(setup: &CellSetup<'_>, p0: &[f64], step: f64) -> Result<Vec<Vec<f64>>> {
    let d = p0.len();
    let at = |di: &[(usize, f64)]| {
        let mut p = p0.to_vec();
        for &(k, s) in di {
            p[k] += s;
        }
        setup.h(&p)
    };
    let h0 = at(&[])?;
    let mut a = vec![vec![0.0; d]; d];
    for i in 0..d {
        let second = (at(&[(i, step)])? - 2.0 * h0 + at(&[(i, -step)])?) / (step * step);
        a[i][i] = -0.5 * second;
        for j in 0..i {
            let mixed = (at(&[(i, step), (j, step)])? - at(&[(i, step), (j, -step)])?
                - at(&[(i, -step), (j, step)])?
                + at(&[(i, -step), (j, -step)])?)
                / (4.0 * step * step);
            a[i][j] = -0.5 * mixed;
            a[j][i] = -0.5 * mixed;
        }
    }
    Ok(a)
}

pub fn min_eigenvalue(a: &[Vec<f64>]) -> f64 {
    let d = a.len();
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| a[i][j]);
    linalg::symmetric_eigenvalues(&m)[0]
}

/// Everything the effective description needs from the cell problem.
#[derive(Debug, Clone)]
pub struct EffectiveModel {
    pub p0: Vec<f64>,
    pub h0: f64,
    pub pair: CellEigenpair,
    /// One mean-zero corrector per axis.
    pub chi_star: Vec<Vec<f64>>,
    pub corrector_residuals: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub a_fd: Vec<Vec<f64>>,
    /// `(max imbalance, max row sum)` of the factorized kernel.
    pub mass_balance: (f64, f64),
    pub m: f64,
    pub a_max: f64,
}

/// Step of the finite-difference Hessian cross-check.
pub const HESSIAN_FD_STEP: f64 = 1e-2;

/// Maximizes `H`, solves correctors at the maximizer and assembles `A`.
pub fn effective_model(setup: &CellSetup<'_>, tol_p: f64, p_max: f64) -> Result<EffectiveModel> {
    let (p0, _) = maximize_h(setup, tol_p, p_max)?;
    effective_model_at(setup, &p0)
}

/// Same as [`effective_model`] with a known maximizer.
pub fn effective_model_at(setup: &CellSetup<'_>, p0: &[f64]) -> Result<EffectiveModel> {
    let grid = setup.grid;
    let pair = hamiltonian(setup.model, p0, &setup.x, grid, setup.opts)?;
    if pair.classification == Classification::EssentialBottom {
        return Err(Error::EssentialBottom { h: pair.h, m: pair.m });
    }
    let q = QKernel::build(setup, &pair)?;
    let mut chi_star = Vec::with_capacity(grid.d);
    let mut corrector_residuals = Vec::with_capacity(grid.d);
    for axis in 0..grid.d {
        let sol = corrector_solve(&q, axis, setup.opts.tol)?;
        chi_star.push(sol.chi);
        corrector_residuals.push(sol.residual);
    }
    let a = effective_matrix(&q, &chi_star, &pair);
    let lmin = min_eigenvalue(&a);
    if !(lmin > 0.0) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: lmin });
    }
    let a_fd = hessian_fd(setup, p0, HESSIAN_FD_STEP)?;
    Ok(EffectiveModel {
        p0: p0.to_vec(),
        h0: pair.h,
        mass_balance: q.mass_balance(),
        m: pair.m,
        a_max: pair.a_max,
        pair,
        chi_star,
        corrector_residuals,
        a,
        a_fd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::model::{Domain, KernelSpec};
    use std::f64::consts::PI;

    fn model(kappa: &str, a: &str) -> Model {
        Model::new(
            KernelSpec::gaussian(1.0, 2.325, 0.5),
            parse(kappa).unwrap(),
            parse(a).unwrap(),
            Domain::unit(1),
        )
        .unwrap()
    }

    fn narrow(kappa: &str, a: &str) -> Model {
        Model::new(
            KernelSpec::gaussian(0.25, 2.0, 0.5),
            parse(kappa).unwrap(),
            parse(a).unwrap(),
            Domain::unit(1),
        )
        .unwrap()
    }

    fn opts(m: &Model) -> CellOptions {
        CellOptions::for_model(m).unwrap()
    }

    #[test]
    fn torus_grid_rules() {
        assert!(TorusGrid::new(1, 3).is_err());
        assert!(TorusGrid::new(1, 12).is_err());
        assert!(matches!(TorusGrid::with_cap(2, 64, 1000), Err(Error::Capacity { .. })));
        let g = TorusGrid::new(2, 4).unwrap();
        assert_eq!(g.offset_index(1, 2), 3);
        assert_eq!(g.offset_index(0, 5), 15);
        assert_eq!(g.node(6), vec![0.5, 0.25]);
    }

    #[test]
    fn hand_assembled_four_point_matrix() {
        let m = model("1", "2");
        let grid = TorusGrid::new(1, 4).unwrap();
        let setup = CellSetup::new(&m, grid, &[0.5], opts(&m)).unwrap();
        let op = setup.operator(&[0.0]).unwrap();
        let jd = |z: f64| (-z * z / 2.0).exp() / (2.0 * PI).sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let delta = ((i + 4 - j) % 4) as f64 / 4.0;
                let w: f64 = (-40..=40).map(|l| 0.25 * jd(delta + l as f64)).sum();
                let expected = if i == j { 2.0 - w } else { -w };
                assert!((op.matrix.get(i, j) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn trivial_case_matches_closed_form() {
        let m = model("1", "2");
        let grid = TorusGrid::new(1, 32).unwrap();
        let setup = CellSetup::new(&m, grid, &[0.5], opts(&m)).unwrap();
        for &p in &[0.0, 1.0] {
            let pair = setup.eigenpair(&[p]).unwrap();
            assert!((pair.h - (2.0 - (p * p / 2.0).exp())).abs() < 1e-9);
            assert!((pair.h_adjoint - pair.h).abs() < 1e-9);
            for v in pair.phi.iter().chain(&pair.phi_star) {
                assert!((v - 1.0).abs() < 1e-8);
            }
        }
        for n in [4, 8] {
            let setup = CellSetup::new(&m, TorusGrid::new(1, n).unwrap(), &[0.5], opts(&m)).unwrap();
            assert!((setup.h(&[0.0]).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_case_is_self_adjoint() {
        let m = model("1 + 0.3*cos(2*pi*(xi1 - eta1)) + 0.2*(sin(2*pi*xi1) + sin(2*pi*eta1))", "2 + sin(2*pi*xi1)");
        let setup = CellSetup::new(&m, TorusGrid::new(1, 16).unwrap(), &[0.5], opts(&m)).unwrap();
        let op = setup.operator(&[0.0]).unwrap();
        let t = op.matrix.transpose();
        for (a, b) in op.matrix.data.iter().zip(&t.data) {
            assert!((a - b).abs() < 1e-15);
        }
        let pair = setup.eigenpair(&[0.0]).unwrap();
        for (a, b) in pair.phi.iter().zip(&pair.phi_star) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn power_iteration_matches_dense_decomposition() {
        let m = model("1 + 0.5*sin(2*pi*(xi1 - eta1))", "2 + 0.5*cos(2*pi*xi1)");
        for n in [8, 16, 32] {
            let setup = CellSetup::new(&m, TorusGrid::new(1, n).unwrap(), &[0.5], opts(&m)).unwrap();
            for p in [-0.7, 0.0, 0.4] {
                let op = setup.operator(&[p]).unwrap();
                let h = op.principal(1e-12, 1_000_000).unwrap().value;
                assert!((h - op.dense_bottom()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mass_balance_and_positivity() {
        let m = model("1 + 0.5*sin(2*pi*(xi1 - eta1))", "2 + 0.5*cos(2*pi*xi1)");
        let setup = CellSetup::new(&m, TorusGrid::new(1, 32).unwrap(), &[0.5], opts(&m)).unwrap();
        let pair = setup.eigenpair(&[0.3]).unwrap();
        assert!(pair.phi.iter().chain(&pair.phi_star).all(|&v| v > 0.0));
        let q = QKernel::build(&setup, &pair).unwrap();
        let (imb, max_row) = q.mass_balance();
        assert!(imb <= 1e-8 * max_row, "{imb} vs {max_row}");
    }

    #[test]
    fn trivial_effective_matrix_is_one_half() {
        let m = model("1", "2");
        let setup = CellSetup::new(&m, TorusGrid::new(1, 16).unwrap(), &[0.5], opts(&m)).unwrap();
        let eff = effective_model(&setup, 1e-6, 3.0).unwrap();
        assert!(eff.p0[0].abs() < 1e-6);
        assert!((eff.a[0][0] - 0.5).abs() < 1e-8);
        assert!(eff.chi_star[0].iter().all(|v| v.abs() < 1e-8));
        assert!((eff.a_fd[0][0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn asymmetric_kappa_shifts_the_maximizer() {
        let m = narrow("exp(0.3*sin(2*pi*(xi1 - eta1)))", "2");
        let setup = CellSetup::new(&m, TorusGrid::new(1, 32).unwrap(), &[0.5], opts(&m)).unwrap();
        let (p0, _) = maximize_h(&setup, 1e-6, 3.0).unwrap();
        assert!(p0[0].abs() > 1e-3);
        let step = 1e-4;
        let g = (setup.h(&[p0[0] + step]).unwrap() - setup.h(&[p0[0] - step]).unwrap()) / (2.0 * step);
        assert!(g.abs() <= 1e-5, "gradient {g}");
    }

    #[test]
    fn corrector_matches_log_derivative_of_adjoint() {
        let m = narrow("1 + 0.5*sin(2*pi*xi1)", "2 + 0.4*cos(2*pi*xi1)");
        let setup = CellSetup::new(&m, TorusGrid::new(1, 32).unwrap(), &[0.5], opts(&m)).unwrap();
        let eff = effective_model(&setup, 1e-7, 3.0).unwrap();
        assert!(eff.corrector_residuals[0] <= 1e-8);
        let delta = 1e-3;
        let log_adj = |p: f64| -> Vec<f64> {
            let pair = setup.eigenpair(&[p]).unwrap();
            pair.phi_star.iter().map(|v| v.ln()).collect()
        };
        let (plus, minus) = (log_adj(eff.p0[0] + delta), log_adj(eff.p0[0] - delta));
        let mut fd: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * delta)).collect();
        let mean = fd.iter().sum::<f64>() / fd.len() as f64;
        fd.iter_mut().for_each(|v| *v -= mean);
        let diff = fd.iter().zip(&eff.chi_star[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let size = eff.chi_star[0].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(size > 1e-3, "corrector unexpectedly small: {size}");
        assert!(diff <= 1e-3, "corrector vs finite difference: {diff}");
        let rel = (eff.a[0][0] - eff.a_fd[0][0]).abs() / eff.a[0][0];
        assert!(rel <= 1e-3, "A = {:?}, A_fd = {:?}", eff.a, eff.a_fd);
    }
}

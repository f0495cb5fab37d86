//! The effective Hamilton–Jacobi problem of the locally periodic case.
//!
//! `H(p, x)` is tabulated from cell problems on a grid over the closed box in
//! `x` and a symmetric grid in `p`, interpolated multilinearly in `p`
//! (extrapolated linearly outside the grid) and taken at the grid node in `x`.
//!
//! The additive eigenvalue `Lambda` of `-H(grad W, x) = Lambda` in the box with
//! the state-constraint inequality `-H(grad W, x) >= Lambda` on the boundary is
//! computed by vanishing discount: the monotone scheme `delta u - H^(Du, x) = 0`
//! is solved for `delta = 2^-k` and `delta * mean(u)` tends to `-Lambda`.
//! Writing `H' = -H` this is the usual discounted problem
//! `delta u + H'(Du, x) = 0` for the convex Hamiltonian `H'`, whose limit
//! `-delta u -> c` gives the ergodic constant of `H'(grad W, x) = c`, and
//! `Lambda = c`.
//!
//! Boundary nodes use one-sided differences only: on a lower face the gradient
//! component is constrained by `s <= D+ u`, on an upper face by `s >= D- u`, and
//! the numerical Hamiltonian takes the supremum of `H` over the admissible
//! components. Interior components use either the same construction, with the
//! minimum over the two one-sided choices per axis (the Godunov flux for
//! concave `H`), or a Lax–Friedrichs average with viscosity
//! `theta >= max |dH/dp|`.

use rayon::prelude::*;
use serde::Serialize;

use crate::cell::{hamiltonian, CellOptions, CellSetup, Classification, TorusGrid};
use crate::error::{Error, Result};
use crate::linalg::{norm_inf, BandedLu};
use crate::model::{box_grid, Domain, Model};

/// Slack of the concavity check on tabulated lines.
pub const CONCAVITY_SLACK: f64 = 1e-8;

/// `H(p, x)` on the tensor product of an `x` grid and a `p` grid.
#[derive(Debug, Clone)]
pub struct HTable {
    pub domain: Domain,
    /// Nodes per axis over the closed box, first axis fastest.
    pub x_counts: Vec<usize>,
    pub p_max: f64,
    /// Nodes per axis of the `p` grid, odd so that `p = 0` is a node.
    pub p_count: usize,
    /// `values[x_index * p_len + p_index]`.
    pub values: Vec<f64>,
    /// Entries where the bottom of the cell spectrum is essential.
    pub essential: Vec<bool>,
    /// Regularization parameter when the table was built for `a^(delta)`.
    pub regularized: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
}

impl HTable {
    fn check_shape(domain: &Domain, x_counts: &[usize], p_max: f64, p_count: usize) -> Result<()> {
        if x_counts.len() != domain.dim() {
            return Err(Error::InvalidArgument("one x count per axis is required".into()));
        }
        if x_counts.iter().any(|&n| n < 3) {
            return Err(Error::InvalidArgument("each x axis needs at least 3 nodes".into()));
        }
        if !(p_max > 0.0 && p_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("p_max must be positive, got {p_max}")));
        }
        if p_count < 3 || p_count % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "the p grid needs an odd node count >= 3, got {p_count}"
            )));
        }
        Ok(())
    }

    /// Table of a given function `f(p, x)`.
    pub fn from_fn(
        domain: Domain,
        x_counts: Vec<usize>,
        p_max: f64,
        p_count: usize,
        f: impl Fn(&[f64], &[f64]) -> f64,
    ) -> Result<Self> {
        Self::check_shape(&domain, &x_counts, p_max, p_count)?;
        let mut table = HTable {
            domain,
            x_counts,
            p_max,
            p_count,
            values: Vec::new(),
            essential: Vec::new(),
            regularized: None,
        };
        let mut values = Vec::with_capacity(table.x_len() * table.p_len());
        for xk in 0..table.x_len() {
            let x = table.x_node(xk);
            for pk in 0..table.p_len() {
                values.push(f(&table.p_node(pk), &x));
            }
        }
        table.essential = vec![false; values.len()];
        table.values = values;
        table.check_edges()?;
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.x_counts.len()
    }

    pub fn x_len(&self) -> usize {
        self.x_counts.iter().product()
    }

    pub fn p_len(&self) -> usize {
        self.p_count.pow(self.dim() as u32)
    }

    pub fn x_spacing(&self, a: usize) -> f64 {
        self.domain.width(a) / (self.x_counts[a] - 1) as f64
    }

    pub fn p_spacing(&self) -> f64 {
        2.0 * self.p_max / (self.p_count - 1) as f64
    }

    pub fn x_multi_index(&self, k: usize) -> Vec<usize> {
        let mut rem = k;
        self.x_counts
            .iter()
            .map(|&n| {
                let i = rem % n;
                rem /= n;
                i
            })
            .collect()
    }

    pub fn x_node(&self, k: usize) -> Vec<f64> {
        self.x_multi_index(k)
            .into_iter()
            .enumerate()
            .map(|(a, i)| self.domain.lower[a] + i as f64 * self.x_spacing(a))
            .collect()
    }

    pub fn p_node(&self, k: usize) -> Vec<f64> {
        let mut rem = k;
        (0..self.dim())
            .map(|_| {
                let i = rem % self.p_count;
                rem /= self.p_count;
                self.p_axis(i)
            })
            .collect()
    }

    fn p_axis(&self, i: usize) -> f64 {
        -self.p_max + i as f64 * self.p_spacing()
    }

    /// Index of the `x` node nearest to `x`.
    pub fn nearest_x(&self, x: &[f64]) -> usize {
        let mut k = 0;
        let mut stride = 1;
        for a in 0..self.dim() {
            let t = ((x[a] - self.domain.lower[a]) / self.x_spacing(a)).round();
            let i = t.clamp(0.0, (self.x_counts[a] - 1) as f64) as usize;
            k += i * stride;
            stride *= self.x_counts[a];
        }
        k
    }

    pub fn node_value(&self, xk: usize, pk: usize) -> f64 {
        self.values[xk * self.p_len() + pk]
    }

    /// Multilinear interpolation in `p` at the `x` node `xk`.
    pub fn eval(&self, xk: usize, p: &[f64]) -> f64 {
        self.interpolate(xk, p, None).0
    }

    /// Value and gradient in `p` of the interpolant.
    pub fn eval_with_gradient(&self, xk: usize, p: &[f64]) -> (f64, Vec<f64>) {
        self.interpolate(xk, p, None)
    }

    /// `H` at an arbitrary `x`, using the nearest `x` node.
    pub fn eval_at(&self, x: &[f64], p: &[f64]) -> f64 {
        self.eval(self.nearest_x(x), p)
    }

    fn interpolate(&self, xk: usize, p: &[f64], sides: Option<&[Side]>) -> (f64, Vec<f64>) {
        let d = self.dim();
        let dp = self.p_spacing();
        let last = (self.p_count - 2) as f64;
        let mut cell = [0usize; 3];
        let mut w = [0.0f64; 3];
        for a in 0..d {
            let t = (p[a] + self.p_max) / dp;
            let mut k = t.floor();
            if let Some(s) = sides {
                if s[a] == Side::Lower && t == k && k > 0.0 {
                    k -= 1.0;
                }
            }
            let k = k.clamp(0.0, last);
            cell[a] = k as usize;
            w[a] = t - k;
        }
        let base = xk * self.p_len();
        let mut value = 0.0;
        let mut grad = vec![0.0; d];
        for corner in 0..(1usize << d) {
            let mut idx = 0;
            let mut stride = 1;
            let mut weight = 1.0;
            let mut partial = [1.0f64; 3];
            for a in 0..d {
                let bit = (corner >> a) & 1;
                idx += (cell[a] + bit) * stride;
                stride *= self.p_count;
                let (wa, da) = if bit == 1 { (w[a], 1.0) } else { (1.0 - w[a], -1.0) };
                weight *= wa;
                for (b, pb) in partial.iter_mut().enumerate().take(d) {
                    *pb *= if b == a { da / dp } else { wa };
                }
            }
            let h = self.values[base + idx];
            value += weight * h;
            for a in 0..d {
                grad[a] += partial[a] * h;
            }
        }
        (value, grad)
    }

    /// Largest absolute table difference quotient along axis `a`.
    pub fn max_slope(&self, a: usize) -> f64 {
        let stride = self.p_count.pow(a as u32);
        let dp = self.p_spacing();
        let mut best = 0.0f64;
        for xk in 0..self.x_len() {
            for pk in 0..self.p_len() {
                if (pk / stride) % self.p_count + 1 < self.p_count {
                    let diff = self.node_value(xk, pk + stride) - self.node_value(xk, pk);
                    best = best.max(diff.abs() / dp);
                }
            }
        }
        best
    }

    /// Largest positive second difference along grid lines in `p`.
    pub fn concavity_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.dim() {
            let stride = self.p_count.pow(a as u32);
            for xk in 0..self.x_len() {
                for pk in 0..self.p_len() {
                    let i = (pk / stride) % self.p_count;
                    if i == 0 || i + 1 == self.p_count {
                        continue;
                    }
                    let c = self.node_value(xk, pk);
                    let second = self.node_value(xk, pk - stride) - 2.0 * c + self.node_value(xk, pk + stride);
                    worst = worst.max(second / c.abs().max(1.0));
                }
            }
        }
        worst
    }

    /// `max` over the `p` grid at each `x` node.
    pub fn max_over_p(&self) -> Vec<f64> {
        (0..self.x_len())
            .map(|xk| {
                (0..self.p_len())
                    .map(|pk| self.node_value(xk, pk))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// `H` must not increase toward the edges of the `p` grid, so that linear
    /// extrapolation does not increase outward.
    fn check_edges(&self) -> Result<()> {
        for a in 0..self.dim() {
            let stride = self.p_count.pow(a as u32);
            for xk in 0..self.x_len() {
                for pk in 0..self.p_len() {
                    let i = (pk / stride) % self.p_count;
                    let (edge, inner) = if i == 0 {
                        (pk, pk + stride)
                    } else if i + 1 == self.p_count {
                        (pk, pk - stride)
                    } else {
                        continue;
                    };
                    if self.node_value(xk, edge) > self.node_value(xk, inner) {
                        return Err(Error::BoundaryMaximizer {
                            p: self.p_node(edge),
                            p_max: self.p_max,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Tabulates `H(p, x)` from cell problems.
///
/// Rows in `x` are computed in parallel; each row reuses one cell setup for
/// all `p`. Essential-bottom entries hold `min_xi a(x, xi)` and are flagged.
pub fn tabulate_h(
    model: &Model,
    x_counts: Vec<usize>,
    p_max: f64,
    p_count: usize,
    torus: TorusGrid,
    opts: CellOptions,
) -> Result<HTable> {
    HTable::check_shape(&model.domain, &x_counts, p_max, p_count)?;
    let mut table = HTable {
        domain: model.domain.clone(),
        x_counts,
        p_max,
        p_count,
        values: Vec::new(),
        essential: Vec::new(),
        regularized: None,
    };
    let xs: Vec<Vec<f64>> = (0..table.x_len()).map(|k| table.x_node(k)).collect();
    let ps: Vec<Vec<f64>> = (0..table.p_len()).map(|k| table.p_node(k)).collect();
    let rows: Vec<Vec<(f64, bool)>> = xs
        .par_iter()
        .map(|x| {
            let setup = CellSetup::new(model, torus, x, opts)?;
            ps.iter()
                .map(|p| tabulate_entry(model, &setup, p, x).map_err(|e| annotate(e, p, x)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let tol_class = |m: f64| opts.class_threshold(m);
    for (row, x) in rows.iter().zip(&xs) {
        let setup_m = CellSetup::new(model, torus, x, opts)?.m;
        for (h, _) in row {
            if *h > setup_m + tol_class(setup_m) {
                return Err(Error::Validation(format!(
                    "tabulated H = {h} exceeds min a = {setup_m} at x = {x:?}"
                )));
            }
        }
    }
    for row in rows {
        for (h, ess) in row {
            table.values.push(h);
            table.essential.push(ess);
        }
    }
    let violation = table.concavity_violation();
    if violation > CONCAVITY_SLACK {
        return Err(Error::Validation(format!(
            "tabulated H is not concave in p: second difference {violation:.3e} exceeds {CONCAVITY_SLACK:e}"
        )));
    }
    table.check_edges()?;
    Ok(table)
}

fn annotate(e: Error, p: &[f64], x: &[f64]) -> Error {
    match e {
        Error::NonConvergence { .. } | Error::Reducible(_) | Error::Truncation { .. } => {
            Error::Validation(format!("cell solve failed at p = {p:?}, x = {x:?}: {e}"))
        }
        other => other,
    }
}

fn tabulate_entry(model: &Model, setup: &CellSetup<'_>, p: &[f64], x: &[f64]) -> Result<(f64, bool)> {
    let h = setup.h(p)?;
    let threshold = setup.opts.class_threshold(setup.m);
    if setup.m - h <= threshold {
        return Ok((setup.m, true));
    }
    let range = setup.a_max - setup.m;
    if setup.opts.refine_classification && range > 0.0 && setup.m - h < crate::cell::REFINEMENT_GAP_FRACTION * range {
        let pair = hamiltonian(model, p, x, setup.grid, setup.opts)?;
        if pair.classification == Classification::EssentialBottom {
            return Ok((setup.m, true));
        }
    }
    Ok((h, false))
}

/// Tabulates `H`; if any entry has an essential bottom and `delta` is given,
/// the rate is regularized to `a^(delta)` and the table rebuilt.
pub fn tabulate_h_regularized(
    model: &Model,
    x_counts: Vec<usize>,
    p_max: f64,
    p_count: usize,
    torus: TorusGrid,
    opts: CellOptions,
    delta: Option<f64>,
) -> Result<HTable> {
    let table = tabulate_h(model, x_counts.clone(), p_max, p_count, torus, opts)?;
    match delta {
        Some(delta) if table.essential.iter().any(|&e| e) => {
            let samples = torus.n.max(64);
            let regularized = model.regularize_rate(delta, samples, x_counts.iter().copied().max().unwrap_or(3))?;
            let opts = CellOptions::for_model(&regularized)?;
            let mut table = tabulate_h(&regularized, x_counts, p_max, p_count, torus, opts)?;
            table.regularized = Some(delta);
            Ok(table)
        }
        _ => Ok(table),
    }
}

/// Numerical Hamiltonian of the discounted scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// Minimum over one-sided choices per interior axis of the supremum of `H`
    /// over the admissible gradient components.
    Godunov,
    /// `H` at central differences plus `theta/2 (D+ - D-)` per interior axis.
    LaxFriedrichs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Route {
    Discounted,
    InfMax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjOptions {
    /// Discounts `2^-k` for `k` in `k_min..=k_max`.
    pub k_min: u32,
    pub k_max: u32,
    /// Residual tolerance of each discounted solve.
    pub tol: f64,
    pub max_newton: usize,
    pub scheme: Scheme,
}

impl Default for HjOptions {
    fn default() -> Self {
        HjOptions {
            k_min: 3,
            k_max: 8,
            tol: 1e-10,
            max_newton: 500,
            scheme: Scheme::Godunov,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicSolution {
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    /// Normalized to mean zero, on the `x` nodes of the table.
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub residual: f64,
    /// Constant-trajectory bound `-min_x max_p H`.
    pub lower_bound_check: f64,
    pub route: Route,
    /// `(delta, delta * mean(u_delta))` for the discounted route.
    pub discount_values: Vec<(f64, f64)>,
    /// Ratios of successive differences of `delta * mean(u_delta)`.
    pub cauchy_ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Average,
    Plus,
    Minus,
}

/// The numerical Hamiltonian at one node and its partial derivatives in the
/// one-sided differences.
struct NodeValue {
    value: f64,
    d_plus: [f64; 3],
    d_minus: [f64; 3],
}

/// Precomputed per-axis data for the scheme.
struct SchemeData<'t> {
    table: &'t HTable,
    scheme: Scheme,
    theta: Vec<f64>,
    h: Vec<f64>,
    strides: Vec<usize>,
    p_nodes: Vec<f64>,
}

impl<'t> SchemeData<'t> {
    fn new(table: &'t HTable, scheme: Scheme) -> Result<Self> {
        let d = table.dim();
        let theta: Vec<f64> = (0..d).map(|a| table.max_slope(a)).collect();
        if theta.iter().any(|t| !t.is_finite() || *t > 1e12) {
            return Err(Error::NonConvergence {
                what: "viscosity parameter",
                iterations: 0,
                residual: theta.iter().copied().fold(0.0, f64::max),
            });
        }
        let mut strides = Vec::with_capacity(d);
        let mut s = 1;
        for &n in &table.x_counts {
            strides.push(s);
            s *= n;
        }
        Ok(SchemeData {
            table,
            scheme,
            theta,
            h: (0..d).map(|a| table.x_spacing(a)).collect(),
            strides,
            p_nodes: (0..table.p_count).map(|i| table.p_axis(i)).collect(),
        })
    }

    /// `sum_a theta_a / h_a`, a bound on the dependence of the numerical
    /// Hamiltonian on the node value.
    fn lipschitz(&self) -> f64 {
        self.theta.iter().zip(&self.h).map(|(t, h)| t / h).sum()
    }

    fn node(&self, k: usize, u: &[f64]) -> NodeValue {
        let t = self.table;
        let d = t.dim();
        let idx = t.x_multi_index(k);
        let mut dp = [0.0f64; 3];
        let mut dm = [0.0f64; 3];
        let mut options: Vec<&[Mode]> = Vec::with_capacity(d);
        for a in 0..d {
            let st = self.strides[a];
            if idx[a] + 1 < t.x_counts[a] {
                dp[a] = (u[k + st] - u[k]) / self.h[a];
            }
            if idx[a] > 0 {
                dm[a] = (u[k] - u[k - st]) / self.h[a];
            }
            options.push(if idx[a] == 0 {
                &[Mode::Plus]
            } else if idx[a] + 1 == t.x_counts[a] {
                &[Mode::Minus]
            } else {
                match self.scheme {
                    Scheme::Godunov => &[Mode::Plus, Mode::Minus],
                    Scheme::LaxFriedrichs => &[Mode::Average],
                }
            });
        }
        let mut best: Option<NodeValue> = None;
        let combos: usize = options.iter().map(|o| o.len()).product();
        let mut modes = [Mode::Average; 3];
        for c in 0..combos {
            let mut rem = c;
            for a in 0..d {
                modes[a] = options[a][rem % options[a].len()];
                rem /= options[a].len();
            }
            let cand = self.evaluate_modes(k, &modes[..d], &dp, &dm);
            if best.as_ref().map_or(true, |b| cand.value < b.value) {
                best = Some(cand);
            }
        }
        best.expect("at least one mode combination")
    }

    fn evaluate_modes(&self, k: usize, modes: &[Mode], dp: &[f64; 3], dm: &[f64; 3]) -> NodeValue {
        let d = modes.len();
        // Candidate gradient components per axis; the constraint value is last.
        let mut cands: Vec<Vec<f64>> = Vec::with_capacity(d);
        for a in 0..d {
            cands.push(match modes[a] {
                Mode::Average => vec![0.5 * (dp[a] + dm[a])],
                Mode::Plus => {
                    let mut v: Vec<f64> = self.p_nodes.iter().copied().filter(|&p| p < dp[a]).collect();
                    v.push(dp[a]);
                    v
                }
                Mode::Minus => {
                    let mut v: Vec<f64> = self.p_nodes.iter().copied().filter(|&p| p > dm[a]).collect();
                    v.push(dm[a]);
                    v
                }
            });
        }
        let total: usize = cands.iter().map(|c| c.len()).product();
        let mut point = [0.0f64; 3];
        let mut best_val = f64::NEG_INFINITY;
        let mut best_choice = [0usize; 3];
        let mut choice = [0usize; 3];
        for c in 0..total {
            let mut rem = c;
            for a in 0..d {
                choice[a] = rem % cands[a].len();
                rem /= cands[a].len();
                point[a] = cands[a][choice[a]];
            }
            let v = self.table.eval(k, &point[..d]);
            if v > best_val {
                best_val = v;
                best_choice = choice;
            }
        }
        let mut sides = [Side::Upper; 3];
        for a in 0..d {
            point[a] = cands[a][best_choice[a]];
            if modes[a] == Mode::Plus {
                sides[a] = Side::Lower;
            }
        }
        let (_, grad) = self.table.interpolate(k, &point[..d], Some(&sides[..d]));
        let mut value = best_val;
        let mut d_plus = [0.0; 3];
        let mut d_minus = [0.0; 3];
        for a in 0..d {
            let binding = best_choice[a] + 1 == cands[a].len();
            match modes[a] {
                Mode::Average => {
                    value += 0.5 * self.theta[a] * (dp[a] - dm[a]);
                    d_plus[a] = 0.5 * (grad[a] + self.theta[a]);
                    d_minus[a] = 0.5 * (grad[a] - self.theta[a]);
                }
                Mode::Plus if binding => d_plus[a] = grad[a],
                Mode::Minus if binding => d_minus[a] = grad[a],
                _ => {}
            }
        }
        NodeValue { value, d_plus, d_minus }
    }

    fn residual(&self, delta: f64, u: &[f64]) -> Vec<f64> {
        (0..u.len()).map(|k| delta * u[k] - self.node(k, u).value).collect()
    }

    fn bandwidth(&self) -> usize {
        *self.strides.last().unwrap()
    }

    fn jacobian(&self, delta: f64, u: &[f64]) -> Result<(Vec<f64>, BandedLu)> {
        let n = u.len();
        let mut jac = BandedLu::new(n, self.bandwidth());
        let mut f = vec![0.0; n];
        for k in 0..n {
            let nv = self.node(k, u);
            f[k] = delta * u[k] - nv.value;
            jac.add(k, k, delta);
            for a in 0..self.table.dim() {
                let st = self.strides[a];
                let h = self.h[a];
                if nv.d_plus[a] != 0.0 {
                    jac.add(k, k, nv.d_plus[a] / h);
                    jac.add(k, k + st, -nv.d_plus[a] / h);
                }
                if nv.d_minus[a] != 0.0 {
                    jac.add(k, k, -nv.d_minus[a] / h);
                    jac.add(k, k - st, nv.d_minus[a] / h);
                }
            }
        }
        jac.factor()?;
        Ok((f, jac))
    }
}

/// One explicit step `u - tau (delta u - H^(Du))` with
/// `tau = 1 / (delta + sum_a theta_a / h_a)`; monotone in every entry of `u`.
pub fn monotone_update(table: &HTable, scheme: Scheme, delta: f64, u: &[f64]) -> Result<Vec<f64>> {
    let data = SchemeData::new(table, scheme)?;
    let tau = 1.0 / (delta + data.lipschitz());
    Ok(data
        .residual(delta, u)
        .iter()
        .zip(u)
        .map(|(r, v)| v - tau * r)
        .collect())
}

/// Solves `delta u - H^(Du, x) = 0` by semismooth Newton with backtracking.
pub fn solve_discounted(table: &HTable, scheme: Scheme, delta: f64, u0: Vec<f64>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64, usize)> {
    let data = SchemeData::new(table, scheme)?;
    let mut u = u0;
    let scale = |u: &[f64]| tol * (1.0 + delta * norm_inf(u));
    let mut r = data.residual(delta, &u);
    let mut rn = norm_inf(&r);
    for it in 0..max_iter {
        if rn <= scale(&u) {
            return Ok((u, rn, it));
        }
        let (f, jac) = data.jacobian(delta, &u)?;
        let mut step = f;
        jac.solve_in_place(&mut step);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let tr = data.residual(delta, &trial);
            let tn = norm_inf(&tr);
            if tn < (1.0 - 1e-4 * t) * rn || tn <= scale(&trial) {
                u = trial;
                r = tr;
                rn = tn;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::NonConvergence {
                    what: "discounted Hamilton-Jacobi solve",
                    iterations: it,
                    residual: rn,
                });
            }
        }
    }
    let _ = r;
    if rn <= scale(&u) {
        return Ok((u, rn, max_iter));
    }
    Err(Error::NonConvergence {
        what: "discounted Hamilton-Jacobi solve",
        iterations: max_iter,
        residual: rn,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Additive eigenvalue by the chosen route.
pub fn additive_eigenvalue(table: &HTable, route: Route, opts: &HjOptions) -> Result<ErgodicSolution> {
    match route {
        Route::Discounted => discounted(table, opts),
        Route::InfMax => inf_max(table),
    }
}

fn discounted(table: &HTable, opts: &HjOptions) -> Result<ErgodicSolution> {
    if opts.k_max <= opts.k_min {
        return Err(Error::InvalidArgument("k_max must exceed k_min".into()));
    }
    let data = SchemeData::new(table, opts.scheme)?;
    let n = table.x_len();
    let mut values = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut residual = 0.0;
    for k in opts.k_min..=opts.k_max {
        let delta = 0.5f64.powi(k as i32);
        let start = match values.last() {
            None => {
                let zero = vec![0.0; n];
                (0..n).map(|i| data.node(i, &zero).value / delta).collect()
            }
            Some(&(prev_delta, c)) => u.iter().map(|v| v + c * (1.0 / delta - 1.0 / prev_delta)).collect(),
        };
        let (sol, r, _) = solve_discounted(table, opts.scheme, delta, start, opts.tol, opts.max_newton)?;
        residual = r;
        values.push((delta, delta * mean(&sol)));
        u = sol;
    }
    let len = values.len();
    // delta * mean(u) = -Lambda + c1 delta + c2 delta^2 + ...; eliminate c1 and c2.
    let lambda = if len >= 3 {
        -(8.0 * values[len - 1].1 - 6.0 * values[len - 2].1 + values[len - 3].1) / 3.0
    } else {
        -(2.0 * values[len - 1].1 - values[len - 2].1)
    };
    let cauchy_ratios = (2..len)
        .map(|i| {
            let num = (values[i].1 - values[i - 1].1).abs();
            let den = (values[i - 1].1 - values[i - 2].1).abs();
            // Differences at the solver tolerance carry no rate information.
            if num <= 10.0 * opts.tol || den == 0.0 {
                0.0
            } else {
                num / den
            }
        })
        .collect();
    let m = mean(&u);
    Ok(ErgodicSolution {
        lambda,
        w: u.iter().map(|v| v - m).collect(),
        residual,
        lower_bound_check: constant_trajectory_bound(table),
        route: Route::Discounted,
        discount_values: values,
        cauchy_ratios,
    })
}

/// Tensor monomials of degree at most 3 per axis, without the constant, in
/// coordinates mapped to `[-1, 1]`.
struct PolyBasis {
    exps: Vec<Vec<u32>>,
    lower: Vec<f64>,
    width: Vec<f64>,
}

impl PolyBasis {
    fn new(domain: &Domain) -> Self {
        let d = domain.dim();
        let exps = (1..4usize.pow(d as u32))
            .map(|k| {
                let mut rem = k;
                (0..d)
                    .map(|_| {
                        let e = (rem % 4) as u32;
                        rem /= 4;
                        e
                    })
                    .collect()
            })
            .collect();
        PolyBasis {
            exps,
            lower: domain.lower.clone(),
            width: (0..d).map(|a| domain.width(a)).collect(),
        }
    }

    /// Gradient of each basis function at `x`, `out[j][a]`.
    fn gradients(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let d = x.len();
        let t: Vec<f64> = (0..d).map(|a| 2.0 * (x[a] - self.lower[a]) / self.width[a] - 1.0).collect();
        self.exps
            .iter()
            .map(|e| {
                (0..d)
                    .map(|a| {
                        if e[a] == 0 {
                            return 0.0;
                        }
                        let mut g = e[a] as f64 * t[a].powi(e[a] as i32 - 1) * 2.0 / self.width[a];
                        for b in 0..d {
                            if b != a {
                                g *= t[b].powi(e[b] as i32);
                            }
                        }
                        g
                    })
                    .collect()
            })
            .collect()
    }
}

/// `max_x -H(grad W(x), x)` for `W = sum c_j b_j`.
fn inf_max_objective(table: &HTable, grads: &[Vec<Vec<f64>>], c: &[f64]) -> f64 {
    let d = table.dim();
    let mut worst = f64::NEG_INFINITY;
    let mut p = vec![0.0; d];
    for (xk, g) in grads.iter().enumerate() {
        for a in 0..d {
            p[a] = g.iter().zip(c).map(|(gj, cj)| gj[a] * cj).sum();
        }
        worst = worst.max(-table.eval(xk, &p));
    }
    worst
}

fn compass(table: &HTable, grads: &[Vec<Vec<f64>>], start: Vec<f64>, step0: f64) -> (Vec<f64>, f64) {
    let mut c = start;
    let mut f = inf_max_objective(table, grads, &c);
    let mut step = step0;
    let mut evals = 0;
    while step > 1e-9 && evals < 200_000 {
        let mut improved = false;
        for j in 0..c.len() {
            for sign in [1.0, -1.0] {
                let mut trial = c.clone();
                trial[j] += sign * step;
                let ft = inf_max_objective(table, grads, &trial);
                evals += 1;
                if ft < f {
                    c = trial;
                    f = ft;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (c, f)
}

fn inf_max(table: &HTable) -> Result<ErgodicSolution> {
    let basis = PolyBasis::new(&table.domain);
    let xs: Vec<Vec<f64>> = (0..table.x_len()).map(|k| table.x_node(k)).collect();
    let grads: Vec<Vec<Vec<f64>>> = xs.iter().map(|x| basis.gradients(x)).collect();
    let nb = basis.exps.len();
    let d = table.dim();
    // Second start: least-squares fit of grad W to the pointwise maximizers.
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for (xk, g) in grads.iter().enumerate() {
        let best = (0..table.p_len())
            .max_by(|&a, &b| table.node_value(xk, a).total_cmp(&table.node_value(xk, b)))
            .unwrap();
        let pstar = table.p_node(best);
        for a in 0..d {
            rows.push(g.iter().map(|gj| gj[a]).collect::<Vec<f64>>());
            rhs.push(pstar[a]);
        }
    }
    let design = nalgebra::DMatrix::from_fn(rows.len(), nb, |i, j| rows[i][j]);
    let target = nalgebra::DVector::from_vec(rhs);
    let fit = design
        .svd(true, true)
        .solve(&target, 1e-12)
        .map(|v| v.iter().copied().collect::<Vec<f64>>())
        .unwrap_or_else(|_| vec![0.0; nb]);
    let step0 = 0.25 * table.p_max * table.domain.width(0);
    let (c0, f0) = compass(table, &grads, vec![0.0; nb], step0);
    let (c1, f1) = compass(table, &grads, fit, step0);
    let (c, f) = if f1 < f0 { (c1, f1) } else { (c0, f0) };
    let w: Vec<f64> = xs
        .iter()
        .map(|x| {
            let t: Vec<f64> = (0..d)
                .map(|a| 2.0 * (x[a] - basis.lower[a]) / basis.width[a] - 1.0)
                .collect();
            basis
                .exps
                .iter()
                .zip(&c)
                .map(|(e, cj)| cj * (0..d).map(|a| t[a].powi(e[a] as i32)).product::<f64>())
                .sum()
        })
        .collect();
    let m = mean(&w);
    Ok(ErgodicSolution {
        lambda: f,
        w: w.iter().map(|v| v - m).collect(),
        residual: 0.0,
        lower_bound_check: constant_trajectory_bound(table),
        route: Route::InfMax,
        discount_values: Vec::new(),
        cauchy_ratios: Vec::new(),
    })
}

/// `-min_x max_p H(p, x)` over the table grid: the average action of constant
/// trajectories bounds `Lambda` from below.
pub fn constant_trajectory_bound(table: &HTable) -> f64 {
    -table.max_over_p().into_iter().fold(f64::INFINITY, f64::min)
}

/// `L(q, x) = max_p (q.p + H(p, x))` at the `x` node `xk`.
///
/// Each `p` node contributes the maximum of `q.p + Q(p)` over its
/// neighbourhood, with `Q` the separable concave quadratic through the node
/// and its axis neighbours. As a supremum of affine functions of `q` the
/// result is convex in `q`.
pub fn lagrangian(table: &HTable, xk: usize, q: &[f64]) -> f64 {
    let d = table.dim();
    let dp = table.p_spacing();
    let mut best = f64::NEG_INFINITY;
    for pk in 0..table.p_len() {
        let p = table.p_node(pk);
        let h0 = table.node_value(xk, pk);
        let mut total = h0 + q.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
        for a in 0..d {
            let stride = table.p_count.pow(a as u32);
            let i = (pk / stride) % table.p_count;
            if i == 0 || i + 1 == table.p_count {
                continue;
            }
            let lo = table.node_value(xk, pk - stride);
            let hi = table.node_value(xk, pk + stride);
            let slope = (hi - lo) / (2.0 * dp) + q[a];
            let curv = ((hi - 2.0 * h0 + lo) / (dp * dp)).min(0.0);
            // max over |t| <= dp of slope t + curv t^2 / 2
            let t = if curv < 0.0 { (-slope / curv).clamp(-dp, dp) } else { dp * slope.signum() };
            total += slope * t + 0.5 * curv * t * t;
        }
        best = best.max(total);
    }
    best
}

/// Points of the closed box used as table `x` nodes.
pub fn x_nodes(domain: &Domain, n: usize) -> Vec<Vec<f64>> {
    box_grid(domain, n)
}

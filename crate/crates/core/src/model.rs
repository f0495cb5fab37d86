//! Problem data: dispersal kernel, coupling, rate and domain.
//!
//! A [`Model`] bundles the kernel `J`, the coupling `kappa(x, y, xi, eta)`, the
//! rate `a(x, xi)` and the box `Omega`. Fast arguments are folded into the unit
//! torus before substitution, so both coefficients are 1-periodic in them by
//! construction.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::expr::{Expression, Slots, VarKind};

/// Lattice sums for the normalized Gaussian run over `|l|_inf <= LATTICE_RANGE`.
pub const LATTICE_RANGE: i32 = 6;
/// Largest truncation radius tried before giving up.
pub const TRUNCATION_CAP: f64 = 1e3;
/// Safety factor applied to the bracketed truncation radius.
pub const TRUNCATION_SAFETY: f64 = 1.5;
/// Number of deterministic coefficient samples used during validation.
pub const VALIDATION_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelForm {
    /// Centered Gaussian density with standard deviation `sigma` per axis.
    Gaussian { sigma: f64 },
    /// `mu * exp(-|z|^2) / sum_l exp(-|frac(z) + l|^2)`, whose lattice
    /// translates sum to `mu` everywhere.
    LatticeGaussian { mu: f64 },
    /// User expression in `z1..zd`.
    Custom(Expression),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub form: KernelForm,
    /// `C` in the tail bound `J(z) <= C exp(-|z|^(1+beta))`.
    pub decay_c: f64,
    pub decay_beta: f64,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64, decay_c: f64, decay_beta: f64) -> Self {
        KernelSpec {
            form: KernelForm::Gaussian { sigma },
            decay_c,
            decay_beta,
        }
    }

    pub fn lattice_gaussian(mu: f64, decay_c: f64, decay_beta: f64) -> Self {
        KernelSpec {
            form: KernelForm::LatticeGaussian { mu },
            decay_c,
            decay_beta,
        }
    }

    pub fn value(&self, z: &[f64]) -> Result<f64> {
        match &self.form {
            KernelForm::Gaussian { sigma } => {
                let d = z.len() as i32;
                let r2: f64 = z.iter().map(|v| v * v).sum();
                let norm = (2.0 * PI * sigma * sigma).powi(d).sqrt();
                Ok((-r2 / (2.0 * sigma * sigma)).exp() / norm)
            }
            KernelForm::LatticeGaussian { mu } => {
                let mut value = *mu;
                for &zk in z {
                    let f = zk - zk.round();
                    let denom: f64 = (-LATTICE_RANGE..=LATTICE_RANGE)
                        .map(|l| {
                            let t = f + l as f64;
                            (-t * t).exp()
                        })
                        .sum();
                    value *= (-zk * zk).exp() / denom;
                }
                Ok(value)
            }
            KernelForm::Custom(e) => Ok(e.evaluate(&Slots {
                z,
                ..Default::default()
            })?),
        }
    }

    /// The tail bound `C exp(-|z|^(1+beta))` at radius `r`.
    pub fn decay_bound(&self, r: f64) -> f64 {
        self.decay_c * (-r.powf(1.0 + self.decay_beta)).exp()
    }
}

/// Axis-aligned box `prod [lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Validation(
                "domain bounds must be nonempty and of equal length".into(),
            ));
        }
        if lower.len() > 3 {
            return Err(Error::Validation(format!(
                "dimension {} unsupported; d must be 1, 2 or 3",
                lower.len()
            )));
        }
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && u > l) {
                return Err(Error::Validation(format!(
                    "axis {}: interval [{l}, {u}] is empty",
                    k + 1
                )));
            }
        }
        Ok(Domain { lower, upper })
    }

    pub fn unit(d: usize) -> Self {
        Domain {
            lower: vec![0.0; d],
            upper: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn width(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }
}

/// The regularized rate `a^(delta) = max(a, a_hat^(delta) + delta/2)` with
/// `a_hat(x) = min_xi a(x, xi)` and `a_hat^(delta) = max(a_hat, min_Omega a_hat + delta/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedRate {
    pub base: Expression,
    pub delta: f64,
    /// Points per axis of the torus grid over which `a_hat` is minimized.
    pub torus_samples: usize,
    /// `min_Omega a_hat`, precomputed.
    pub global_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rate {
    Expr(Expression),
    Regularized(RegularizedRate),
}

impl Rate {
    fn base(&self) -> &Expression {
        match self {
            Rate::Expr(e) => e,
            Rate::Regularized(r) => &r.base,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Rate::Expr(e) => e.source().to_string(),
            Rate::Regularized(r) => format!("regularized({}, delta={})", r.base.source(), r.delta),
        }
    }
}

/// The rate with its slow argument frozen; cheap to evaluate repeatedly in `xi`.
#[derive(Debug, Clone)]
pub struct FrozenRate<'a> {
    expr: &'a Expression,
    x: Vec<f64>,
    floor: Option<f64>,
}

impl FrozenRate<'_> {
    pub fn eval(&self, xi: &[f64]) -> Result<f64> {
        let folded = fold(xi);
        let v = self.expr.evaluate(&Slots {
            x: &self.x,
            xi: &folded,
            ..Default::default()
        })?;
        Ok(match self.floor {
            Some(f) => v.max(f),
            None => v,
        })
    }
}

/// Map each component into `[0, 1)`.
pub fn fold(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&t| fold1(t)).collect()
}

#[inline]
pub fn fold1(t: f64) -> f64 {
    let f = t - t.floor();
    // `t - floor(t)` rounds to 1.0 for tiny negative `t`.
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kernel: KernelSpec,
    pub kappa: Expression,
    pub rate: Rate,
    pub domain: Domain,
}

impl Model {
    /// Checks that each expression only uses variables it may depend on.
    pub fn new(kernel: KernelSpec, kappa: Expression, rate: Expression, domain: Domain) -> Result<Self> {
        let d = domain.dim();
        check_vars("kappa", &kappa, &[VarKind::X, VarKind::Y, VarKind::Xi, VarKind::Eta], d)?;
        check_vars("a", &rate, &[VarKind::X, VarKind::Xi], d)?;
        if let KernelForm::Custom(e) = &kernel.form {
            check_vars("J", e, &[VarKind::Z], d)?;
        }
        for (name, v) in [("decay_C", kernel.decay_c), ("decay_beta", kernel.decay_beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        match kernel.form {
            KernelForm::Gaussian { sigma } if !(sigma > 0.0) => {
                return Err(Error::Validation(format!("gaussian sigma must be positive, got {sigma}")))
            }
            KernelForm::LatticeGaussian { mu } if !(mu > 0.0) => {
                return Err(Error::Validation(format!("lattice gaussian mu must be positive, got {mu}")))
            }
            _ => {}
        }
        Ok(Model {
            kernel,
            kappa,
            rate: Rate::Expr(rate),
            domain,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// True when neither coefficient depends on the slow variables.
    pub fn is_periodic(&self) -> bool {
        !self.kappa.uses(VarKind::X) && !self.kappa.uses(VarKind::Y) && !self.rate.base().uses(VarKind::X)
    }

    pub fn kappa(&self, x: &[f64], y: &[f64], xi: &[f64], eta: &[f64]) -> Result<f64> {
        let (xi, eta) = (fold(xi), fold(eta));
        Ok(self.kappa.evaluate(&Slots {
            x,
            y,
            xi: &xi,
            eta: &eta,
            z: &[],
        })?)
    }

    /// Whether kappa depends on any fast variable.
    pub fn kappa_is_fast_constant(&self) -> bool {
        !self.kappa.uses(VarKind::Xi) && !self.kappa.uses(VarKind::Eta)
    }

    pub fn freeze_rate(&self, x: &[f64]) -> Result<FrozenRate<'_>> {
        let floor = match &self.rate {
            Rate::Expr(_) => None,
            Rate::Regularized(r) => {
                let a_hat = min_over_torus(&r.base, x, r.torus_samples)?;
                let a_hat_delta = a_hat.max(r.global_floor + r.delta / 2.0);
                Some(a_hat_delta + r.delta / 2.0)
            }
        };
        Ok(FrozenRate {
            expr: self.rate.base(),
            x: x.to_vec(),
            floor,
        })
    }

    pub fn rate(&self, x: &[f64], xi: &[f64]) -> Result<f64> {
        self.freeze_rate(x)?.eval(xi)
    }

    /// `J(z) exp(p.z) kappa(x, x, xi, xi - z)`, the tilted cell-problem integrand.
    pub fn tilted_kernel_value(&self, p: &[f64], x: &[f64], xi: &[f64], z: &[f64]) -> Result<f64> {
        let j = self.kernel.value(z)?;
        let pz: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
        let eta: Vec<f64> = xi.iter().zip(z).map(|(a, b)| a - b).collect();
        Ok(j * pz.exp() * self.kappa(x, x, xi, &eta)?)
    }

    /// A copy whose rate is replaced by its `delta`-regularization.
    ///
    /// `a_hat` is minimized over a torus grid with `torus_samples` points per
    /// axis; `min_Omega a_hat` over a grid of `domain_samples` points per axis
    /// including the boundary.
    pub fn regularize_rate(&self, delta: f64, torus_samples: usize, domain_samples: usize) -> Result<Model> {
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        let base = self.rate.base().clone();
        let mut global_floor = f64::INFINITY;
        for x in box_grid(&self.domain, domain_samples.max(2)) {
            global_floor = global_floor.min(min_over_torus(&base, &x, torus_samples)?);
        }
        Ok(Model {
            rate: Rate::Regularized(RegularizedRate {
                base,
                delta,
                torus_samples,
                global_floor,
            }),
            ..self.clone()
        })
    }
}

fn check_vars(name: &str, e: &Expression, allowed: &[VarKind], d: usize) -> Result<()> {
    for v in e.free_vars() {
        if !allowed.contains(&v.kind) {
            return Err(Error::Validation(format!(
                "{name} may not depend on `{v}` (expression `{}`)",
                e.source()
            )));
        }
        if v.index > d {
            return Err(Error::Validation(format!(
                "{name} uses `{v}` but the domain has dimension {d}"
            )));
        }
    }
    Ok(())
}

fn min_over_torus(e: &Expression, x: &[f64], n: usize) -> Result<f64> {
    let d = x.len();
    let mut best = f64::INFINITY;
    let mut xi = vec![0.0; d];
    for k in 0..n.pow(d as u32) {
        let mut rem = k;
        for c in xi.iter_mut() {
            *c = (rem % n) as f64 / n as f64;
            rem /= n;
        }
        best = best.min(e.evaluate(&Slots {
            x,
            xi: &xi,
            ..Default::default()
        })?);
    }
    Ok(best)
}

/// Points of a tensor grid over the closed box, `n` per axis, first axis fastest.
pub fn box_grid(domain: &Domain, n: usize) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let total = n.pow(d as u32);
    (0..total)
        .map(|k| {
            let mut rem = k;
            (0..d)
                .map(|a| {
                    let i = rem % n;
                    rem /= n;
                    domain.lower[a] + domain.width(a) * i as f64 / (n - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// Smallest radius `R` (bracketed by doubling from 1, then bisection) with
/// `C kappa_max (1+R)^d exp(-R^(1+beta) + |p| R) <= tol`, times the safety factor.
pub fn truncation_radius(kernel: &KernelSpec, d: usize, p_norm: f64, kappa_max: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let log_tol = tol.ln();
    let log_f = |r: f64| {
        kernel.decay_c.ln() + kappa_max.ln() + d as f64 * (1.0 + r).ln() - r.powf(1.0 + kernel.decay_beta)
            + p_norm * r
    };
    let mut hi = 1.0;
    while log_f(hi) > log_tol {
        hi *= 2.0;
        if hi > TRUNCATION_CAP {
            return Err(Error::Truncation {
                p_norm,
                tol,
                cap: TRUNCATION_CAP,
            });
        }
    }
    let mut lo = if hi == 1.0 { 0.0 } else { hi / 2.0 };
    if log_f(lo) <= log_tol {
        return Ok(TRUNCATION_SAFETY * lo);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if log_f(mid) > log_tol {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(TRUNCATION_SAFETY * hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub worst_point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
    /// Minimum and maximum of `a` over the sampled points.
    pub a_min: f64,
    pub a_max: f64,
    pub samples: usize,
    /// `1.1 * max kappa` over the samples; used for truncation.
    pub kappa_max: f64,
    pub notes: Vec<String>,
}

/// Radial sample set used to check the kernel tail bound: 64 radii times 8
/// directions per radius.
pub fn radial_samples(d: usize) -> Vec<Vec<f64>> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let r3 = 1.0 / 3f64.sqrt();
    let dirs: Vec<Vec<f64>> = match d {
        1 => (0..8).map(|k| vec![if k % 2 == 0 { 1.0 } else { -1.0 }]).collect(),
        2 => (0..8)
            .map(|k| {
                let t = k as f64 * PI / 4.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => vec![
            vec![1.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, -1.0],
            vec![r3, r3, r3],
            vec![-s, s, 0.0],
        ],
    };
    let mut out = Vec::with_capacity(512);
    for k in 1..=64 {
        let r = 0.25 * k as f64;
        for u in &dirs {
            out.push(u.iter().map(|c| c * r).collect());
        }
    }
    out
}

/// Radical-inverse sequence in bases 2, 3, 5, ...; deterministic and well spread.
pub fn halton(index: usize, dims: usize) -> Vec<f64> {
    const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    PRIMES[..dims]
        .iter()
        .map(|&b| {
            let (mut f, mut r, mut i) = (1.0, 0.0, index + 1);
            while i > 0 {
                f /= b as f64;
                r += f * (i % b) as f64;
                i /= b;
            }
            r
        })
        .collect()
}

/// Checks kernel positivity and tail bound, and coefficient positivity on
/// deterministic samples. Stops at the first hard violation.
pub fn validate_model(model: &Model) -> Result<ValidationReport> {
    let d = model.dim();
    let mut checks = Vec::new();
    let mut notes = Vec::new();

    let j0 = model.kernel.value(&vec![0.0; d])?;
    checks.push(CheckOutcome {
        name: "J(0) > 0".into(),
        passed: j0 > 0.0,
        worst: j0,
        worst_point: vec![0.0; d],
    });
    if !(j0 > 0.0) {
        return Err(Error::Validation(format!("J(0) > 0 violated: J(0) = {j0}")));
    }

    let mut worst_ratio = 0.0f64;
    let mut worst_point = vec![0.0; d];
    for z in radial_samples(d) {
        let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let j = model.kernel.value(&z)?;
        if j < 0.0 {
            return Err(Error::Validation(format!("J >= 0 violated at z = {z:?}: J = {j}")));
        }
        let ratio = j / model.kernel.decay_bound(r);
        if ratio > worst_ratio || !ratio.is_finite() {
            worst_ratio = ratio;
            worst_point = z.clone();
        }
        if !(ratio <= 1.0 + 1e-12) {
            return Err(Error::Validation(format!(
                "decay bound J(z) <= C exp(-|z|^(1+beta)) violated at z = {z:?}: J = {j:e}, bound = {:e}",
                model.kernel.decay_bound(r)
            )));
        }
    }
    checks.push(CheckOutcome {
        name: "J(z) <= C exp(-|z|^(1+beta))".into(),
        passed: true,
        worst: worst_ratio,
        worst_point,
    });

    let dom = &model.domain;
    let mut kappa_min = f64::INFINITY;
    let mut kappa_max = 0.0f64;
    let mut kappa_min_at = Vec::new();
    let mut a_min = f64::INFINITY;
    let mut a_max = f64::NEG_INFINITY;
    for s in 0..VALIDATION_SAMPLES {
        let u = halton(s, 4 * d);
        let x: Vec<f64> = (0..d).map(|k| dom.lower[k] + dom.width(k) * u[k]).collect();
        let y: Vec<f64> = (0..d).map(|k| dom.lower[k] + dom.width(k) * u[d + k]).collect();
        let xi = &u[2 * d..3 * d];
        let eta = &u[3 * d..4 * d];
        let kv = model.kappa(&x, &y, xi, eta)?;
        if !(kv > 0.0) {
            return Err(Error::Validation(format!(
                "kappa > 0 violated at x = {x:?}, y = {y:?}, xi = {xi:?}, eta = {eta:?}: kappa = {kv}"
            )));
        }
        if kv < kappa_min {
            kappa_min = kv;
            kappa_min_at = [x.as_slice(), &y, xi, eta].concat();
        }
        kappa_max = kappa_max.max(kv);
        let av = model.rate(&x, xi)?;
        a_min = a_min.min(av);
        a_max = a_max.max(av);
    }
    checks.push(CheckOutcome {
        name: "kappa > 0".into(),
        passed: true,
        worst: kappa_min,
        worst_point: kappa_min_at,
    });

    if matches!(model.kernel.form, KernelForm::LatticeGaussian { .. }) && d < 3 {
        notes.push(format!(
            "lattice-normalized gaussian used with d = {d}; its construction is usually stated for d >= 3"
        ));
    }
    Ok(ValidationReport {
        checks,
        a_min,
        a_max,
        samples: VALIDATION_SAMPLES,
        kappa_max: 1.1 * kappa_max,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use proptest::prelude::*;

    fn trivial(d: usize) -> Model {
        Model::new(
            KernelSpec::gaussian(1.0, 2.325, 0.5),
            parse("1").unwrap(),
            parse("2").unwrap(),
            Domain::unit(d),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_decay_constants() {
        assert!(validate_model(&trivial(1)).is_ok());
        let mut m = trivial(1);
        m.kernel.decay_c = 1.0;
        m.kernel.decay_beta = 1.0;
        assert!(matches!(validate_model(&m), Err(Error::Validation(_))));
    }

    #[test]
    fn nonpositive_kappa_is_rejected() {
        let mut m = trivial(1);
        m.kappa = parse("-1").unwrap();
        match validate_model(&m) {
            Err(Error::Validation(msg)) => assert!(msg.contains("kappa > 0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn variables_must_match_roles_and_dimension() {
        let k = KernelSpec::gaussian(1.0, 2.325, 0.5);
        let bad_a = Model::new(k.clone(), parse("1").unwrap(), parse("2 + eta1").unwrap(), Domain::unit(1));
        assert!(bad_a.is_err());
        let bad_dim = Model::new(k, parse("1 + xi2").unwrap(), parse("2").unwrap(), Domain::unit(1));
        assert!(bad_dim.is_err());
    }

    #[test]
    fn tilted_kernel_examples() {
        let m = trivial(1);
        let j0 = m.tilted_kernel_value(&[0.0], &[0.5], &[0.0], &[0.0]).unwrap();
        assert!((j0 - 0.398_942_280_401_432_7).abs() < 1e-15);
        let v = m.tilted_kernel_value(&[1.0], &[0.5], &[0.0], &[1.0]).unwrap();
        let oracle = (2.0 * PI).powf(-0.5) * 1f64.exp() * (-0.5f64).exp();
        assert!((v - oracle).abs() < 1e-14);

        let mut m = trivial(1);
        m.kappa = parse("1+0.5*sin(2*pi*eta1)").unwrap();
        let v = m.tilted_kernel_value(&[0.0], &[0.5], &[0.25], &[0.25]).unwrap();
        let j = (2.0 * PI).powf(-0.5) * (-0.03125f64).exp();
        assert!((v - j).abs() < 1e-15);
    }

    fn truncation_oracle(c: f64, beta: f64, kmax: f64, p: f64, tol: f64, d: usize) -> f64 {
        // Largest root of the log tail bound, by Newton from far out.
        let g = |r: f64| (c * kmax).ln() + d as f64 * (1.0 + r).ln() - r.powf(1.0 + beta) + p * r - tol.ln();
        let dg = |r: f64| d as f64 / (1.0 + r) - (1.0 + beta) * r.powf(beta) + p;
        let mut r = 50.0;
        for _ in 0..200 {
            r -= g(r) / dg(r);
        }
        r
    }

    #[test]
    fn truncation_radius_matches_root() {
        let k = KernelSpec::gaussian(1.0, 1.0, 1.0);
        let r = truncation_radius(&k, 1, 0.0, 1.0, 1e-10).unwrap();
        let oracle = truncation_oracle(1.0, 1.0, 1.0, 0.0, 1e-10, 1);
        assert!((r - 1.5 * oracle).abs() < 1e-9, "{r} vs {}", 1.5 * oracle);
        assert!((oracle - 4.98).abs() < 0.05);
        let r6 = truncation_radius(&k, 1, 0.0, 1.0, 1e-6).unwrap();
        assert!(r >= r6);
        let steep = KernelSpec::gaussian(1.0, 1.0, 0.1);
        assert!(matches!(
            truncation_radius(&steep, 1, 100.0, 1.0, 1e-10),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn regularization_applies_floor() {
        let m = Model::new(
            KernelSpec::lattice_gaussian(1.0, 2.0, 0.5),
            parse("1").unwrap(),
            parse("0.5 + 0.5*cos(2*pi*xi1)").unwrap(),
            Domain::unit(1),
        )
        .unwrap();
        let r = m.regularize_rate(0.1, 64, 5).unwrap();
        assert!((r.rate(&[0.3], &[0.5]).unwrap() - 0.1).abs() < 1e-15);
        assert!((r.rate(&[0.3], &[0.0]).unwrap() - 1.0).abs() < 1e-15);

        let m = Model::new(
            KernelSpec::gaussian(1.0, 2.325, 0.5),
            parse("1").unwrap(),
            parse("2 + x1").unwrap(),
            Domain::unit(1),
        )
        .unwrap();
        let r = m.regularize_rate(0.2, 16, 11).unwrap();
        for &x in &[0.0, 0.05, 0.5, 1.0] {
            let expected = (2.0f64 + x).max(2.1) + 0.1;
            assert!((r.rate(&[x], &[0.3]).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn regularization_is_delta_close() {
        let m = Model::new(
            KernelSpec::gaussian(1.0, 2.325, 0.5),
            parse("1").unwrap(),
            parse("0.2 + x1 + 0.5*sin(2*pi*xi1)^2").unwrap(),
            Domain::unit(1),
        )
        .unwrap();
        let delta = 0.05;
        let r = m.regularize_rate(delta, 64, 33).unwrap();
        for s in 0..10_000 {
            let u = halton(s, 2);
            let diff = (r.rate(&u[..1], &u[1..]).unwrap() - m.rate(&u[..1], &u[1..]).unwrap()).abs();
            assert!(diff <= delta + 1e-15);
        }
    }

    #[test]
    fn lattice_gaussian_flagged_below_three_dimensions() {
        let m = Model::new(
            KernelSpec::lattice_gaussian(1.0, 2.0, 0.5),
            parse("1").unwrap(),
            parse("1").unwrap(),
            Domain::unit(1),
        )
        .unwrap();
        let rep = validate_model(&m).unwrap();
        assert_eq!(rep.notes.len(), 1);
    }

    proptest! {
        #[test]
        fn tilted_kernel_is_nonnegative(p in -3.0f64..3.0, x in 0.0f64..1.0, xi in -2.0f64..2.0, z in -8.0f64..8.0) {
            let mut m = trivial(1);
            m.kappa = parse("1.2 + sin(2*pi*(xi1 - eta1)) + x1*cos(2*pi*eta1)^2").unwrap();
            let v = m.tilted_kernel_value(&[p], &[x], &[xi], &[z]).unwrap();
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn fast_periodicity_is_exact(k in 0u32..(1 << 20), shift in -3i32..3, z in -64i32..64) {
            // Dyadic fast points, so that adding a lattice vector is exact in floating point.
            let mut m = trivial(1);
            m.kappa = parse("1 + 0.5*sin(2*pi*xi1)*cos(2*pi*eta1)").unwrap();
            let xi = k as f64 / (1u32 << 20) as f64;
            let z = z as f64 / 16.0;
            let a = m.tilted_kernel_value(&[0.7], &[0.2], &[xi], &[z]).unwrap();
            let b = m.tilted_kernel_value(&[0.7], &[0.2], &[xi + shift as f64], &[z]).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn lattice_gaussian_partition_of_mass(z1 in 0.0f64..1.0, z2 in 0.0f64..1.0, mu in 0.01f64..3.0) {
            let k = KernelSpec::lattice_gaussian(mu, 2.0, 0.5);
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for l1 in -LATTICE_RANGE..=LATTICE_RANGE {
                s1 += k.value(&[z1 + l1 as f64]).unwrap();
                for l2 in -LATTICE_RANGE..=LATTICE_RANGE {
                    s2 += k.value(&[z1 + l1 as f64, z2 + l2 as f64]).unwrap();
                }
            }
            prop_assert!((s1 - mu).abs() <= 1e-12 * mu.max(1.0));
            prop_assert!((s2 - mu).abs() <= 1e-12 * mu.max(1.0));
        }
    }
}

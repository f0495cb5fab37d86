//! Experiment orchestration and result persistence.
//!
//! Every experiment produces one CSV table (fixed column order, floats with
//! 17 significant digits, the config hash in every row) and a JSON manifest
//! with scalar results, the resolved configuration and wall-clock timings.
//! Timings live only in the manifest so that identical configs give
//! byte-identical CSVs.
//!
//! CSV columns per experiment:
//!
//! * `cell-h`: `p1..pd, H, classification, residual, config_hash`
//! * `effective`: `index, Lambda, residual, config_hash`
//! * `direct`: `eps, nodes, lambda_eps, lower_bound, residual, config_hash`
//! * `asymptotics`: `eps, eps2, lambda_eps, lambda_minus_h0, mu_eps, fit_residual, config_hash`
//! * `hj`: `x1..xd, W, config_hash`
//! * `end-to-end`: `eps, lambda_eps, minus_Lambda, gap, config_hash`
//! * `verify`: `check, value, threshold, passed, config_hash`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::cell::{effective_model, hamiltonian, min_eigenvalue, CellOptions, CellSetup, Classification, EffectiveModel, TorusGrid};
use crate::config::{schema, RunConfig};
use crate::direct::{
    assemble_l_eps, bottom_of_spectrum, factorized_operator, factorized_spectrum, mu_from_lambda, EpsGrid, SpectralResult,
    DENSE_ORACLE_LIMIT,
};
use crate::effective::{assemble_effective, dirichlet_spectrum, FdGrid, Spectrum};
use crate::error::{Error, Result};
use crate::hj::{additive_eigenvalue, constant_trajectory_bound, tabulate_h_regularized, HTable, HjOptions, Route};
use crate::linalg::dense_bottom_real;
use crate::model::{validate_model, Model};

pub const EXPERIMENTS: [&str; 7] = ["cell-h", "effective", "direct", "asymptotics", "hj", "end-to-end", "verify"];

/// A CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Num(f64),
    Int(usize),
    Text(String),
    Bool(bool),
}

impl Field {
    fn render(&self, out: &mut String) {
        match self {
            Field::Num(v) => write!(out, "{v:.16e}").unwrap(),
            Field::Int(v) => write!(out, "{v}").unwrap(),
            Field::Text(s) => out.push_str(s),
            Field::Bool(b) => write!(out, "{b}").unwrap(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Field>>,
    pub scalars: BTreeMap<String, Value>,
    /// False when a `verify` check failed.
    pub passed: bool,
}

impl ExperimentOutput {
    fn new(header: &[&str]) -> Self {
        ExperimentOutput {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            scalars: BTreeMap::new(),
            passed: true,
        }
    }

    fn scalar(&mut self, key: &str, v: impl Serialize) {
        self.scalars.insert(key.into(), serde_json::to_value(v).expect("scalar serializes"));
    }

    /// CSV text with the hash appended to every row.
    pub fn to_csv(&self, hash: &str) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push_str(",config_hash\n");
        for row in &self.rows {
            for f in row {
                f.render(&mut out);
                out.push(',');
            }
            out.push_str(hash);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultManifest {
    pub toolkit_version: String,
    pub experiment: String,
    pub config_hash: String,
    pub config: RunConfig,
    /// `ok`, `checks_failed` or `error`.
    pub status: String,
    pub error: Option<ErrorRecord>,
    pub csv: Option<String>,
    pub scalars: BTreeMap<String, Value>,
    pub timings: BTreeMap<String, f64>,
}

/// Outcome of a run: the manifest plus the error that stopped it, if any.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: ResultManifest,
    pub error: Option<Error>,
}

impl RunOutcome {
    /// 0 on success, 2 for configuration errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match &self.error {
            Some(e) if e.is_config_error() => 2,
            Some(_) => 3,
            None if self.manifest.status == "ok" => 0,
            None => 3,
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Expr(_) => "expression",
        Error::Validation(_) => "validation",
        Error::Config(_) => "config",
        Error::Truncation { .. } => "truncation",
        Error::NonConvergence { .. } => "non_convergence",
        Error::Reducible(_) => "reducible",
        Error::Capacity { .. } => "capacity",
        Error::NotPositiveDefinite { .. } => "not_positive_definite",
        Error::EssentialBottom { .. } => "essential_bottom",
        Error::BoundaryMaximizer { .. } => "boundary_maximizer",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Io { .. } => "io",
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs one experiment and writes `<experiment>.csv`, `manifest.json` and
/// `config.schema.json` into `out_dir`. Errors inside the experiment are
/// recorded in the manifest; only failures to write outputs are returned as `Err`.
pub fn run_experiment(name: &str, cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    write_file(
        &out_dir.join("config.schema.json"),
        &serde_json::to_string_pretty(&schema()).expect("schema serializes"),
    )?;
    let hash = cfg.hash();
    let start = Instant::now();
    let result = dispatch(name, cfg);
    let mut timings = BTreeMap::new();
    timings.insert("total_seconds".to_string(), start.elapsed().as_secs_f64());
    let mut manifest = ResultManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: name.to_string(),
        config_hash: hash.clone(),
        config: cfg.clone(),
        status: "ok".into(),
        error: None,
        csv: None,
        scalars: BTreeMap::new(),
        timings,
    };
    let error = match result {
        Ok(output) => {
            let file = format!("{name}.csv");
            write_file(&out_dir.join(&file), &output.to_csv(&hash))?;
            manifest.csv = Some(file);
            manifest.scalars = output.scalars;
            if !output.passed {
                manifest.status = "checks_failed".into();
            }
            None
        }
        Err(e) => {
            manifest.status = "error".into();
            manifest.error = Some(ErrorRecord {
                kind: error_kind(&e).into(),
                message: e.to_string(),
            });
            Some(e)
        }
    };
    write_file(
        &out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(RunOutcome { manifest, error })
}

/// Output directory: explicit argument, else the config's, else `results`.
pub fn output_dir(cli: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// Runs an experiment without touching the file system.
pub fn dispatch(name: &str, cfg: &RunConfig) -> Result<ExperimentOutput> {
    if let Some(n) = &cfg.experiment.name {
        if n != name {
            return Err(Error::Config(format!(
                "experiment.name is `{n}` but `{name}` was requested"
            )));
        }
    }
    let ctx = Context::new(cfg)?;
    match name {
        "cell-h" => cell_h(&ctx),
        "effective" => effective(&ctx),
        "direct" => direct(&ctx),
        "asymptotics" => asymptotics(&ctx),
        "hj" => hj(&ctx),
        "end-to-end" => end_to_end(&ctx),
        "verify" => verify(&ctx),
        other => Err(Error::Config(format!(
            "unknown experiment `{other}`; expected one of {}",
            EXPERIMENTS.join(", ")
        ))),
    }
}

struct Context<'c> {
    cfg: &'c RunConfig,
    model: Model,
    opts: CellOptions,
    torus: TorusGrid,
}

impl<'c> Context<'c> {
    fn new(cfg: &'c RunConfig) -> Result<Self> {
        let model = cfg.build_model()?;
        let opts = cfg.cell_options(&model)?;
        let torus = cfg.torus()?;
        Ok(Context { cfg, model, opts, torus })
    }

    fn d(&self) -> usize {
        self.model.dim()
    }

    fn require_periodic(&self) -> Result<()> {
        if self.model.is_periodic() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "this experiment needs coefficients without slow-variable dependence".into(),
            ))
        }
    }

    fn setup(&self) -> Result<CellSetup<'_>> {
        CellSetup::new(&self.model, self.torus, &self.model.domain.lower, self.opts)
    }

    fn effective(&self) -> Result<(EffectiveModel, Spectrum)> {
        self.require_periodic()?;
        let setup = self.setup()?;
        let em = effective_model(&setup, self.cfg.tolerances.p, self.cfg.grids.p_search)?;
        let grid = FdGrid::uniform(self.model.domain.clone(), self.cfg.grids.effective_n)?;
        let op = assemble_effective(&em.a, &grid)?;
        let spec = dirichlet_spectrum(&op, self.cfg.experiment.eigenvalues)?;
        Ok((em, spec))
    }

    fn direct_one(&self, eps: f64) -> Result<(EpsGrid, SpectralResult)> {
        let grid = EpsGrid::new(self.model.domain.clone(), eps, self.cfg.grids.direct_q)?;
        let op = assemble_l_eps(&self.model, &grid, &self.opts)?;
        let res = bottom_of_spectrum(&op, self.opts.tol, self.opts.max_iter)?;
        Ok((grid, res))
    }

    fn direct_sweep(&self) -> Result<Vec<(f64, EpsGrid, SpectralResult)>> {
        self.cfg
            .experiment
            .eps
            .par_iter()
            .map(|&eps| self.direct_one(eps).map(|(g, r)| (eps, g, r)))
            .collect()
    }

    fn table(&self) -> Result<HTable> {
        let g = &self.cfg.grids;
        tabulate_h_regularized(
            &self.model,
            vec![g.hj_x_count; self.d()],
            g.hj_p_max,
            g.hj_p_count,
            self.torus,
            self.opts,
            Some(self.cfg.tolerances.delta),
        )
    }

    fn hj_options(&self) -> HjOptions {
        HjOptions {
            tol: self.cfg.tolerances.hj,
            ..Default::default()
        }
    }
}

fn class_name(c: Classification) -> &'static str {
    match c {
        Classification::PrincipalEigenvalue => "principal",
        Classification::EssentialBottom => "essential",
    }
}

fn cell_h(ctx: &Context<'_>) -> Result<ExperimentOutput> {
    let d = ctx.d();
    let mut header: Vec<String> = (1..=d).map(|k| format!("p{k}")).collect();
    header.extend(["H", "classification", "residual"].map(String::from));
    let mut out = ExperimentOutput::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    let x = ctx.model.domain.lower.clone();
    let pairs: Vec<_> = ctx
        .cfg
        .experiment
        .p
        .par_iter()
        .map(|p| hamiltonian(&ctx.model, &p.to_vec(), &x, ctx.torus, ctx.opts))
        .collect::<Result<_>>()?;
    for pair in &pairs {
        let mut row: Vec<Field> = pair.p.iter().map(|&v| Field::Num(v)).collect();
        row.push(Field::Num(pair.h));
        row.push(Field::Text(class_name(pair.classification).into()));
        row.push(Field::Num(pair.residual_direct));
        out.rows.push(row);
    }
    if let Some(first) = pairs.first() {
        out.scalar("min_a", first.m);
        out.scalar("max_a", first.a_max);
    }
    out.scalar("x", &x);
    Ok(out)
}

fn effective_scalars(out: &mut ExperimentOutput, em: &EffectiveModel) {
    out.scalar("p0", &em.p0);
    out.scalar("H0", em.h0);
    out.scalar("A", &em.a);
    out.scalar("A_fd", &em.a_fd);
    out.scalar("A_min_eigenvalue", min_eigenvalue(&em.a));
    out.scalar("mass_balance_imbalance", em.mass_balance.0);
    out.scalar("mass_balance_max_row_sum", em.mass_balance.1);
    out.scalar("corrector_residuals", &em.corrector_residuals);
    out.scalar("classification", class_name(em.pair.classification));
}

fn effective(ctx: &Context<'_>) -> Result<ExperimentOutput> {
    let (em, spec) = ctx.effective()?;
    let mut out = ExperimentOutput::new(&["index", "Lambda", "residual"]);
    for (i, (v, r)) in spec.values.iter().zip(&spec.residuals).enumerate() {
        out.rows.push(vec![Field::Int(i + 1), Field::Num(*v), Field::Num(*r)]);
    }
    effective_scalars(&mut out, &em);
    out.scalar("spectrum_method", spec.method);
    Ok(out)
}

fn direct(ctx: &Context<'_>) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::new(&["eps", "nodes", "lambda_eps", "lower_bound", "residual"]);
    for (eps, grid, res) in ctx.direct_sweep()? {
        out.rows.push(vec![
            Field::Num(eps),
            Field::Int(grid.len()),
            Field::Num(res.lambda_eps),
            Field::Num(res.lower_bound),
            Field::Num(res.residual),
        ]);
    }
    out.scalar("q", ctx.cfg.grids.direct_q);
    Ok(out)
}

/// Least-squares slope of `y` on `x` through the origin.
pub fn slope_through_origin(x: &[f64], y: &[f64]) -> f64 {
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    sxy / sxx
}

fn asymptotics(ctx: &Context<'_>) -> Result<ExperimentOutput> {
    let (em, spec) = ctx.effective()?;
    let sweep = ctx.direct_sweep()?;
    let eps2: Vec<f64> = sweep.iter().map(|(e, _, _)| e * e).collect();
    let shifted: Vec<f64> = sweep.iter().map(|(_, _, r)| r.lambda_eps - em.h0).collect();
    let slope = slope_through_origin(&eps2, &shifted);
    let mut out = ExperimentOutput::new(&["eps", "eps2", "lambda_eps", "lambda_minus_h0", "mu_eps", "fit_residual"]);
    for (i, (eps, _, r)) in sweep.iter().enumerate() {
        out.rows.push(vec![
            Field::Num(*eps),
            Field::Num(eps2[i]),
            Field::Num(r.lambda_eps),
            Field::Num(shifted[i]),
            Field::Num(mu_from_lambda(r.lambda_eps, em.h0, *eps)),
            Field::Num(shifted[i] - slope * eps2[i]),
        ]);
    }
    effective_scalars(&mut out, &em);
    let lambda1 = spec.values[0];
    out.scalar("Lambda1", lambda1);
    out.scalar("slope", slope);
    out.scalar("slope_relative_error", (slope - lambda1).abs() / lambda1.abs());
    Ok(out)
}

fn hj(ctx: &Context<'_>) -> Result<ExperimentOutput> {
    let table = ctx.table()?;
    let opts = ctx.hj_options();
    let disc = additive_eigenvalue(&table, Route::Discounted, &opts)?;
    let infmax = additive_eigenvalue(&table, Route::InfMax, &opts)?;
    let d = ctx.d();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.push("W".into());
    let mut out = ExperimentOutput::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (k, w) in disc.w.iter().enumerate() {
        let mut row: Vec<Field> = table.x_node(k).into_iter().map(Field::Num).collect();
        row.push(Field::Num(*w));
        out.rows.push(row);
    }
    out.scalar("Lambda", disc.lambda);
    out.scalar("Lambda_inf_max", infmax.lambda);
    out.scalar("Lambda_lb", disc.lower_bound_check);
    out.scalar("residual", disc.residual);
    out.scalar("cauchy_ratios", &disc.cauchy_ratios);
    out.scalar("discount_values", &disc.discount_values);
    out.scalar("regularized_delta", table.regularized);
    out.scalar("essential_entries", table.essential.iter().filter(|&&e| e).count());
    Ok(out)
}

fn end_to_end(ctx: &Context<'_>) -> Result<ExperimentOutput> {
    let table = ctx.table()?;
    let sol = additive_eigenvalue(&table, Route::Discounted, &ctx.hj_options())?;
    let sweep = ctx.direct_sweep()?;
    let mut out = ExperimentOutput::new(&["eps", "lambda_eps", "minus_Lambda", "gap"]);
    let gaps: Vec<f64> = sweep.iter().map(|(_, _, r)| (r.lambda_eps + sol.lambda).abs()).collect();
    for ((eps, _, r), gap) in sweep.iter().zip(&gaps) {
        out.rows.push(vec![
            Field::Num(*eps),
            Field::Num(r.lambda_eps),
            Field::Num(-sol.lambda),
            Field::Num(*gap),
        ]);
    }
    out.scalar("Lambda", sol.lambda);
    out.scalar("Lambda_lb", sol.lower_bound_check);
    out.scalar("gap_decreasing", gaps.windows(2).all(|w| w[1] < w[0]));
    Ok(out)
}

struct Checks {
    out: ExperimentOutput,
}

impl Checks {
    /// Records `value <= threshold`.
    fn at_most(&mut self, name: &str, value: f64, threshold: f64) {
        self.push(name, value, threshold, value <= threshold);
    }

    /// Records `value >= threshold`.
    fn at_least(&mut self, name: &str, value: f64, threshold: f64) {
        self.push(name, value, threshold, value >= threshold);
    }

    fn push(&mut self, name: &str, value: f64, threshold: f64, passed: bool) {
        self.out.passed &= passed;
        self.out.rows.push(vec![
            Field::Text(name.into()),
            Field::Num(value),
            Field::Num(threshold),
            Field::Bool(passed),
        ]);
    }
}

/// Largest torus size per axis whose dense cell matrix stays within the oracle limit.
fn oracle_torus(d: usize, n: usize) -> usize {
    let mut m = n;
    while m > 2 && m.pow(d as u32) > DENSE_ORACLE_LIMIT {
        m /= 2;
    }
    m
}

fn verify(ctx: &Context<'_>) -> Result<ExperimentOutput> {
    let mut c = Checks {
        out: ExperimentOutput::new(&["check", "value", "threshold", "passed"]),
    };
    let d = ctx.d();
    let report = validate_model(&ctx.model)?;
    c.at_least("model_checks_passed", report.checks.len() as f64, 1.0);

    // Power iteration against the dense decomposition on a small torus.
    let small = TorusGrid::new(d, oracle_torus(d, ctx.cfg.grids.torus_n))?;
    let x0 = ctx.model.domain.lower.clone();
    let small_setup = CellSetup::new(&ctx.model, small, &x0, ctx.opts)?;
    let mut worst: f64 = 0.0;
    for p in &ctx.cfg.experiment.p {
        let op = small_setup.operator(&p.to_vec())?;
        let power = op.principal(ctx.opts.tol, ctx.opts.max_iter)?.value;
        worst = worst.max((power - op.dense_bottom()).abs());
    }
    c.at_most("cell_power_vs_dense", worst, 1e-8);

    // H stays below min a.
    let setup = ctx.setup()?;
    let mut excess = f64::NEG_INFINITY;
    for p in &ctx.cfg.experiment.p {
        excess = excess.max(setup.h(&p.to_vec())? - setup.m);
    }
    c.at_most("H_minus_min_a", excess, ctx.opts.class_threshold(setup.m));

    let periodic = ctx.model.is_periodic();
    let mut h0 = None;
    if periodic {
        match ctx.effective() {
            Ok((em, spec)) => {
                let (imb, row) = em.mass_balance;
                c.at_most("mass_balance_relative", imb / row, 1e-8);
                c.at_least("A_min_eigenvalue", min_eigenvalue(&em.a), f64::MIN_POSITIVE);
                let mut rel: f64 = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        rel = rel.max((em.a[i][j] - em.a_fd[i][j]).abs() / em.a_fd[i][i].abs().max(1e-300));
                    }
                }
                c.at_most("A_vs_hessian_relative", rel, 1e-3);
                let corr = em.corrector_residuals.iter().copied().fold(0.0, f64::max);
                c.at_most("corrector_residual", corr, 1e-8);
                let eres = spec.residuals.iter().copied().fold(0.0, f64::max);
                c.at_most("effective_eigen_residual", eres, 1e-6);
                h0 = Some((em.p0.clone(), em.h0));
            }
            Err(Error::EssentialBottom { h, m }) => {
                c.at_most("essential_bottom_gap", m - h, ctx.opts.class_threshold(m));
            }
            Err(e) => return Err(e),
        }
    }

    // Direct operator on the coarsest eps.
    if let Some(&eps) = ctx
        .cfg
        .experiment
        .eps
        .iter()
        .max_by(|a, b| a.total_cmp(b))
    {
        let grid = EpsGrid::new(ctx.model.domain.clone(), eps, ctx.cfg.grids.direct_q)?;
        let op = assemble_l_eps(&ctx.model, &grid, &ctx.opts)?;
        let res = bottom_of_spectrum(&op, ctx.opts.tol, ctx.opts.max_iter)?;
        c.at_least("direct_min_eigenvector_entry", res.rho.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        c.at_most("direct_certificate_excess", res.lower_bound - res.lambda_eps, 1e-10);
        c.at_least(
            "direct_certificate_slack",
            res.lower_bound - res.lambda_eps + 10.0 * res.residual.max(ctx.opts.tol),
            0.0,
        );
        if grid.len() <= DENSE_ORACLE_LIMIT {
            let dense = op.dense_bottom()?;
            c.at_most("direct_power_vs_dense", (res.lambda_eps - dense).abs(), 1e-8);
            if let Some((p0, _)) = &h0 {
                let fact = factorized_operator(&ctx.model, &grid, p0, &ctx.opts)?;
                let mapped = fact.h_disc + fact.eps * fact.eps * factorized_spectrum(&fact)?[0].re;
                let direct_bottom = dense_bottom_real(&op.matrix.to_dense());
                c.at_most("factorization_similarity", (mapped - direct_bottom).abs(), 1e-8);
            }
        }
    }

    // Hamilton–Jacobi bound and route agreement.
    let table = ctx.table()?;
    let opts = ctx.hj_options();
    let disc = additive_eigenvalue(&table, Route::Discounted, &opts)?;
    let infmax = additive_eigenvalue(&table, Route::InfMax, &opts)?;
    c.at_least("Lambda_minus_lower_bound", disc.lambda - constant_trajectory_bound(&table), -1e-6);
    c.at_least("inf_max_minus_discounted", infmax.lambda - disc.lambda, -1e-3);
    let ratio = disc.cauchy_ratios.iter().copied().fold(0.0, f64::max);
    c.at_most("discount_cauchy_ratio", ratio, 1.0);
    if periodic {
        let max_h = table.max_over_p().into_iter().fold(f64::NEG_INFINITY, f64::max);
        c.at_most("Lambda_plus_max_H", (disc.lambda + max_h).abs(), 1e-3);
    }
    Ok(c.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn config(extra: &str) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{"model": {{"kernel": {{"form": "gaussian", "sigma": 1.0, "decay_c": 2.325, "decay_beta": 0.5}}, "rate": "2"}}{extra}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn cell_h_trivial_curve() {
        let cfg = config(r#", "grids": {"torus_n": 32}"#);
        let out = dispatch("cell-h", &cfg).unwrap();
        let h: Vec<f64> = out
            .rows
            .iter()
            .map(|r| match r[1] {
                Field::Num(v) => v,
                _ => panic!(),
            })
            .collect();
        let e = 2.0 - 0.5f64.exp();
        assert!((h[0] - e).abs() < 1e-8 && (h[1] - 1.0).abs() < 1e-8 && (h[2] - e).abs() < 1e-8);
    }

    #[test]
    fn csv_rows_carry_the_hash_and_fixed_format() {
        let cfg = config(r#", "grids": {"torus_n": 16}, "experiment": {"p": [0.0]}"#);
        let csv = dispatch("cell-h", &cfg).unwrap().to_csv(&cfg.hash());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "p1,H,classification,residual,config_hash");
        assert!(lines[1].starts_with("0.0000000000000000e0,"));
        assert!(lines[1].ends_with(&cfg.hash()));
    }

    #[test]
    fn unknown_experiment_is_a_config_error() {
        let cfg = config("");
        assert!(dispatch("bogus", &cfg).unwrap_err().is_config_error());
    }

    #[test]
    fn through_origin_fit() {
        assert!((slope_through_origin(&[1.0, 2.0], &[3.0, 6.0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn run_writes_outputs_and_records_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(r#", "grids": {"torus_n": 16}"#);
        let ok = run_experiment("cell-h", &cfg, dir.path()).unwrap();
        assert_eq!(ok.exit_code(), 0);
        for f in ["cell-h.csv", "manifest.json", "config.schema.json"] {
            assert!(dir.path().join(f).exists());
        }
        let locally = RunConfig::from_json(
            r#"{"model": {"kernel": {"form": "gaussian", "sigma": 1.0}, "rate": "2 + x1"}, "grids": {"torus_n": 16}}"#,
        )
        .unwrap();
        let bad = run_experiment("effective", &locally, dir.path()).unwrap();
        assert_eq!(bad.exit_code(), 2);
        let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["status"], json!("error"));
    }
}

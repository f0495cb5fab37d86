//! JSON run configurations.
//!
//! Unknown keys are rejected and errors name the offending field path.
//! Missing sections and fields take documented defaults, and the resolved
//! configuration (defaults filled) is what gets hashed and echoed into the
//! run manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{CellOptions, TorusGrid};
use crate::direct::eps_reciprocal;
use crate::error::{Error, Result};
use crate::expr::parse;
use crate::model::{radial_samples, validate_model, Domain, KernelForm, KernelSpec, Model};

/// Default tail exponent when a builtin kernel gives none.
pub const DEFAULT_DECAY_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Output directory; the command line `--out` takes precedence.
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel: KernelConfig,
    /// Coupling `kappa(x, y, xi, eta)`.
    #[serde(default = "one")]
    pub kappa: String,
    /// Rate `a(x, xi)`.
    pub rate: String,
    #[serde(default)]
    pub domain: DomainConfig,
}

fn one() -> String {
    "1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Gaussian {
        sigma: f64,
        #[serde(default)]
        decay_c: Option<f64>,
        #[serde(default)]
        decay_beta: Option<f64>,
    },
    LatticeGaussian {
        mu: f64,
        #[serde(default)]
        decay_c: Option<f64>,
        #[serde(default)]
        decay_beta: Option<f64>,
    },
    Custom {
        expr: String,
        decay_c: f64,
        decay_beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            lower: vec![0.0],
            upper: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Torus points per axis for cell problems.
    pub torus_n: usize,
    /// Direct-grid nodes per period `eps` and axis.
    pub direct_q: usize,
    /// Finite-difference nodes per axis, boundary included.
    pub effective_n: usize,
    /// Half-width of the `p` box searched for the maximizer of `H`.
    pub p_search: f64,
    pub hj_p_max: f64,
    pub hj_p_count: usize,
    pub hj_x_count: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            torus_n: 128,
            direct_q: 8,
            effective_n: 65,
            p_search: 2.0,
            hj_p_max: 2.0,
            hj_p_count: 41,
            hj_x_count: 33,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    /// Eigen-residual tolerance.
    pub eigen: f64,
    /// Kernel tail tolerance for truncation.
    pub truncation: f64,
    /// Classification threshold; absent means `10 eigen (1 + |min a|)`.
    pub class: Option<f64>,
    /// Regularization of the rate when a Hamilton–Jacobi table meets an essential bottom.
    pub delta: f64,
    /// Tolerance on the maximizer of `H`.
    pub p: f64,
    /// Residual tolerance of the discounted Hamilton–Jacobi solves.
    pub hj: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            eigen: 1e-10,
            truncation: 1e-10,
            class: None,
            delta: 0.05,
            p: 1e-8,
            hj: 1e-10,
        }
    }
}

/// A momentum, written as a number in one dimension or as an array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PointSpec {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            PointSpec::Scalar(v) => vec![*v],
            PointSpec::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Must match the experiment named on the command line when given.
    pub name: Option<String>,
    /// Scale parameters; each must be `1/K` for an integer `K`.
    pub eps: Vec<f64>,
    /// Momenta for `cell-h`.
    pub p: Vec<PointSpec>,
    /// Number of effective eigenvalues.
    pub eigenvalues: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: None,
            eps: vec![0.125, 0.0625, 0.03125],
            p: vec![PointSpec::Scalar(-1.0), PointSpec::Scalar(0.0), PointSpec::Scalar(1.0)],
            eigenvalues: 4,
        }
    }
}

impl RunConfig {
    /// Parses JSON text, reporting the field path of any schema violation.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn dim(&self) -> usize {
        self.model.domain.lower.len()
    }

    /// Checks value ranges that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.eigen", t.eigen),
            ("tolerances.truncation", t.truncation),
            ("tolerances.delta", t.delta),
            ("tolerances.p", t.p),
            ("tolerances.hj", t.hj),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(c) = t.class {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("tolerances.class must be positive, got {c}")));
            }
        }
        for (i, &e) in self.experiment.eps.iter().enumerate() {
            eps_reciprocal(e).map_err(|_| {
                Error::Config(format!(
                    "experiment.eps[{i}] = {e} is not 1/K for an integer K: direct nodes must map onto the torus grid under x -> x/eps"
                ))
            })?;
        }
        let d = self.dim();
        for (i, p) in self.experiment.p.iter().enumerate() {
            if p.to_vec().len() != d {
                return Err(Error::Config(format!("experiment.p[{i}] must have {d} components")));
            }
        }
        let g = &self.grids;
        if g.torus_n < 2 {
            return Err(Error::Config("grids.torus_n must be at least 2".into()));
        }
        if g.hj_p_count % 2 == 0 || g.hj_p_count < 3 {
            return Err(Error::Config("grids.hj_p_count must be odd and at least 3".into()));
        }
        if g.hj_x_count < 3 {
            return Err(Error::Config("grids.hj_x_count must be at least 3".into()));
        }
        if !(g.p_search > 0.0 && g.hj_p_max > 0.0) {
            return Err(Error::Config("grids.p_search and grids.hj_p_max must be positive".into()));
        }
        if self.experiment.eigenvalues == 0 {
            return Err(Error::Config("experiment.eigenvalues must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Builds and validates the model.
    pub fn build_model(&self) -> Result<Model> {
        let m = &self.model;
        let domain = Domain::new(m.domain.lower.clone(), m.domain.upper.clone())?;
        let d = domain.dim();
        let kernel = match &m.kernel {
            KernelConfig::Gaussian {
                sigma,
                decay_c,
                decay_beta,
            } => builtin(KernelForm::Gaussian { sigma: *sigma }, d, *decay_c, *decay_beta)?,
            KernelConfig::LatticeGaussian { mu, decay_c, decay_beta } => {
                builtin(KernelForm::LatticeGaussian { mu: *mu }, d, *decay_c, *decay_beta)?
            }
            KernelConfig::Custom {
                expr,
                decay_c,
                decay_beta,
            } => KernelSpec {
                form: KernelForm::Custom(parse(expr)?),
                decay_c: *decay_c,
                decay_beta: *decay_beta,
            },
        };
        let model = Model::new(kernel, parse(&m.kappa)?, parse(&m.rate)?, domain)?;
        validate_model(&model)?;
        Ok(model)
    }

    pub fn cell_options(&self, model: &Model) -> Result<CellOptions> {
        let mut opts = CellOptions::for_model(model)?;
        opts.tol = self.tolerances.eigen;
        opts.tol_trunc = self.tolerances.truncation;
        opts.tol_class = self.tolerances.class;
        Ok(opts)
    }

    pub fn torus(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.dim(), self.grids.torus_n)
    }
}

/// Smallest `C` (with a 5% margin) for which `J(z) <= C exp(-|z|^(1+beta))`
/// holds along the validation directions, from a fine radial scan.
fn builtin(form: KernelForm, d: usize, decay_c: Option<f64>, decay_beta: Option<f64>) -> Result<KernelSpec> {
    let beta = decay_beta.unwrap_or(DEFAULT_DECAY_BETA);
    if let Some(c) = decay_c {
        return Ok(KernelSpec {
            form,
            decay_c: c,
            decay_beta: beta,
        });
    }
    let probe = KernelSpec {
        form: form.clone(),
        decay_c: 1.0,
        decay_beta: beta,
    };
    let dirs: Vec<Vec<f64>> = radial_samples(d)
        .into_iter()
        .filter(|z| z.iter().any(|v| *v != 0.0))
        .map(|z| {
            let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            z.into_iter().map(|v| v / r).collect()
        })
        .collect();
    let mut log_c = f64::NEG_INFINITY;
    for k in 0..=20_000 {
        let r = k as f64 * 1e-3;
        for dir in &dirs {
            let z: Vec<f64> = dir.iter().map(|v| v * r).collect();
            let j = probe.value(&z)?;
            if j > 0.0 {
                log_c = log_c.max(j.ln() + r.powf(1.0 + beta));
            }
        }
    }
    if !log_c.is_finite() {
        return Err(Error::Config("kernel vanishes on every sample; set decay_c explicitly".into()));
    }
    Ok(KernelSpec {
        form,
        decay_c: 1.05 * log_c.exp(),
        decay_beta: beta,
    })
}

/// JSON Schema of [`RunConfig`].
pub fn schema() -> serde_json::Value {
    let num = serde_json::json!({"type": "number"});
    let pos = serde_json::json!({"type": "number", "exclusiveMinimum": 0});
    let vec = serde_json::json!({"type": "array", "items": {"type": "number"}, "minItems": 1, "maxItems": 3});
    let decay = |required: bool| {
        if required {
            pos.clone()
        } else {
            serde_json::json!({"type": ["number", "null"], "exclusiveMinimum": 0})
        }
    };
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "spechomog run configuration",
        "type": "object",
        "additionalProperties": false,
        "required": ["model"],
        "properties": {
            "model": {
                "type": "object",
                "additionalProperties": false,
                "required": ["kernel", "rate"],
                "properties": {
                    "kernel": {
                        "oneOf": [
                            {
                                "type": "object", "additionalProperties": false,
                                "required": ["form", "sigma"],
                                "properties": {
                                    "form": {"const": "gaussian"},
                                    "sigma": pos,
                                    "decay_c": decay(false),
                                    "decay_beta": decay(false)
                                }
                            },
                            {
                                "type": "object", "additionalProperties": false,
                                "required": ["form", "mu"],
                                "properties": {
                                    "form": {"const": "lattice_gaussian"},
                                    "mu": pos,
                                    "decay_c": decay(false),
                                    "decay_beta": decay(false)
                                }
                            },
                            {
                                "type": "object", "additionalProperties": false,
                                "required": ["form", "expr", "decay_c", "decay_beta"],
                                "properties": {
                                    "form": {"const": "custom"},
                                    "expr": {"type": "string", "description": "J in z1..zd"},
                                    "decay_c": decay(true),
                                    "decay_beta": decay(true)
                                }
                            }
                        ]
                    },
                    "kappa": {"type": "string", "default": "1", "description": "kappa in x, y, xi, eta"},
                    "rate": {"type": "string", "description": "a in x, xi"},
                    "domain": {
                        "type": "object", "additionalProperties": false,
                        "required": ["lower", "upper"],
                        "properties": {"lower": vec, "upper": vec},
                        "default": {"lower": [0.0], "upper": [1.0]}
                    }
                }
            },
            "grids": {
                "type": "object", "additionalProperties": false,
                "properties": {
                    "torus_n": {"type": "integer", "minimum": 2, "default": 128},
                    "direct_q": {"type": "integer", "minimum": 4, "default": 8},
                    "effective_n": {"type": "integer", "minimum": 3, "default": 65},
                    "p_search": {"type": "number", "exclusiveMinimum": 0, "default": 2.0},
                    "hj_p_max": {"type": "number", "exclusiveMinimum": 0, "default": 2.0},
                    "hj_p_count": {"type": "integer", "minimum": 3, "default": 41},
                    "hj_x_count": {"type": "integer", "minimum": 3, "default": 33}
                }
            },
            "tolerances": {
                "type": "object", "additionalProperties": false,
                "properties": {
                    "eigen": {"type": "number", "exclusiveMinimum": 0, "default": 1e-10},
                    "truncation": {"type": "number", "exclusiveMinimum": 0, "default": 1e-10},
                    "class": {"type": ["number", "null"], "exclusiveMinimum": 0, "default": null},
                    "delta": {"type": "number", "exclusiveMinimum": 0, "default": 0.05},
                    "p": {"type": "number", "exclusiveMinimum": 0, "default": 1e-8},
                    "hj": {"type": "number", "exclusiveMinimum": 0, "default": 1e-10}
                }
            },
            "experiment": {
                "type": "object", "additionalProperties": false,
                "properties": {
                    "name": {"type": ["string", "null"]},
                    "eps": {"type": "array", "items": {"type": "number", "description": "1/K for an integer K"}, "default": [0.125, 0.0625, 0.03125]},
                    "p": {"type": "array", "items": {"oneOf": [num, vec]}, "default": [-1.0, 0.0, 1.0]},
                    "eigenvalues": {"type": "integer", "minimum": 1, "default": 4}
                }
            },
            "output": {"type": ["string", "null"]}
        }
    })
}

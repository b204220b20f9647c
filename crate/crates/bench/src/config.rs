//! Run specifications: TOML loading, preset expansion, overrides and the
//! canonical form that is hashed into the manifest.
//!
//! A config file is a TOML document with the tables `model`, `policy`, `pg`,
//! `mc` and `run`. Setting `preset = "mean-variance"` at the top level starts
//! from the registered benchmark and lets the file override single keys.
//! Matrices are row-major arrays of arrays; `b` (and the other time-dependent
//! coefficients) may instead name an entry of the coefficient registry.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use lqpg_core::benchmark::{self, coefficient_preset, coefficient_preset_names};
use lqpg_core::mc::SimConfig;
use lqpg_core::pg::OptimumEstimate;
use lqpg_core::{psd_sqrt, Coefficient, LqcError, LqcModel, Mat, Policy, TimeGrid, Vector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

pub const MEAN_VARIANCE: &str = "mean-variance";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("missing required keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),
    #[error("unknown preset `{0}` (available: {MEAN_VARIANCE})")]
    UnknownPreset(String),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// A coefficient given either as a constant matrix or a registry name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefValue {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseChannel {
    pub c: CoefValue,
    pub d: CoefValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: f64,
    pub rho: f64,
    pub a: CoefValue,
    pub b: CoefValue,
    pub q: CoefValue,
    pub s: CoefValue,
    pub r: CoefValue,
    pub vbar: CoefValue,
    pub terminal_cost: Vec<Vec<f64>>,
    pub xi0_mean: Vec<f64>,
    pub xi0_cov: Vec<Vec<f64>>,
    /// Gram matrix `DᵀD` of the action noise; channels are the rows of its
    /// symmetric root with zero state loadings. Excludes `noise`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_gram: Option<Vec<Vec<f64>>>,
    pub noise: Vec<NoiseChannel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub gain: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgSpec {
    pub tau: f64,
    pub tau_unscaled: f64,
    pub epsilon: f64,
    /// Intervals of the fine grid used for the continuous run and `C*`.
    pub grid: usize,
    pub meshes: Vec<usize>,
    pub max_iterations: usize,
    /// The convergence run stops once the suboptimality is below this.
    pub convergence_tolerance: f64,
    /// `converged` or `tail`.
    pub optimum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub paths: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ModelBased,
    ModelFree,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ModelBased => "model-based",
            Mode::ModelFree => "model-free",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub mode: Mode,
}

/// Fully resolved run specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub model: ModelSpec,
    pub policy: PolicySpec,
    pub pg: PgSpec,
    pub mc: McSpec,
    pub run: RunSection,
}

/// Command-line overrides applied after loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub tau: Option<f64>,
    pub epsilon: Option<f64>,
    pub grid: Option<usize>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub mode: Option<Mode>,
}

const TOP_KEYS: &[&str] = &["name", "preset", "model", "policy", "pg", "mc", "run"];
const MODEL_KEYS: &[&str] = &[
    "state_dim",
    "action_dim",
    "horizon",
    "rho",
    "a",
    "b",
    "q",
    "s",
    "r",
    "vbar",
    "terminal_cost",
    "xi0_mean",
    "xi0_cov",
    "noise_gram",
    "noise",
];
const NOISE_KEYS: &[&str] = &["c", "d"];
const POLICY_KEYS: &[&str] = &["gain", "covariance"];
const PG_KEYS: &[&str] = &[
    "tau",
    "tau_unscaled",
    "epsilon",
    "grid",
    "meshes",
    "max_iterations",
    "convergence_tolerance",
    "optimum",
];
const MC_KEYS: &[&str] = &["paths", "seed", "repetitions", "iterations"];
const RUN_KEYS: &[&str] = &["mode"];
const REQUIRED: &[&str] = &[
    "model.state_dim",
    "model.action_dim",
    "model.horizon",
    "model.rho",
    "model.xi0_mean",
    "model.xi0_cov",
    "policy.gain",
    "policy.covariance",
];

fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// The benchmark of the registered `mean-variance` preset.
pub fn mean_variance() -> RunSpec {
    let zeros = |r, c| CoefValue::Matrix(vec![vec![0.0; c]; r]);
    RunSpec {
        name: MEAN_VARIANCE.to_string(),
        model: ModelSpec {
            state_dim: 1,
            action_dim: 3,
            horizon: benchmark::HORIZON,
            rho: benchmark::RHO,
            a: zeros(1, 1),
            b: CoefValue::Named("sinusoidal_B".to_string()),
            q: zeros(1, 1),
            s: zeros(3, 1),
            r: zeros(3, 3),
            vbar: CoefValue::Matrix(mat_rows(&(Mat::identity(3, 3) * benchmark::VBAR_SCALE))),
            terminal_cost: vec![vec![benchmark::MU]],
            xi0_mean: vec![benchmark::XI0_MEAN],
            xi0_cov: vec![vec![benchmark::XI0_VAR]],
            noise_gram: Some(mat_rows(&benchmark::dtd())),
            noise: Vec::new(),
        },
        policy: PolicySpec {
            gain: vec![vec![1.0 / 3.0]; 3],
            covariance: mat_rows(&(benchmark::dtd() * 0.1)),
        },
        pg: PgSpec {
            tau: benchmark::SCALED_TAU,
            tau_unscaled: benchmark::UNSCALED_TAU,
            epsilon: benchmark::EPSILON,
            grid: benchmark::FINE_INTERVALS,
            meshes: benchmark::MESHES.to_vec(),
            max_iterations: 5000,
            convergence_tolerance: 1e-6,
            optimum: "converged".to_string(),
        },
        mc: McSpec {
            paths: benchmark::MC_PATHS,
            seed: 1,
            repetitions: benchmark::REPETITIONS,
            iterations: 300,
        },
        run: RunSection { mode: Mode::ModelBased },
    }
}

pub fn preset(name: &str) -> Result<RunSpec, ConfigError> {
    match name {
        MEAN_VARIANCE => Ok(mean_variance()),
        other => Err(ConfigError::UnknownPreset(other.to_string())),
    }
}

fn collect_unknown(table: &Table, known: &[&str], prefix: &str, out: &mut Vec<String>) {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            out.push(format!("{prefix}{key}"));
        }
    }
}

/// Every key path not in the schema, in document order.
fn unknown_keys(doc: &Table) -> Vec<String> {
    let mut out = Vec::new();
    collect_unknown(doc, TOP_KEYS, "", &mut out);
    let sections: [(&str, &[&str]); 5] = [
        ("model", MODEL_KEYS),
        ("policy", POLICY_KEYS),
        ("pg", PG_KEYS),
        ("mc", MC_KEYS),
        ("run", RUN_KEYS),
    ];
    for (name, keys) in sections {
        if let Some(Value::Table(t)) = doc.get(name) {
            collect_unknown(t, keys, &format!("{name}."), &mut out);
        }
    }
    if let Some(Value::Array(chans)) = doc.get("model").and_then(|m| m.get("noise")) {
        for (j, ch) in chans.iter().enumerate() {
            if let Value::Table(t) = ch {
                collect_unknown(t, NOISE_KEYS, &format!("model.noise[{j}]."), &mut out);
            }
        }
    }
    out
}

fn lookup<'a>(doc: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = doc.get(parts.next()?)?;
    for p in parts {
        cur = cur.get(p)?;
    }
    Some(cur)
}

/// Overlay `top` on `base`; tables merge key by key, anything else replaces.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn default_table() -> Table {
    let mut t = Table::new();
    let mut pg = Table::new();
    let mv = mean_variance();
    pg.insert("tau".into(), Value::Float(mv.pg.tau));
    pg.insert("tau_unscaled".into(), Value::Float(mv.pg.tau_unscaled));
    pg.insert("epsilon".into(), Value::Float(mv.pg.epsilon));
    pg.insert("grid".into(), Value::Integer(mv.pg.grid as i64));
    pg.insert(
        "meshes".into(),
        Value::Array(mv.pg.meshes.iter().map(|&m| Value::Integer(m as i64)).collect()),
    );
    pg.insert("max_iterations".into(), Value::Integer(mv.pg.max_iterations as i64));
    pg.insert("convergence_tolerance".into(), Value::Float(mv.pg.convergence_tolerance));
    pg.insert("optimum".into(), Value::String(mv.pg.optimum.clone()));
    let mut mc = Table::new();
    mc.insert("paths".into(), Value::Integer(mv.mc.paths as i64));
    mc.insert("seed".into(), Value::Integer(mv.mc.seed as i64));
    mc.insert("repetitions".into(), Value::Integer(mv.mc.repetitions as i64));
    mc.insert("iterations".into(), Value::Integer(mv.mc.iterations as i64));
    let mut run = Table::new();
    run.insert("mode".into(), Value::String(Mode::ModelBased.name().into()));
    t.insert("name".into(), Value::String("custom".into()));
    t.insert("pg".into(), Value::Table(pg));
    t.insert("mc".into(), Value::Table(mc));
    t.insert("run".into(), Value::Table(run));
    t
}

/// Fill the optional model coefficients with zeros (identity for `vbar`).
fn fill_model_defaults(model: &mut Table) -> Result<(), ConfigError> {
    let dim = |key: &str| -> Result<usize, ConfigError> {
        match model.get(key) {
            Some(Value::Integer(n)) if *n > 0 => Ok(*n as usize),
            Some(_) => Err(invalid(&format!("model.{key}"), "expected a positive integer")),
            None => Err(ConfigError::MissingKeys(vec![format!("model.{key}")])),
        }
    };
    let (d, k) = (dim("state_dim")?, dim("action_dim")?);
    let zeros = |r: usize, c: usize| Value::Array(vec![Value::Array(vec![Value::Float(0.0); c]); r]);
    let identity = |n: usize| {
        Value::Array(
            (0..n)
                .map(|i| Value::Array((0..n).map(|j| Value::Float(if i == j { 1.0 } else { 0.0 })).collect()))
                .collect(),
        )
    };
    let defaults = [
        ("a", zeros(d, d)),
        ("b", zeros(d, k)),
        ("q", zeros(d, d)),
        ("s", zeros(k, d)),
        ("r", zeros(k, k)),
        ("vbar", identity(k)),
        ("terminal_cost", zeros(d, d)),
    ];
    for (key, v) in defaults {
        model.entry(key).or_insert(v);
    }
    model.entry("noise").or_insert(Value::Array(Vec::new()));
    Ok(())
}

/// Resolve a parsed TOML document into a validated spec.
pub fn resolve(doc: Table) -> Result<RunSpec, ConfigError> {
    let unknown = unknown_keys(&doc);
    if !unknown.is_empty() {
        return Err(ConfigError::UnknownKeys(unknown));
    }
    let mut table = match doc.get("preset") {
        Some(Value::String(name)) => match Value::try_from(preset(name)?) {
            Ok(Value::Table(t)) => t,
            _ => return Err(ConfigError::Parse("preset does not serialise to a table".into())),
        },
        Some(_) => return Err(invalid("preset", "expected a string")),
        None => default_table(),
    };
    let mut doc = doc;
    doc.remove("preset");
    merge(&mut table, doc);
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter(|k| lookup(&table, k).is_none())
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ConfigError::MissingKeys(missing));
    }
    if let Some(Value::Table(model)) = table.get_mut("model") {
        fill_model_defaults(model)?;
    }
    let spec: RunSpec = RunSpec::deserialize(Value::Table(table)).map_err(|e| ConfigError::Parse(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_config(text: &str) -> Result<RunSpec, ConfigError> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    resolve(doc)
}

pub fn load_config(path: &Path) -> Result<RunSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

fn check_matrix(key: &str, m: &[Vec<f64>], shape: (usize, usize)) -> Result<Mat, ConfigError> {
    let cols = m.first().map_or(0, Vec::len);
    if m.iter().any(|r| r.len() != cols) {
        return Err(invalid(key, "rows have different lengths"));
    }
    if (m.len(), cols) != shape {
        return Err(invalid(
            key,
            format!("expected {}x{}, found {}x{}", shape.0, shape.1, m.len(), cols),
        ));
    }
    if m.iter().flatten().any(|x| !x.is_finite()) {
        return Err(invalid(key, "non-finite entry"));
    }
    Ok(Mat::from_fn(shape.0, shape.1, |i, j| m[i][j]))
}

fn coefficient(key: &str, v: &CoefValue, shape: (usize, usize)) -> Result<Coefficient, ConfigError> {
    match v {
        CoefValue::Matrix(m) => Ok(Coefficient::constant(check_matrix(key, m, shape)?)),
        CoefValue::Named(name) => {
            let c = coefficient_preset(name).ok_or_else(|| {
                invalid(
                    key,
                    format!("unknown coefficient `{name}` (registered: {})", coefficient_preset_names().join(", ")),
                )
            })?;
            if c.shape() != shape {
                let (r, cc) = c.shape();
                return Err(invalid(
                    key,
                    format!("`{name}` is {r}x{cc}, expected {}x{}", shape.0, shape.1),
                ));
            }
            Ok(c)
        }
    }
}

fn model_err(e: LqcError) -> ConfigError {
    invalid("model", e.to_string())
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build_model()?;
        self.policy_matrices()?;
        let pg = &self.pg;
        for (key, v) in [
            ("pg.tau", pg.tau),
            ("pg.tau_unscaled", pg.tau_unscaled),
            ("pg.epsilon", pg.epsilon),
            ("pg.convergence_tolerance", pg.convergence_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be positive, got {v}")));
            }
        }
        if pg.grid == 0 {
            return Err(invalid("pg.grid", "must be positive"));
        }
        if pg.meshes.contains(&0) {
            return Err(invalid("pg.meshes", "mesh counts must be positive"));
        }
        self.optimum_estimate()?;
        if self.mc.paths == 0 {
            return Err(invalid("mc.paths", "must be positive"));
        }
        if self.mc.repetitions == 0 {
            return Err(invalid("mc.repetitions", "must be positive"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<LqcModel, ConfigError> {
        let m = &self.model;
        let (d, k) = (m.state_dim, m.action_dim);
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(invalid("model.horizon", format!("must be positive, got {}", m.horizon)));
        }
        if !(m.rho > 0.0 && m.rho.is_finite()) {
            return Err(invalid("model.rho", format!("must be positive, got {}", m.rho)));
        }
        if m.xi0_mean.len() != d {
            return Err(invalid(
                "model.xi0_mean",
                format!("expected length {d}, found {}", m.xi0_mean.len()),
            ));
        }
        let mut b = LqcModel::builder(d, k, m.horizon)
            .a(coefficient("model.a", &m.a, (d, d))?)
            .b(coefficient("model.b", &m.b, (d, k))?)
            .q(coefficient("model.q", &m.q, (d, d))?)
            .s(coefficient("model.s", &m.s, (k, d))?)
            .r(coefficient("model.r", &m.r, (k, k))?)
            .vbar(coefficient("model.vbar", &m.vbar, (k, k))?)
            .g(check_matrix("model.terminal_cost", &m.terminal_cost, (d, d))?)
            .rho(m.rho)
            .initial_law(
                Vector::from_vec(m.xi0_mean.clone()),
                check_matrix("model.xi0_cov", &m.xi0_cov, (d, d))?,
            );
        match (&m.noise_gram, m.noise.is_empty()) {
            (Some(_), false) => {
                return Err(invalid("model.noise_gram", "cannot be combined with model.noise"));
            }
            (Some(gram), true) => {
                if d != 1 {
                    return Err(invalid("model.noise_gram", "only supported for a scalar state"));
                }
                let gram = check_matrix("model.noise_gram", gram, (k, k))?;
                let root = psd_sqrt(&gram).map_err(|e| invalid("model.noise_gram", e.to_string()))?;
                for j in 0..k {
                    b = b.noise_channel(Coefficient::zeros(1, 1), Coefficient::constant(root.rows(j, 1).into_owned()));
                }
            }
            (None, _) => {
                for (j, ch) in m.noise.iter().enumerate() {
                    b = b.noise_channel(
                        coefficient(&format!("model.noise[{j}].c"), &ch.c, (d, d))?,
                        coefficient(&format!("model.noise[{j}].d"), &ch.d, (d, k))?,
                    );
                }
            }
        }
        b.build().map_err(model_err)
    }

    fn policy_matrices(&self) -> Result<(Mat, Mat), ConfigError> {
        let (d, k) = (self.model.state_dim, self.model.action_dim);
        let gain = check_matrix("policy.gain", &self.policy.gain, (k, d))?;
        let cov = check_matrix("policy.covariance", &self.policy.covariance, (k, k))?;
        Ok((gain, cov))
    }

    /// Uniform grid with `n` intervals on the model horizon.
    pub fn mesh(&self, n: usize) -> Result<TimeGrid, ConfigError> {
        TimeGrid::uniform(self.model.horizon, n).map_err(|e| invalid("pg.grid", e.to_string()))
    }

    pub fn fine_grid(&self) -> Result<TimeGrid, ConfigError> {
        self.mesh(self.pg.grid)
    }

    /// The constant starting policy on `grid`.
    pub fn theta0(&self, grid: &TimeGrid) -> Result<Policy, ConfigError> {
        let (gain, cov) = self.policy_matrices()?;
        Policy::constant(grid.clone(), gain, cov).map_err(|e| invalid("policy.covariance", e.to_string()))
    }

    pub fn optimum_estimate(&self) -> Result<OptimumEstimate, ConfigError> {
        match self.pg.optimum.as_str() {
            "converged" => Ok(OptimumEstimate::CONVERGED),
            "tail" => Ok(OptimumEstimate::TAIL_1000),
            other => Err(invalid("pg.optimum", format!("expected `converged` or `tail`, got `{other}`"))),
        }
    }

    /// Simulation settings for repetition `rep` on the fine grid.
    pub fn sim_config(&self, model: &LqcModel, rep: usize) -> Result<SimConfig, ConfigError> {
        SimConfig::for_model(model, self.mc.paths, self.fine_grid()?, self.seed(rep))
            .map_err(|e| invalid("mc", e.to_string()))
    }

    pub fn seed(&self, rep: usize) -> u64 {
        self.mc.seed.wrapping_add(rep as u64)
    }

    /// Seeds of the model-free repetitions.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.mc.repetitions).map(|r| self.seed(r)).collect()
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(t) = o.tau {
            self.pg.tau = t;
        }
        if let Some(e) = o.epsilon {
            self.pg.epsilon = e;
        }
        if let Some(g) = o.grid {
            self.pg.grid = g;
        }
        if let Some(s) = o.seed {
            self.mc.seed = s;
        }
        if let Some(p) = o.paths {
            self.mc.paths = p;
        }
        if let Some(m) = o.mode {
            self.run.mode = m;
        }
        self.validate()
    }

    /// Canonical TOML with every key spelled out.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.emit().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest.iter() {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }
}

/// Keys of the schema, for documentation and tests.
pub fn known_keys() -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (prefix, keys) in [
        ("", TOP_KEYS),
        ("model.", MODEL_KEYS),
        ("model.noise[].", NOISE_KEYS),
        ("policy.", POLICY_KEYS),
        ("pg.", PG_KEYS),
        ("mc.", MC_KEYS),
        ("run.", RUN_KEYS),
    ] {
        out.extend(keys.iter().map(|k| format!("{prefix}{k}")));
    }
    out
}

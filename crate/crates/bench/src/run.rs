//! Benchmark orchestration: the convergence run, optional model-free
//! repetitions and the mesh sweep.

use lqpg_core::mc::{run_model_free_pg, GradientEstimator};
use lqpg_core::ode::solve_riccati;
use lqpg_core::pg::{
    iterations_to_tolerance, mesh_sweep, run_continuous_pg, MeshSweepConfig, MeshSweepTable, PgConfig, PgVariant,
    Reference, RunRecord, VProjection,
};
use lqpg_core::{LqcError, Scheme, SolverOptions};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, Mode, RunSpec};

/// How the shaded band of the convergence panel is computed.
pub const SPREAD_NOTE: &str = "min/max range over repetitions (not a standard deviation)";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Manifest {
    pub name: String,
    pub mode: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// `complete`, `dry-run` or `failed`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Optimal cost from the Riccati route on the fine grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_star: Option<f64>,
    pub grid: usize,
    pub epsilon: f64,
    /// Iterations of the continuous run to reach `epsilon`; `NA` if never.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_continuous: Option<String>,
    /// The same count for each model-free repetition.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub n_model_free: Vec<String>,
    pub spread: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    /// Canonical form of the spec; absent for a dry run.
    pub config: Option<String>,
    pub manifest: Manifest,
    pub convergence: Option<RunRecord>,
    /// Estimated suboptimality per iteration, one trace per repetition.
    pub model_free: Vec<Vec<f64>>,
    pub sweep: Option<MeshSweepTable>,
}

impl ReportBundle {
    pub fn new(spec: &RunSpec) -> Self {
        Self {
            config: Some(spec.emit()),
            manifest: Manifest {
                name: spec.name.clone(),
                mode: spec.run.mode.name().to_string(),
                config_hash: spec.hash(),
                seeds: match spec.run.mode {
                    Mode::ModelBased => Vec::new(),
                    Mode::ModelFree => spec.seeds(),
                },
                status: "running".to_string(),
                grid: spec.pg.grid,
                epsilon: spec.pg.epsilon,
                spread: SPREAD_NOTE.to_string(),
                ..Manifest::default()
            },
            convergence: None,
            model_free: Vec::new(),
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub dry_run: bool,
}

/// A failed run with whatever finished before the failure.
#[derive(Debug)]
pub struct BenchFailure {
    pub error: LqcError,
    pub partial: ReportBundle,
}

fn na(n: Option<usize>) -> String {
    n.map_or("NA".to_string(), |v| v.to_string())
}

fn config_to_lqc(e: ConfigError) -> LqcError {
    LqcError::InvalidInput(e.to_string())
}

/// Run the benchmark described by `spec`. On failure the partial bundle
/// carries a manifest with status `failed`.
pub fn run_benchmark(spec: &RunSpec, opts: RunOptions) -> Result<ReportBundle, Box<BenchFailure>> {
    let mut bundle = ReportBundle::new(spec);
    if opts.dry_run {
        bundle.manifest.status = "dry-run".to_string();
        bundle.config = None;
        return Ok(bundle);
    }
    match execute(spec, &mut bundle) {
        Ok(()) => {
            bundle.manifest.status = "complete".to_string();
            Ok(bundle)
        }
        Err(error) => {
            bundle.manifest.status = "failed".to_string();
            bundle.manifest.error = Some(error.to_string());
            Err(Box::new(BenchFailure { error, partial: bundle }))
        }
    }
}

fn execute(spec: &RunSpec, bundle: &mut ReportBundle) -> Result<(), LqcError> {
    let model = spec.build_model().map_err(config_to_lqc)?;
    let fine = spec.fine_grid().map_err(config_to_lqc)?;
    let theta0 = spec.theta0(&fine).map_err(config_to_lqc)?;
    let ric = solve_riccati(&model, &fine, Scheme::Euler)?;
    let c_star = ric.optimal_cost;
    bundle.manifest.c_star = Some(c_star);

    let mut cfg = PgConfig::new(spec.pg.tau, PgVariant::Continuous);
    cfg.solver = SolverOptions::on_policy_grid(Scheme::Euler);
    cfg.stop_epsilon = spec.pg.convergence_tolerance;
    cfg.max_iterations = spec.pg.max_iterations;
    let rec = run_continuous_pg(&model, &theta0, &cfg, &Reference::from_riccati(&ric))?;
    let n_continuous = rec.iterations_to(spec.pg.epsilon, c_star);
    bundle.manifest.n_continuous = Some(na(n_continuous));
    log::info!("continuous run: {} iterations, N(eps) = {}", rec.iterations_run(), na(n_continuous));
    bundle.convergence = Some(rec);

    if spec.run.mode == Mode::ModelFree {
        let mut mf = PgConfig::new(spec.pg.tau, PgVariant::DiscreteScaled);
        mf.max_iterations = spec.mc.iterations;
        mf.stop_epsilon = f64::MIN_POSITIVE;
        // Noisy estimates can undershoot C*, so the run is measured
        // against -inf and never stops early.
        let unbounded = Reference::value(f64::NEG_INFINITY);
        let traces = (0..spec.mc.repetitions)
            .into_par_iter()
            .map(|rep| -> Result<Vec<f64>, LqcError> {
                let sim = spec.sim_config(&model, rep).map_err(config_to_lqc)?;
                let rec = run_model_free_pg(&model, &theta0, &mf, &sim, &unbounded, GradientEstimator::Pathwise)?;
                Ok(rec.costs().iter().map(|c| c - c_star).collect())
            })
            .collect::<Result<Vec<_>, _>>()?;
        bundle.manifest.n_model_free = traces
            .iter()
            .map(|t| na(iterations_to_tolerance(t, spec.pg.epsilon, 0.0)))
            .collect();
        bundle.model_free = traces;
    }

    let meshes = spec
        .pg
        .meshes
        .iter()
        .map(|&m| spec.mesh(m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_to_lqc)?;
    let mut scaled = PgConfig::new(spec.pg.tau, PgVariant::DiscreteScaled);
    scaled.solver = SolverOptions::on_grid(Scheme::Euler, fine);
    scaled.max_iterations = spec.pg.max_iterations;
    let mut unscaled = scaled.clone();
    unscaled.tau = spec.pg.tau_unscaled;
    let sweep_cfg = MeshSweepConfig {
        scaled,
        unscaled,
        epsilon: spec.pg.epsilon,
        optimum: spec.optimum_estimate().map_err(config_to_lqc)?,
        projection: VProjection::Average,
    };
    bundle.sweep = Some(mesh_sweep(&model, &theta0, &meshes, &sweep_cfg, n_continuous)?);
    Ok(())
}

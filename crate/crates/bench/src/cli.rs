//! The `lqpg` command line.
//!
//! Exit codes: 0 on success, 1 for configuration or I/O errors, 2 for a
//! numerical failure. A numerical failure also writes `diagnostics.txt` to
//! the output directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lqpg_core::landscape::{
    lojasiewicz_residual, noncoercive_example_cost, performance_gap_residual, random_policy, residual_sweep_csv,
    smoothness_residual, SweepCase,
};
use lqpg_core::mc::{estimate_cost, run_model_free_pg, simulate_paths, GradientEstimator};
use lqpg_core::ode::{optimal_policy, solve_riccati};
use lqpg_core::pg::{run_continuous_pg, PgConfig, PgVariant, Reference};
use lqpg_core::{validate_model, LqcError, Scheme, Solver, SolverOptions, TimeGrid};

use crate::config::{load_config, preset, ConfigError, Mode, Overrides, RunSpec, MEAN_VARIANCE};
use crate::report::{emit_report, mesh_sweep_svg, Format, ReportError};
use crate::run::{run_benchmark, ReportBundle, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "lqpg", version, about = "Policy gradient benchmarks for entropy-regularised LQ control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: GlobalOpts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model assumptions and print the config hash.
    Validate,
    /// Solve the Riccati equation and report the optimal cost.
    Riccati,
    /// Evaluate the cost of the starting policy.
    Cost,
    /// Run policy gradient from the starting policy.
    PgRun,
    /// Count iterations to tolerance across the mesh family.
    MeshSweep,
    /// Monte Carlo estimate of the optimal policy's cost.
    McEstimate,
    /// Check the landscape inequalities on random policies.
    Landscape {
        /// Number of random cases.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Full benchmark with report.
    Bench,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    #[arg(long, global = true, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Intervals of the fine grid.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, global = true, default_value = "lqpg-out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    pub format: Format,
    /// Resolve the config and write the manifest without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

enum Failure {
    Config(String),
    Numerical(LqcError),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<LqcError> for Failure {
    fn from(e: LqcError) -> Self {
        Failure::Numerical(e)
    }
}

type Outcome = Result<(), Failure>;

pub fn resolve_spec(opts: &GlobalOpts) -> Result<RunSpec, ConfigError> {
    let mut spec = match (&opts.config, &opts.preset) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => preset(MEAN_VARIANCE)?,
    };
    spec.apply(&Overrides {
        tau: opts.tau,
        epsilon: opts.epsilon,
        grid: opts.grid,
        seed: opts.seed,
        paths: opts.paths,
        mode: opts.mode,
    })?;
    Ok(spec)
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    execute(&cli)
}

pub fn execute(cli: &Cli) -> i32 {
    let spec = match resolve_spec(&cli.opts) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    let outcome = if cli.opts.dry_run {
        dry_run(cli, &spec)
    } else {
        match &cli.command {
            Command::Validate => validate(&spec),
            Command::Riccati => riccati(cli, &spec),
            Command::Cost => cost(cli, &spec),
            Command::PgRun => pg_run(cli, &spec),
            Command::MeshSweep => sweep(cli, &spec),
            Command::McEstimate => mc_estimate(cli, &spec),
            Command::Landscape { cases } => landscape(cli, &spec, *cases),
            Command::Bench => bench(cli, &spec),
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e}");
            match write_diagnostics(&cli.opts.out, &spec, &e) {
                Ok(path) => eprintln!("diagnostics written to {}", path.display()),
                Err(w) => eprintln!("{w}"),
            }
            2
        }
    }
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf, ReportError> {
    let err = |path: &Path, source| ReportError {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| err(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| err(&path, e))?;
    Ok(path)
}

/// `diagnostics.txt`, plus `diagnostics_run.csv` when a PG run aborted.
pub fn write_diagnostics(dir: &Path, spec: &RunSpec, e: &LqcError) -> Result<PathBuf, ReportError> {
    let mut body = String::new();
    let _ = writeln!(body, "error: {e}");
    let _ = writeln!(body, "config_hash: {}", spec.hash());
    if let LqcError::PgAborted { iteration, record, .. } = e {
        let _ = writeln!(body, "aborted_at: {iteration}");
        let _ = writeln!(body, "left_theta_at: {:?}", record.left_theta_at);
        write_file(dir, "diagnostics_run.csv", &record.to_csv())?;
    }
    body.push_str("\n[config]\n");
    body.push_str(&spec.emit());
    write_file(dir, "diagnostics.txt", &body)
}

fn dry_run(cli: &Cli, spec: &RunSpec) -> Outcome {
    if let Command::Bench = cli.command {
        let bundle = run_benchmark(spec, RunOptions { dry_run: true }).map_err(|f| Failure::Numerical(f.error))?;
        emit_report(&bundle, &cli.opts.out, cli.opts.format)?;
    } else {
        print!("{}", spec.emit());
    }
    println!("config_hash = {}", spec.hash());
    Ok(())
}

fn validate(spec: &RunSpec) -> Outcome {
    let model = spec.build_model()?;
    let report = validate_model(&model, &spec.fine_grid()?)?;
    println!("config_hash = {}", spec.hash());
    println!("vbar_margin = {:e}", report.vbar_margin);
    if report.is_ok() {
        println!("ok");
        Ok(())
    } else {
        Err(Failure::Config(report.messages().join("; ")))
    }
}

fn riccati(cli: &Cli, spec: &RunSpec) -> Outcome {
    let model = spec.build_model()?;
    let ric = solve_riccati(&model, &spec.fine_grid()?, Scheme::Euler)?;
    println!("c_star = {:.12}", ric.optimal_cost);
    println!("delta_tilde = {:e}", ric.delta_tilde);
    println!("strongly_regular = {}", ric.strongly_regular);
    let d = model.state_dim();
    let mut csv = String::from("t");
    for r in 0..d {
        for c in 0..d {
            let _ = write!(csv, ",P_{r}{c}");
        }
    }
    csv.push_str(",phi\n");
    for (j, t) in ric.grid.nodes().iter().enumerate() {
        let _ = write!(csv, "{t:.17e}");
        for v in ric.p_star[j].transpose().iter() {
            let _ = write!(csv, ",{v:.17e}");
        }
        let _ = writeln!(csv, ",{:.17e}", ric.phi_star[j]);
    }
    write_file(&cli.opts.out, "riccati.csv", &csv)?;
    Ok(())
}

fn cost(cli: &Cli, spec: &RunSpec) -> Outcome {
    let model = spec.build_model()?;
    let theta = spec.theta0(&spec.fine_grid()?)?;
    let solver = Solver::for_policy(&model, &theta, &SolverOptions::on_policy_grid(Scheme::Euler))?;
    let eval = solver.evaluate(&theta)?;
    let c = eval.cost;
    println!("total = {:.12}", c.total);
    println!("quadratic_terminal = {:.12}", c.quadratic_terminal);
    println!("running_quadratic = {:.12}", c.running_quadratic);
    println!("entropy_term = {:.12}", c.entropy_term);
    println!("representation_gap = {:e}", c.representation_gap);
    write_file(&cli.opts.out, "cost_trajectory.csv", &eval.trajectory.to_csv())?;
    Ok(())
}

fn pg_run(cli: &Cli, spec: &RunSpec) -> Outcome {
    let model = spec.build_model()?;
    let fine = spec.fine_grid()?;
    let theta0 = spec.theta0(&fine)?;
    let ric = solve_riccati(&model, &fine, Scheme::Euler)?;
    let reference = Reference::from_riccati(&ric);
    let rec = match spec.run.mode {
        Mode::ModelBased => {
            let mut cfg = PgConfig::new(spec.pg.tau, PgVariant::Continuous);
            cfg.solver = SolverOptions::on_policy_grid(Scheme::Euler);
            cfg.stop_epsilon = spec.pg.convergence_tolerance;
            cfg.max_iterations = spec.pg.max_iterations;
            cfg.diagnostics_on = true;
            run_continuous_pg(&model, &theta0, &cfg, &reference)?
        }
        Mode::ModelFree => {
            let mut cfg = PgConfig::new(spec.pg.tau, PgVariant::DiscreteScaled);
            cfg.max_iterations = spec.mc.iterations;
            cfg.stop_epsilon = spec.pg.epsilon;
            let sim = spec.sim_config(&model, 0)?;
            run_model_free_pg(&model, &theta0, &cfg, &sim, &reference, GradientEstimator::Pathwise)?
        }
    };
    let n = rec.iterations_to(spec.pg.epsilon, ric.optimal_cost);
    println!("c_star = {:.12}", ric.optimal_cost);
    println!("iterations = {}", rec.iterations_run());
    println!("n_epsilon = {}", n.map_or("NA".to_string(), |v| v.to_string()));
    if let Some(last) = rec.iterations.last() {
        println!("final_subopt = {:e}", last.subopt);
    }
    if spec.run.mode == Mode::ModelBased {
        println!("diagnostics_ok = {}", rec.diagnostics_ok());
    }
    write_file(&cli.opts.out, "pg_run.csv", &rec.to_csv())?;
    Ok(())
}

fn sweep(cli: &Cli, spec: &RunSpec) -> Outcome {
    let mut only_sweep = spec.clone();
    only_sweep.run.mode = Mode::ModelBased;
    let bundle = run_benchmark(&only_sweep, RunOptions::default()).map_err(|f| Failure::Numerical(f.error))?;
    let table = bundle.sweep.expect("complete run has a sweep");
    for r in &table.rows {
        let fmt = |n: Option<usize>| n.map_or("NA".to_string(), |v| v.to_string());
        println!("m = {:4}  scaled = {:>5}  unscaled = {:>5}", r.intervals, fmt(r.n_scaled), fmt(r.n_unscaled));
    }
    if cli.opts.format != Format::Svg {
        write_file(&cli.opts.out, "mesh_sweep.csv", &table.to_csv())?;
    }
    if cli.opts.format != Format::Csv {
        write_file(&cli.opts.out, "mesh_sweep.svg", &mesh_sweep_svg(&table))?;
    }
    Ok(())
}

fn mc_estimate(cli: &Cli, spec: &RunSpec) -> Outcome {
    let model = spec.build_model()?;
    let fine = spec.fine_grid()?;
    let ric = solve_riccati(&model, &fine, Scheme::Euler)?;
    let star = optimal_policy(&model, &ric)?;
    let cfg = spec.sim_config(&model, 0)?;
    let ens = simulate_paths(&model, &star, &cfg)?;
    let est = estimate_cost(&ens, &model, &star)?;
    println!("paths = {}", est.num_paths);
    println!("mc_cost = {:.9}", est.value);
    println!("std_error = {:e}", est.std_error);
    println!("c_star = {:.12}", ric.optimal_cost);
    write_file(&cli.opts.out, "mc_summary.csv", &ens.summary_csv()?)?;
    Ok(())
}

fn landscape(cli: &Cli, spec: &RunSpec, cases: usize) -> Outcome {
    let model = spec.build_model()?;
    let fine = spec.fine_grid()?;
    let coarse = TimeGrid::uniform(model.horizon(), 8)?;
    if !fine.refines(&coarse) {
        return Err(Failure::Config("`pg.grid` must be a multiple of 8 for the landscape sweep".into()));
    }
    let ric = solve_riccati(&model, &fine, Scheme::Euler)?;
    let opts = SolverOptions::on_grid(Scheme::Euler, fine);
    let (k, d) = (model.action_dim(), model.state_dim());
    let mut gap = Vec::new();
    let mut loj = Vec::new();
    let mut smooth = Vec::new();
    for case_id in 0..cases {
        let seed = 1000 + case_id as u64;
        let theta = random_policy(&coarse, k, d, seed)?;
        let other = random_policy(&coarse, k, d, seed + 500_000)?;
        let row = |report| SweepCase { case_id, seed, report };
        gap.push(row(performance_gap_residual(&model, &theta, &other, &opts, 1e-5)?));
        loj.push(row(lojasiewicz_residual(&model, &theta.refine_to(&ric.grid)?, &ric)?));
        smooth.push(row(smoothness_residual(&model, &theta, &other, &opts)?));
    }
    let mut failed = 0;
    for (name, rows) in [("performance_gap", &gap), ("lojasiewicz", &loj), ("smoothness", &smooth)] {
        let bad = rows.iter().filter(|c| !c.report.satisfied).count();
        failed += bad;
        println!("{name}: {}/{} satisfied", rows.len() - bad, rows.len());
        write_file(&cli.opts.out, &format!("{name}.csv"), &residual_sweep_csv(rows))?;
    }
    let g = TimeGrid::uniform(1.0, 4096)?;
    for eps in [0.1, 0.01] {
        println!(
            "noncoercive eps = {eps}: C(K) = {:.6}  C(K/2) = {:.6}",
            noncoercive_example_cost(eps, 1.0, &g)?,
            noncoercive_example_cost(eps, 0.5, &g)?
        );
    }
    if failed > 0 {
        return Err(Failure::Numerical(LqcError::InvalidInput(format!(
            "{failed} landscape checks failed"
        ))));
    }
    Ok(())
}

fn bench(cli: &Cli, spec: &RunSpec) -> Outcome {
    match run_benchmark(spec, RunOptions::default()) {
        Ok(bundle) => {
            summarise(&bundle);
            emit_report(&bundle, &cli.opts.out, cli.opts.format)?;
            Ok(())
        }
        Err(f) => {
            emit_report(&f.partial, &cli.opts.out, cli.opts.format)?;
            Err(Failure::Numerical(f.error))
        }
    }
}

fn summarise(bundle: &ReportBundle) {
    let m = &bundle.manifest;
    if let Some(c) = m.c_star {
        println!("c_star = {c:.12}");
    }
    if let Some(n) = &m.n_continuous {
        println!("n_continuous = {n}");
    }
    if !m.n_model_free.is_empty() {
        println!("n_model_free = {}", m.n_model_free.join(" "));
    }
    println!("config_hash = {}", m.config_hash);
}

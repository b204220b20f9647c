//! Headline acceptance checks. Each test prints one `[acceptance]` line with
//! the verdict and the measured numbers, then asserts the verdict.

mod common;

use std::time::Instant;

use common::{grid, random_model};
use lqpg_core::benchmark::{initial_policy, mean_variance_model, mesh, EPSILON, MESHES, SCALED_TAU, UNSCALED_TAU};
use lqpg_core::landscape::{
    fd_gradient_compare, lojasiewicz_residual, noncoercive_example_cost, performance_gap_residual, random_policy,
    smoothness_residual, PolicyDirection,
};
use lqpg_core::mc::{estimate_cost, estimate_cost_control_variate, estimate_covariance, simulate_paths, SimConfig};
use lqpg_core::ode::{optimal_policy, solve_riccati, Resolution};
use lqpg_core::pg::{
    log_linear_fit, mesh_sweep, run_continuous_pg, MeshSweepConfig, OptimumEstimate, PgConfig, PgVariant, Reference,
    VProjection,
};
use lqpg_core::{Scheme, Solver, SolverOptions};

const TARGET_COST: f64 = 0.0402;
const COST_TOL: f64 = 5e-4;
const COST_SECONDS: f64 = 1.0;
const FIT_R2: f64 = 0.98;
const FIT_UNTIL: f64 = 1e-6;
const MESH_SLACK: usize = 1;
const UNSCALED_GROWTH: usize = 8;
const SWEEP_SECONDS: f64 = 60.0;
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;
const FD_CASES: u64 = 20;
const GAP_TOL: f64 = 1e-5;
const LANDSCAPE_CASES: usize = 120;
const NONCOERCIVE_TOL: f64 = 1e-4;
const HALF_SCALED_COST: f64 = 0.544_976;
const DIAG_ITERATIONS: usize = 200;
const MC_PATHS: usize = 100_000;
const MC_SE: f64 = 3.0;
const MC_BAND: f64 = 5e-3;
const BIAS_RATIO: (f64, f64) = (1.6, 2.4);
const SMOKE_PATHS: usize = 1000;
const SMOKE_SE: f64 = 4.0;
const SMOKE_BAND: f64 = 1e-2;
const SMOKE_SECONDS: f64 = 10.0;

fn verdict(id: &str, name: &str, pass: bool, detail: String) {
    println!(
        "[acceptance] {id} {name}: {} | {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{id} {name}: {detail}");
}

fn benchmark_reference() -> (lqpg_core::LqcModel, lqpg_core::RiccatiSolution) {
    let model = mean_variance_model();
    let ric = solve_riccati(&model, &mesh(128), Scheme::Euler).unwrap();
    (model, ric)
}

fn continuous_run(stop: f64, iterations: usize, diagnostics: bool) -> lqpg_core::pg::RunRecord {
    let (model, ric) = benchmark_reference();
    let mut cfg = PgConfig::new(SCALED_TAU, PgVariant::Continuous);
    cfg.solver = SolverOptions::on_policy_grid(Scheme::Euler);
    cfg.stop_epsilon = stop;
    cfg.max_iterations = iterations;
    cfg.diagnostics_on = diagnostics;
    run_continuous_pg(&model, &initial_policy(&mesh(128)).unwrap(), &cfg, &Reference::from_riccati(&ric)).unwrap()
}

#[test]
fn a1_optimal_cost_reproduction() {
    let model = mean_variance_model();
    let start = Instant::now();
    let ric = solve_riccati(&model, &mesh(128), Scheme::Euler).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let c = ric.optimal_cost;
    let rk4 = solve_riccati(&model, &mesh(128), Scheme::Rk4).unwrap().optimal_cost;
    let pass = (c - TARGET_COST).abs() <= COST_TOL && secs < COST_SECONDS;
    verdict(
        "A1",
        "optimal cost",
        pass,
        format!("C* = {c:.9} (RK4 {rk4:.9}) vs {TARGET_COST} ± {COST_TOL:e}; {secs:.3} s"),
    );
}

#[test]
fn a2_linear_convergence() {
    let (_, ric) = benchmark_reference();
    let rec = continuous_run(FIT_UNTIL, 5000, false);
    let subopts = rec.subopts();
    let monotone = subopts.windows(2).all(|w| w[1] <= w[0]);
    let fit = log_linear_fit(&subopts).unwrap();
    let n = rec.iterations_to(EPSILON, ric.optimal_cost);
    let pass = rec.reached_epsilon && monotone && fit.slope < 0.0 && fit.r_squared >= FIT_R2 && n.is_some();
    verdict(
        "A2",
        "linear convergence",
        pass,
        format!(
            "monotone = {monotone}, slope = {:.5}, R² = {:.5} over {} iterates, N({EPSILON}) = {n:?}",
            fit.slope, fit.r_squared, fit.points
        ),
    );
}

#[test]
fn a3_mesh_independence() {
    let (model, ric) = benchmark_reference();
    let n_cont = continuous_run(EPSILON, 5000, false).iterations_to(EPSILON, ric.optimal_cost);
    let mut scaled = PgConfig::new(SCALED_TAU, PgVariant::DiscreteScaled);
    scaled.solver = SolverOptions::on_grid(Scheme::Euler, mesh(128));
    scaled.max_iterations = 5000;
    let mut unscaled = scaled.clone();
    unscaled.tau = UNSCALED_TAU;
    let cfg = MeshSweepConfig {
        scaled,
        unscaled,
        epsilon: EPSILON,
        optimum: OptimumEstimate::CONVERGED,
        projection: VProjection::Average,
    };
    let meshes: Vec<_> = MESHES.iter().map(|&m| mesh(m)).collect();
    let start = Instant::now();
    let table = mesh_sweep(&model, &initial_policy(&mesh(128)).unwrap(), &meshes, &cfg, n_cont).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let n = n_cont.unwrap_or(usize::MAX);
    let rows = &table.rows;
    let finest_ok = rows[rows.len() - 2..]
        .iter()
        .all(|r| r.n_scaled.is_some_and(|m| m.abs_diff(n) <= MESH_SLACK));
    let growth_ok = match (rows[0].n_unscaled, rows[rows.len() - 1].n_unscaled) {
        (Some(a), Some(b)) => b >= UNSCALED_GROWTH * a,
        _ => false,
    };
    let scaled: Vec<_> = rows.iter().map(|r| r.n_scaled).collect();
    let unscaled: Vec<_> = rows.iter().map(|r| r.n_unscaled).collect();
    verdict(
        "A3",
        "mesh independence",
        finest_ok && growth_ok && secs < SWEEP_SECONDS,
        format!("N = {n}, scaled {scaled:?}, unscaled {unscaled:?}, {secs:.1} s"),
    );
}

#[test]
fn a4_gradient_oracle() {
    let opts = SolverOptions::new(Scheme::Euler, Resolution::Refine(16));
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (d, k) in [(1, 1), (2, 2)] {
        for seed in 0..FD_CASES {
            let model = random_model(d, k, 100 + seed);
            let theta = random_policy(&grid(8), k, d, 200 + seed).unwrap();
            let dir = PolicyDirection::random(&theta, 300 + seed);
            let cmp = fd_gradient_compare(&model, &theta, &dir, FD_STEP, &opts).unwrap();
            worst = worst.max(cmp.relative_error);
            cases += 1;
        }
    }
    verdict(
        "A4",
        "gradient oracle",
        worst <= FD_TOL,
        format!("{cases} cases at h = {FD_STEP:e}, worst relative error {worst:.2e} (limit {FD_TOL:e})"),
    );
}

#[test]
fn a5_landscape_inequalities() {
    let euler = SolverOptions::new(Scheme::Euler, Resolution::Refine(16));
    let mut gap_worst: f64 = 0.0;
    let (mut loj_ok, mut smooth_ok, mut total) = (0, 0, 0);
    for (d, k, n) in [(1, 1, 100u64), (2, 2, 20)] {
        for case in 0..n {
            let seed = 40_000 + 1000 * d as u64 + case;
            let model = random_model(d, k, seed);
            let theta = random_policy(&grid(8), k, d, seed + 1).unwrap();
            let other = random_policy(&grid(8), k, d, seed + 2).unwrap();
            let gap = performance_gap_residual(&model, &theta, &other, &euler, GAP_TOL).unwrap();
            gap_worst = gap_worst.max(gap.residual);
            let ric = solve_riccati(&model, &grid(64), Scheme::Euler).unwrap();
            loj_ok += lojasiewicz_residual(&model, &theta, &ric).unwrap().satisfied as usize;
            smooth_ok += smoothness_residual(&model, &theta, &other, &euler).unwrap().satisfied as usize;
            total += 1;
        }
    }
    let pass = total >= LANDSCAPE_CASES && gap_worst <= GAP_TOL && loj_ok == total && smooth_ok == total;
    verdict(
        "A5",
        "landscape inequalities",
        pass,
        format!("{total} cases: gap residual ≤ {gap_worst:.2e}, Łojasiewicz {loj_ok}/{total}, smoothness {smooth_ok}/{total}"),
    );
}

#[test]
fn a6_noncoercivity_witness() {
    let g = grid(4096);
    let mut closed_ok = true;
    let mut parts = Vec::new();
    for eps in [0.1, 0.01] {
        let c = noncoercive_example_cost(eps, 1.0, &g).unwrap();
        let expect = 1.0 / (1.0 + eps).powi(2);
        closed_ok &= (c - expect).abs() <= NONCOERCIVE_TOL;
        parts.push(format!("C(K^{eps}) = {c:.6} vs {expect:.6}"));
    }
    let full = noncoercive_example_cost(0.1, 1.0, &g).unwrap();
    let half = noncoercive_example_cost(0.1, 0.5, &g).unwrap();
    let zero = noncoercive_example_cost(0.1, 0.0, &g).unwrap();
    let half_ok = (half - HALF_SCALED_COST).abs() <= NONCOERCIVE_TOL;
    let exceeds = half > zero && half > full;
    parts.push(format!("C(0.5 K^0.1) = {half:.6}, C(0) = {zero:.6}, exceeds both = {exceeds}"));
    verdict("A6", "noncoercivity witness", closed_ok && half_ok && exceeds, parts.join("; "));
}

#[test]
fn a7_implicit_regularisation() {
    let rec = continuous_run(1e-12, DIAG_ITERATIONS, true);
    let first = rec.iterations[0].diagnostics.as_ref().unwrap();
    let step_ok = SCALED_TAU <= 1.0 / first.lambda_bar0;
    let bad: Vec<usize> = rec
        .iterations
        .iter()
        .filter(|it| {
            let d = it.diagnostics.as_ref().unwrap();
            !(d.v_in_envelope && d.loewner_ok())
        })
        .map(|it| it.iteration)
        .collect();
    let pass = step_ok && rec.iterations_run() == DIAG_ITERATIONS && bad.is_empty();
    verdict(
        "A7",
        "implicit regularisation",
        pass,
        format!(
            "{} iterations, tau·λ̄₀ = {:.4}, violations at {bad:?}",
            rec.iterations_run(),
            SCALED_TAU * first.lambda_bar0
        ),
    );
}

#[test]
fn a8_monte_carlo_consistency() {
    let (model, ric) = benchmark_reference();
    let star = optimal_policy(&model, &ric).unwrap();

    let cfg = SimConfig::for_model(&model, MC_PATHS, mesh(128), 11).unwrap();
    let start = Instant::now();
    let ens = simulate_paths(&model, &star, &cfg).unwrap();
    let est = estimate_cost(&ens, &model, &star).unwrap();
    let cost_ok = est.within(TARGET_COST, MC_SE, MC_BAND);
    let sigma = Solver::for_policy(&model, &star, &SolverOptions::on_policy_grid(Scheme::Euler))
        .unwrap()
        .evaluate(&star)
        .unwrap()
        .trajectory
        .sigma;
    let nodes: Vec<usize> = (0..=128).step_by(8).collect();
    let moments_ok = estimate_covariance(&ens, &nodes)
        .unwrap()
        .iter()
        .zip(&nodes)
        .all(|(m, &j)| m.within(&sigma[j], MC_SE, MC_BAND));
    drop(ens);

    let continuum = Solver::for_policy(&model, &star, &SolverOptions::new(Scheme::Rk4, Resolution::Refine(16)))
        .unwrap()
        .cost(&star)
        .unwrap();
    let bias: Vec<f64> = [128, 256]
        .iter()
        .map(|&n| {
            let cfg = SimConfig::for_model(&model, MC_PATHS, mesh(n), 12).unwrap();
            estimate_cost_control_variate(&model, &star, &cfg).unwrap().value - continuum
        })
        .collect();
    let ratio = bias[0] / bias[1];
    let bias_ok = (BIAS_RATIO.0..=BIAS_RATIO.1).contains(&ratio);
    let secs = start.elapsed().as_secs_f64();

    let smoke_cfg = SimConfig::for_model(&model, SMOKE_PATHS, mesh(128), 13).unwrap();
    let t = Instant::now();
    let smoke = estimate_cost(&simulate_paths(&model, &star, &smoke_cfg).unwrap(), &model, &star).unwrap();
    let smoke_secs = t.elapsed().as_secs_f64();
    let smoke_ok = smoke.within(TARGET_COST, SMOKE_SE, SMOKE_BAND) && smoke_secs < SMOKE_SECONDS;

    verdict(
        "A8",
        "Monte Carlo consistency",
        cost_ok && moments_ok && bias_ok && smoke_ok,
        format!(
            "cost {:.6} ± {:.1e} vs {TARGET_COST} (band {MC_SE} SE + {MC_BAND:e}) {cost_ok}; moments {moments_ok}; \
             bias {:.3e} -> {:.3e}, ratio {ratio:.2} {bias_ok}; {secs:.1} s; smoke {:.5} ± {:.1e} in {smoke_secs:.2} s {smoke_ok}",
            est.value, est.std_error, bias[0], bias[1], smoke.value, smoke.std_error
        ),
    );
}

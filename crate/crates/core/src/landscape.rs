//! Numerical checks of the cost landscape: the performance-gap identity, the
//! Łojasiewicz and almost-smoothness inequalities, the noncoercive scalar
//! example and a finite-difference gradient checker.
//!
//! All integrals run over the solver's quadrature points, so in Euler mode
//! the identity holds for the discrete cost up to roundoff.

use std::fmt::Write as _;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{LqcError, Result};
use crate::grid::TimeGrid;
use crate::linalg::{frob, sym_norm2, sym_inverse, Mat};
use crate::model::LqcModel;
use crate::ode::{optimal_policy, Evaluation, RiccatiSolution, Solver, SolverOptions};
use crate::pg::gradient_field;
use crate::policy::Policy;

/// Relative tolerance of the inequality checks.
pub const REL_TOL: f64 = 1e-6;
/// Absolute floor added to every tolerance.
pub const ABS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// `residual = |lhs − rhs|`, satisfied when `residual ≤ tol`.
    Identity,
    /// `residual = rhs − lhs`, satisfied when `residual ≥ −tol`.
    Inequality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub kind: ResidualKind,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub tol: f64,
    pub satisfied: bool,
    pub pair: String,
}

impl ResidualReport {
    fn identity(lhs: f64, rhs: f64, tol: f64, pair: impl Into<String>) -> Self {
        let residual = (lhs - rhs).abs();
        ResidualReport {
            kind: ResidualKind::Identity,
            lhs,
            rhs,
            residual,
            tol,
            satisfied: residual <= tol,
            pair: pair.into(),
        }
    }

    fn inequality(lhs: f64, rhs: f64, pair: impl Into<String>) -> Self {
        let residual = rhs - lhs;
        let tol = ABS_TOL + REL_TOL * lhs.abs();
        ResidualReport {
            kind: ResidualKind::Inequality,
            lhs,
            rhs,
            residual,
            tol,
            satisfied: residual >= -tol,
            pair: pair.into(),
        }
    }
}

/// `ℓ(V, Z) = ½(⟨DᵀZD + R + ρV̄⁻¹, V⟩ − ρ ln det V)` given the curvature
/// `DᵀZD + R + ρV̄⁻¹` and `ln det V`.
pub fn entropy_potential(curvature: &Mat, v: &Mat, log_det_v: f64, rho: f64) -> f64 {
    0.5 * (frob(curvature, v) - rho * log_det_v)
}

fn common_grid(theta: &Policy, theta_prime: &Policy) -> Result<()> {
    if theta.grid() != theta_prime.grid() {
        return Err(LqcError::Grid("both policies must live on the same grid".to_string()));
    }
    Ok(())
}

fn describe(theta: &Policy, other: &str) -> String {
    format!("theta ({} intervals) vs {other}", theta.num_intervals())
}

/// Right-hand side of the performance-gap identity, `P^θ` taken from
/// `eval` and `Σ^{θ′}` from `eval_prime`. With `quadratic_v` the `ℓ`
/// difference is replaced by the almost-smoothness bound.
fn gap_integral(
    solver: &Solver,
    theta: &Policy,
    eval: &Evaluation,
    theta_prime: &Policy,
    eval_prime: &Evaluation,
    quadratic_v: bool,
) -> f64 {
    let rho = solver.model().rho();
    let mut total = 0.0;
    for s in solver.samples() {
        let c = solver.coefs(s.coef);
        let i = eval.step_map[s.step];
        let p = &eval.trajectory.p[s.p];
        let sigma = &eval_prime.trajectory.sigma[s.sigma];
        let m = c.curvature(p);
        let dk = c.cross(p) + &m * theta.k(i);
        let delta_k = theta_prime.k(i) - theta.k(i);
        let mut value = frob(&delta_k, &(&dk * sigma)) + 0.5 * frob(&delta_k, &(&m * &delta_k * sigma));
        let (f, fp) = (&eval.v_factors[i], &eval_prime.v_factors[i]);
        if quadratic_v {
            let delta_v = theta_prime.v(i) - theta.v(i);
            let dv = (&m - &f.inv * rho) * 0.5;
            let lam = f.min_eig.min(fp.min_eig);
            value += frob(&dv, &delta_v) + 0.25 * rho * delta_v.norm_squared() / (lam * lam);
        } else {
            value += entropy_potential(&m, theta_prime.v(i), fp.log_det, rho)
                - entropy_potential(&m, theta.v(i), f.log_det, rho);
        }
        total += s.weight * value;
    }
    total
}

/// `C(θ′) − C(θ)` against the performance-gap integral. Residual is the
/// absolute difference; `satisfied` uses `tol`.
pub fn performance_gap_residual(
    model: &LqcModel,
    theta: &Policy,
    theta_prime: &Policy,
    options: &SolverOptions,
    tol: f64,
) -> Result<ResidualReport> {
    common_grid(theta, theta_prime)?;
    let solver = Solver::for_policy(model, theta, options)?;
    let eval = solver.evaluate(theta)?;
    let eval_prime = solver.evaluate(theta_prime)?;
    let lhs = eval_prime.cost.total - eval.cost.total;
    let rhs = gap_integral(&solver, theta, &eval, theta_prime, &eval_prime, false);
    Ok(ResidualReport::identity(lhs, rhs, tol, describe(theta, "theta'")))
}

/// Łojasiewicz bound `C(θ) − C(θ*) ≤ ∫ ½⟨M⁻¹D_K, D_K Σ*⟩ + ρ⁻¹ max(‖V*‖₂², ‖V‖₂²)|D_V|²`.
/// The solver runs on the Riccati grid and scheme; `theta` must live on a
/// grid refined by it.
pub fn lojasiewicz_residual(model: &LqcModel, theta: &Policy, reference: &RiccatiSolution) -> Result<ResidualReport> {
    let solver = Solver::new(model, reference.grid.clone(), reference.scheme)?;
    let star = optimal_policy(model, reference)?;
    let eval = solver.evaluate(theta)?;
    let eval_star = solver.evaluate(&star)?;
    let rho = model.rho();
    let mut rhs = 0.0;
    for s in solver.samples() {
        let c = solver.coefs(s.coef);
        let i = eval.step_map[s.step];
        let p = &eval.trajectory.p[s.p];
        let m = c.curvature(p);
        let dk = c.cross(p) + &m * theta.k(i);
        let dv = (&m - &eval.v_factors[i].inv * rho) * 0.5;
        let m_inv = sym_inverse(&m)?;
        let weight = sym_norm2(star.v(s.step)).powi(2).max(sym_norm2(theta.v(i)).powi(2));
        let value = 0.5 * frob(&(&m_inv * &dk), &(&dk * &eval_star.trajectory.sigma[s.sigma]))
            + weight / rho * dv.norm_squared();
        rhs += s.weight * value;
    }
    let lhs = eval.cost.total - eval_star.cost.total;
    Ok(ResidualReport::inequality(lhs, rhs, describe(theta, "optimum")))
}

/// Almost-smoothness bound on `C(θ′) − C(θ)`.
pub fn smoothness_residual(
    model: &LqcModel,
    theta: &Policy,
    theta_prime: &Policy,
    options: &SolverOptions,
) -> Result<ResidualReport> {
    common_grid(theta, theta_prime)?;
    let solver = Solver::for_policy(model, theta, options)?;
    let eval = solver.evaluate(theta)?;
    let eval_prime = solver.evaluate(theta_prime)?;
    let lhs = eval_prime.cost.total - eval.cost.total;
    let rhs = gap_integral(&solver, theta, &eval, theta_prime, &eval_prime, true);
    Ok(ResidualReport::inequality(lhs, rhs, describe(theta, "theta'")))
}

/// Random piecewise-constant policy: `K` entries uniform in `[−1, 1]`,
/// `V = LᵀL + 0.1 I` with `L` entries uniform in `[−1, 1]`.
pub fn random_policy(grid: &TimeGrid, action_dim: usize, state_dim: usize, seed: u64) -> Result<Policy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("finite bounds");
    let n = grid.num_intervals();
    let mut gains = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    for _ in 0..n {
        gains.push(Mat::from_fn(action_dim, state_dim, |_, _| unit.sample(&mut rng)));
        let l = Mat::from_fn(action_dim, action_dim, |_, _| unit.sample(&mut rng));
        covs.push(l.transpose() * l + Mat::identity(action_dim, action_dim) * 0.1);
    }
    Policy::new(grid.clone(), gains, covs)
}

/// One row of a residual sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCase {
    pub case_id: usize,
    pub seed: u64,
    pub report: ResidualReport,
}

/// CSV with columns `case_id, seed, lhs, rhs, residual, satisfied`.
pub fn residual_sweep_csv(cases: &[SweepCase]) -> String {
    let mut out = String::from("case_id,seed,lhs,rhs,residual,satisfied\n");
    for c in cases {
        let r = &c.report;
        let _ = writeln!(
            out,
            "{},{},{:.17e},{:.17e},{:.17e},{}",
            c.case_id, c.seed, r.lhs, r.rhs, r.residual, r.satisfied
        );
    }
    out
}

/// `K^ε_t = −1/(1 + ε − t)`.
pub fn noncoercive_gain(epsilon: f64, t: f64) -> f64 {
    -1.0 / (1.0 + epsilon - t)
}

/// `C(s·K^ε) = ∫₀¹ (s K_t X_t)² dt` for `X′ = s K X`, `X₀ = 1`, integrated
/// with RK4 on `grid`.
pub fn noncoercive_example_cost(epsilon: f64, scaling: f64, grid: &TimeGrid) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(LqcError::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    if (grid.horizon() - 1.0).abs() > 1e-12 {
        return Err(LqcError::Grid("the example lives on [0, 1]".to_string()));
    }
    let rhs = |t: f64, x: f64| {
        let u = scaling * noncoercive_gain(epsilon, t) * x;
        (u, u * u)
    };
    let (mut x, mut cost) = (1.0, 0.0);
    for i in 0..grid.num_intervals() {
        let (t, h) = (grid.node(i), grid.step(i));
        let (k1, j1) = rhs(t, x);
        let (k2, j2) = rhs(t + 0.5 * h, x + 0.5 * h * k1);
        let (k3, j3) = rhs(t + 0.5 * h, x + 0.5 * h * k2);
        let (k4, j4) = rhs(t + h, x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        cost += h / 6.0 * (j1 + 2.0 * j2 + 2.0 * j3 + j4);
    }
    Ok(cost)
}

/// A perturbation `(K′, V′)` of a policy, one matrix per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDirection {
    pub dk: Vec<Mat>,
    pub dv: Vec<Mat>,
}

impl PolicyDirection {
    pub fn zeros(theta: &Policy) -> Self {
        let (k, d, n) = (theta.action_dim(), theta.state_dim(), theta.num_intervals());
        PolicyDirection {
            dk: vec![Mat::zeros(k, d); n],
            dv: vec![Mat::zeros(k, k); n],
        }
    }

    /// Random direction with entries uniform in `[−1, 1]`, `V` part symmetric.
    pub fn random(theta: &Policy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Uniform::new_inclusive(-1.0, 1.0).expect("finite bounds");
        let (k, d, n) = (theta.action_dim(), theta.state_dim(), theta.num_intervals());
        let mut dir = PolicyDirection { dk: Vec::new(), dv: Vec::new() };
        for _ in 0..n {
            dir.dk.push(Mat::from_fn(k, d, |_, _| unit.sample(&mut rng)));
            let a = Mat::from_fn(k, k, |_, _| unit.sample(&mut rng));
            dir.dv.push((&a + a.transpose()) * 0.5);
        }
        dir
    }

    /// `V′ − V` for a target covariance path, no `K` movement.
    pub fn towards_covariances(theta: &Policy, target: &Policy) -> Result<Self> {
        common_grid(theta, target)?;
        let mut dir = Self::zeros(theta);
        dir.dv = target.covariances().iter().zip(theta.covariances()).map(|(a, b)| a - b).collect();
        Ok(dir)
    }

    fn shift(&self, theta: &Policy, h: f64) -> Result<Policy> {
        if self.dk.len() != theta.num_intervals() || self.dv.len() != theta.num_intervals() {
            return Err(LqcError::InvalidInput("direction and policy differ in length".to_string()));
        }
        let gains = theta.gains().iter().zip(&self.dk).map(|(k, d)| k + d * h).collect();
        let covs = theta.covariances().iter().zip(&self.dv).map(|(v, d)| v + d * h).collect();
        Policy::new(theta.grid().clone(), gains, covs).map_err(|_| LqcError::ShrinkStep)
    }
}

/// Central difference and Gateaux values along a direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdComparison {
    pub finite_difference: f64,
    pub analytic: f64,
    pub relative_error: f64,
}

/// `(C(θ + h·dir) − C(θ − h·dir)) / 2h` against
/// `Σᵢ ⟨∫D_KΣ, K′ᵢ⟩ + ⟨∫D_V, V′ᵢ⟩`.
pub fn fd_gradient_compare(
    model: &LqcModel,
    theta: &Policy,
    direction: &PolicyDirection,
    h: f64,
    options: &SolverOptions,
) -> Result<FdComparison> {
    if !(h > 0.0) {
        return Err(LqcError::InvalidInput(format!("h must be positive, got {h}")));
    }
    let plus = direction.shift(theta, h)?;
    let minus = direction.shift(theta, -h)?;
    let solver = Solver::for_policy(model, theta, options)?;
    let eval = solver.evaluate(theta)?;
    let field = gradient_field(&solver, theta, &eval);
    let analytic: f64 = (0..theta.num_intervals())
        .map(|i| frob(&field.grad_k[i], &direction.dk[i]) + frob(&field.grad_v[i], &direction.dv[i]))
        .sum();
    let fd = (solver.cost(&plus)? - solver.cost(&minus)?) / (2.0 * h);
    let scale = fd.abs().max(analytic.abs());
    let relative_error = if scale == 0.0 { 0.0 } else { (fd - analytic).abs() / scale };
    Ok(FdComparison {
        finite_difference: fd,
        analytic,
        relative_error,
    })
}

/// Relative error between the central difference and the Gateaux formula.
pub fn fd_gradient_check(
    model: &LqcModel,
    theta: &Policy,
    direction: &PolicyDirection,
    h: f64,
    options: &SolverOptions,
) -> Result<f64> {
    Ok(fd_gradient_compare(model, theta, direction, h, options)?.relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonpositive_epsilon_rejected() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        assert!(noncoercive_example_cost(0.0, 1.0, &g).is_err());
        assert!(noncoercive_example_cost(-0.5, 1.0, &g).is_err());
    }

    #[test]
    fn random_policy_is_reproducible_and_inside_theta() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let a = random_policy(&g, 2, 2, 7).unwrap();
        assert_eq!(a, random_policy(&g, 2, 2, 7).unwrap());
        assert_ne!(a, random_policy(&g, 2, 2, 8).unwrap());
        assert!(a.v_eig_range().0 >= 0.1 - 1e-12);
    }

    #[test]
    fn sweep_csv_header() {
        assert_eq!(residual_sweep_csv(&[]), "case_id,seed,lhs,rhs,residual,satisfied\n");
    }
}

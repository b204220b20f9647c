//! Gradient fields and geometry-aware policy gradient iterations.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{LqcError, Result};
use crate::grid::TimeGrid;
use crate::linalg::{eigenvalues, loewner_geq, max_eigenvalue, min_eigenvalue, sym_inverse, sym_pinv, symmetrize, Mat};
use crate::model::LqcModel;
use crate::ode::{Evaluation, MatrixPath, RiccatiSolution, Solver, SolverOptions};
use crate::policy::Policy;

/// Eigenvalue tolerance for the Loewner monotonicity diagnostics.
pub const LOEWNER_TOL: f64 = 1e-8;

/// Gradient information for one policy.
///
/// `dk`, `dv`, `dv_bw` and `vanilla_k` are left-endpoint samples per policy
/// interval; `grad_k` and `grad_v` are the interval integrals `∫ D_K Σ dt`
/// and `∫ D_V dt`, which are the exact partial derivatives of the discrete
/// cost with respect to `Kᵢ` and `Vᵢ` in Euler mode.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub grid: TimeGrid,
    pub dk: Vec<Mat>,
    pub dv: Vec<Mat>,
    pub dv_bw: Vec<Mat>,
    pub vanilla_k: Vec<Mat>,
    pub grad_k: Vec<Mat>,
    pub grad_v: Vec<Mat>,
    /// `Σ^θ` at the policy nodes `t₀ … t_{N−1}`.
    pub sigma_left: Vec<Mat>,
    /// `‖D_K‖_{L²}` over the solver quadrature.
    pub dk_l2: f64,
    /// `‖D_V‖_{L²}` over the solver quadrature.
    pub dv_l2: f64,
    /// `‖BᵀP + ΣDᵀPC + S‖_{L²}`.
    pub cross_l2: f64,
}

/// Extreme eigenvalues of `DᵀPD + R + ρV̄⁻¹` over the quadrature points of
/// an evaluation.
pub fn curvature_extremes(solver: &Solver, eval: &Evaluation) -> (f64, f64) {
    solver
        .samples()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            let ev = eigenvalues(&solver.coefs(s.coef).curvature(&eval.trajectory.p[s.p]));
            (lo.min(ev.min()), hi.max(ev.max()))
        })
}

/// `D_V·V + V·D_V`.
pub fn bures_wasserstein(dv: &Mat, v: &Mat) -> Mat {
    symmetrize(&(dv * v + v * dv))
}

/// Gradient field of `policy` from an evaluation produced by `solver`.
pub fn gradient_field(solver: &Solver, policy: &Policy, eval: &Evaluation) -> GradientField {
    let n = policy.num_intervals();
    let (k, d) = (policy.action_dim(), policy.state_dim());
    let rho = solver.model().rho();
    let traj = &eval.trajectory;
    let mut grad_k = vec![Mat::zeros(k, d); n];
    let mut grad_v = vec![Mat::zeros(k, k); n];
    let (mut dk_sq, mut dv_sq, mut cross_sq) = (0.0, 0.0, 0.0);
    let pointwise = |s: &crate::ode::QuadSample| {
        let c = solver.coefs(s.coef);
        let i = eval.step_map[s.step];
        let p = &traj.p[s.p];
        let m = c.curvature(p);
        let cross = c.cross(p);
        let dk = &cross + &m * policy.k(i);
        let dv = symmetrize(&((&m - &eval.v_factors[i].inv * rho) * 0.5));
        (i, m, cross, dk, dv)
    };
    for s in solver.samples() {
        let (i, _, cross, dk, dv) = pointwise(&s);
        grad_k[i] += &dk * &traj.sigma[s.sigma] * s.weight;
        grad_v[i] += &dv * s.weight;
        dk_sq += s.weight * dk.norm_squared();
        dv_sq += s.weight * dv.norm_squared();
        cross_sq += s.weight * cross.norm_squared();
    }
    let mut dks = Vec::with_capacity(n);
    let mut dvs = Vec::with_capacity(n);
    let mut bws = Vec::with_capacity(n);
    let mut vanilla = Vec::with_capacity(n);
    for s in solver.left_samples(&eval.policy_nodes) {
        let (i, _, _, dk, dv) = pointwise(&s);
        vanilla.push(&dk * &traj.sigma[s.sigma]);
        bws.push(bures_wasserstein(&dv, policy.v(i)));
        dks.push(dk);
        dvs.push(dv);
    }
    let sigma_left = eval.policy_nodes[..n].iter().map(|&j| traj.sigma[j].clone()).collect();
    GradientField {
        grid: policy.grid().clone(),
        dk: dks,
        dv: dvs,
        dv_bw: bws,
        vanilla_k: vanilla,
        grad_k,
        grad_v,
        sigma_left,
        dk_l2: dk_sq.sqrt(),
        dv_l2: dv_sq.sqrt(),
        cross_l2: cross_sq.sqrt(),
    }
}

fn field_from_path(model: &LqcModel, theta: &Policy, p: &MatrixPath) -> Result<GradientField> {
    let solver = Solver::new(model, p.grid.clone(), p.scheme)?;
    let eval = solver.evaluate(theta)?;
    Ok(gradient_field(&solver, theta, &eval))
}

/// `D_K = BᵀP + Σⱼ Dⱼᵀ P (Cⱼ + Dⱼ K) + S + (R + ρV̄⁻¹) K` at the left end of
/// each policy interval.
pub fn gradient_k(model: &LqcModel, theta: &Policy, p: &MatrixPath) -> Result<Vec<Mat>> {
    Ok(field_from_path(model, theta, p)?.dk)
}

/// `D_V = ½(Σⱼ Dⱼᵀ P Dⱼ + R + ρ(V̄⁻¹ − V⁻¹))` at the left end of each
/// policy interval.
pub fn gradient_v(model: &LqcModel, theta: &Policy, p: &MatrixPath) -> Result<Vec<Mat>> {
    Ok(field_from_path(model, theta, p)?.dv)
}

/// Bures–Wasserstein direction per interval.
pub fn bw_gradient_v(dv: &[Mat], theta: &Policy) -> Result<Vec<Mat>> {
    if dv.len() != theta.num_intervals() {
        return Err(LqcError::InvalidInput(format!(
            "{} gradient values for {} intervals",
            dv.len(),
            theta.num_intervals()
        )));
    }
    Ok(dv.iter().zip(theta.covariances()).map(|(g, v)| bures_wasserstein(g, v)).collect())
}

/// Result of one update; `left_theta` is set when some `V` is no longer
/// positive definite.
#[derive(Debug, Clone)]
pub struct NpgStep {
    pub policy: Policy,
    pub left_theta: bool,
}

/// `K ← K − τ D_K`, `V ← V − τ 𝒟^{bw}_V` per interval.
pub fn apply_npg_update(theta: &Policy, dk: &[Mat], dv_bw: &[Mat], tau: f64) -> NpgStep {
    let gains = theta.gains().iter().zip(dk).map(|(k, g)| k - g * tau).collect();
    let covs = theta
        .covariances()
        .iter()
        .zip(dv_bw)
        .map(|(v, g)| symmetrize(&(v - g * tau)))
        .collect();
    finish_step(theta.grid().clone(), gains, covs)
}

fn finish_step(grid: TimeGrid, gains: Vec<Mat>, covs: Vec<Mat>) -> NpgStep {
    let left_theta = covs.iter().any(|v| !(min_eigenvalue(v) > 0.0));
    NpgStep {
        policy: Policy::from_parts_unchecked(grid, gains, covs),
        left_theta,
    }
}

/// One natural policy gradient step with exact ODE gradients.
pub fn npg_step(model: &LqcModel, theta: &Policy, tau: f64, options: &SolverOptions) -> Result<NpgStep> {
    let solver = Solver::for_policy(model, theta, options)?;
    let eval = solver.evaluate(theta)?;
    let g = gradient_field(&solver, theta, &eval);
    Ok(apply_npg_update(theta, &g.dk, &g.dv_bw, tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgVariant {
    Continuous,
    DiscreteScaled,
    DiscreteUnscaled,
}

impl PgVariant {
    pub fn name(self) -> &'static str {
        match self {
            PgVariant::Continuous => "continuous",
            PgVariant::DiscreteScaled => "scaled",
            PgVariant::DiscreteUnscaled => "unscaled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgConfig {
    pub tau: f64,
    pub max_iterations: usize,
    pub variant: PgVariant,
    /// Stop once the suboptimality drops below this value.
    pub stop_epsilon: f64,
    pub diagnostics_on: bool,
    /// Stop once `|Cⁿ − Cⁿ⁻¹| ≤ tol·(1 + |Cⁿ|)`.
    pub stall_tolerance: Option<f64>,
    pub solver: SolverOptions,
    /// Fall back to the Moore–Penrose inverse of a singular `Σ(tᵢ)` in the
    /// scaled update. Diagnostic use only.
    pub pseudo_inverse: bool,
}

impl PgConfig {
    pub fn new(tau: f64, variant: PgVariant) -> Self {
        Self {
            tau,
            max_iterations: 1000,
            variant,
            stop_epsilon: 1e-2,
            diagnostics_on: false,
            stall_tolerance: None,
            solver: SolverOptions::default(),
            pseudo_inverse: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(LqcError::InvalidInput(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.stop_epsilon > 0.0) {
            return Err(LqcError::InvalidInput(format!(
                "stop_epsilon must be positive, got {}",
                self.stop_epsilon
            )));
        }
        Ok(())
    }
}

/// Optimum used to measure suboptimality, with optional Riccati data for
/// the diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub optimum: f64,
    pub p_star: Option<MatrixPath>,
    pub delta_tilde: Option<f64>,
}

impl Reference {
    pub fn from_riccati(r: &RiccatiSolution) -> Self {
        Self {
            optimum: r.optimal_cost,
            p_star: Some(MatrixPath {
                grid: r.grid.clone(),
                scheme: r.scheme,
                values: r.p_star.clone(),
            }),
            delta_tilde: Some(r.delta_tilde),
        }
    }

    pub fn value(optimum: f64) -> Self {
        Self {
            optimum,
            p_star: None,
            delta_tilde: None,
        }
    }
}

/// Bound checks for one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub iteration: usize,
    pub cost: f64,
    pub k_l2: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `P^{θⁿ⁻¹} ⪰ P^{θⁿ}`; `None` at the first iterate.
    pub p_monotone: Option<bool>,
    /// `P^{θⁿ} ⪰ P*`; `None` without Riccati data on the solver grid.
    pub p_above_star: Option<bool>,
    /// `C(θⁿ) ≤ C(θⁿ⁻¹) + tol`; `None` at the first iterate.
    pub cost_monotone: Option<bool>,
    pub v_envelope: (f64, f64),
    pub v_in_envelope: bool,
    /// `‖K⁰‖_{L²} + supₙ ‖BᵀPⁿ + DᵀPⁿC + S‖_{L²} / δ̃`.
    pub k_bound: f64,
    pub k_within_bound: bool,
    /// Largest eigenvalue of `DᵀP^{θ⁰}D + R + ρV̄⁻¹`.
    pub lambda_bar0: f64,
    pub delta_tilde: Option<f64>,
}

impl DiagnosticsRecord {
    /// `true` when every available check passed.
    pub fn all_ok(&self) -> bool {
        self.p_monotone.unwrap_or(true)
            && self.p_above_star.unwrap_or(true)
            && self.cost_monotone.unwrap_or(true)
            && self.v_in_envelope
            && self.k_within_bound
    }

    /// Both Loewner checks passed (or were not applicable).
    pub fn loewner_ok(&self) -> bool {
        self.p_monotone.unwrap_or(true) && self.p_above_star.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub subopt: f64,
    pub grad_k_l2: f64,
    pub grad_v_l2: f64,
    pub min_eig_v: f64,
    pub max_eig_v: f64,
    pub min_eig_sigma: f64,
    pub diagnostics: Option<DiagnosticsRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ReachedEpsilon,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub variant: PgVariant,
    pub tau: f64,
    pub grid: TimeGrid,
    pub reference_optimum: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Option<Termination>,
    pub reached_epsilon: bool,
    /// First iteration with suboptimality below `stop_epsilon`.
    pub n_epsilon: Option<usize>,
    pub final_policy: Policy,
    /// Iteration whose update produced a covariance outside the PD cone.
    pub left_theta_at: Option<usize>,
}

impl RunRecord {
    /// Number of updates applied.
    pub fn iterations_run(&self) -> usize {
        self.iterations.len().saturating_sub(1)
    }

    pub fn costs(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.cost).collect()
    }

    pub fn subopts(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.subopt).collect()
    }

    /// Count against a different optimum.
    pub fn iterations_to(&self, epsilon: f64, optimum: f64) -> Option<usize> {
        iterations_to_tolerance(&self.costs(), epsilon, optimum)
    }

    /// `true` when diagnostics were recorded and every check passed.
    pub fn diagnostics_ok(&self) -> bool {
        self.iterations
            .iter()
            .all(|r| r.diagnostics.as_ref().is_some_and(DiagnosticsRecord::all_ok))
    }

    /// Columns `iter, cost, subopt, gradK_l2, gradV_l2, minEigV, maxEigV,
    /// minEigSigma, p_monotone_flag`; the flag is `NA` when not checked.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,cost,subopt,gradK_l2,gradV_l2,minEigV,maxEigV,minEigSigma,p_monotone_flag\n");
        for r in &self.iterations {
            let flag = match r.diagnostics.as_ref().map(DiagnosticsRecord::loewner_ok) {
                Some(true) => "1",
                Some(false) => "0",
                None => "NA",
            };
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                r.iteration,
                r.cost,
                r.subopt,
                r.grad_k_l2,
                r.grad_v_l2,
                r.min_eig_v,
                r.max_eig_v,
                r.min_eig_sigma,
                flag
            );
        }
        out
    }
}

/// Smallest `n` with `costs[n] − optimum < epsilon`.
pub fn iterations_to_tolerance(costs: &[f64], epsilon: f64, optimum: f64) -> Option<usize> {
    costs.iter().position(|&c| c - optimum < epsilon)
}

/// Least-squares line through `(n, ln yₙ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Fit `ln y` against the index. Needs two or more positive values; stops
/// at the first non-positive one.
pub fn log_linear_fit(values: &[f64]) -> Option<LogLinearFit> {
    let ys: Vec<f64> = values.iter().take_while(|&&y| y > 0.0).map(|y| y.ln()).collect();
    let n = ys.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = (nf - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let (dx, dy) = (i as f64 - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LogLinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        points: n,
    })
}

struct Iterate {
    policy: Policy,
    eval: Evaluation,
    grad: GradientField,
}

fn evaluate_iterate(solver: &Solver, policy: Policy) -> Result<Iterate> {
    let eval = solver.evaluate(&policy)?;
    if !eval.cost.total.is_finite() {
        return Err(LqcError::NonFinite { what: "cost", t: 0.0 });
    }
    let grad = gradient_field(solver, &policy, &eval);
    Ok(Iterate { policy, eval, grad })
}

fn discrete_update(it: &Iterate, config: &PgConfig) -> Result<NpgStep> {
    let policy = &it.policy;
    let grid = policy.grid();
    let n = policy.num_intervals();
    let mut gains = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    for i in 0..n {
        let scale = match config.variant {
            PgVariant::DiscreteScaled => config.tau / grid.step(i),
            _ => config.tau,
        };
        let sigma = &it.grad.sigma_left[i];
        let sigma_inv = match sym_inverse(sigma) {
            Ok(inv) => inv,
            Err(_) if config.pseudo_inverse => {
                log::warn!("Sigma(t_{i}) is singular; using its pseudo-inverse");
                sym_pinv(sigma)
            }
            Err(_) => {
                return Err(LqcError::Singular {
                    what: "Sigma",
                    t: grid.node(i),
                    min_eig: min_eigenvalue(sigma),
                })
            }
        };
        gains.push(policy.k(i) - &it.grad.grad_k[i] * &sigma_inv * scale);
        let v = policy.v(i);
        covs.push(symmetrize(&(v - bures_wasserstein(&it.grad.grad_v[i], v) * scale)));
    }
    Ok(finish_step(grid.clone(), gains, covs))
}

fn factor_range(eval: &Evaluation) -> (f64, f64) {
    eval.v_factors
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f.min_eig), hi.max(f.max_eig)))
}

fn psd_extremes(ms: &[Mat]) -> (f64, f64) {
    ms.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
        let ev = eigenvalues(m);
        (lo.min(ev.min()), hi.max(ev.max()))
    })
}

struct DiagState {
    lambda_bar0: f64,
    envelope: (f64, f64),
    k0_l2: f64,
    sup_cross: f64,
    /// Lower eigenvalue bound of the curvature along the iterates: `δ̃` when
    /// known, otherwise the running minimum.
    curvature_floor: f64,
    delta_tilde: Option<f64>,
}

fn diagnose(
    n: usize,
    it: &Iterate,
    prev: Option<&Iterate>,
    state: &mut DiagState,
    reference: &Reference,
    solver: &Solver,
) -> DiagnosticsRecord {
    let traj = &it.eval.trajectory;
    let (v_min, v_max) = factor_range(&it.eval);
    let (sigma_min, sigma_max) = psd_extremes(&traj.sigma);
    let p_monotone = prev.map(|q| {
        q.eval
            .trajectory
            .p
            .iter()
            .zip(&traj.p)
            .all(|(a, b)| loewner_geq(a, b, LOEWNER_TOL))
    });
    let p_above_star = reference
        .p_star
        .as_ref()
        .filter(|ps| &ps.grid == solver.grid() && ps.scheme == solver.scheme())
        .map(|ps| traj.p.iter().zip(&ps.values).all(|(a, b)| loewner_geq(a, b, LOEWNER_TOL)));
    let cost = it.eval.cost.total;
    let cost_monotone = prev.map(|q| cost <= q.eval.cost.total + 1e-12 * (1.0 + cost.abs()));
    let (lo, hi) = state.envelope;
    let tol = LOEWNER_TOL;
    state.sup_cross = state.sup_cross.max(it.grad.cross_l2);
    if state.delta_tilde.is_none() {
        state.curvature_floor = state.curvature_floor.min(curvature_extremes(solver, &it.eval).0);
    }
    let k_bound = state.k0_l2 + state.sup_cross / state.curvature_floor;
    let k_l2 = it.policy.k_l2_norm();
    DiagnosticsRecord {
        iteration: n,
        cost,
        k_l2,
        v_min,
        v_max,
        sigma_min,
        sigma_max,
        p_monotone,
        p_above_star,
        cost_monotone,
        v_envelope: (lo, hi),
        v_in_envelope: v_min >= lo - tol && v_max <= hi + tol,
        k_bound,
        k_within_bound: k_l2 <= k_bound + tol,
        lambda_bar0: state.lambda_bar0,
        delta_tilde: state.delta_tilde,
    }
}

/// Run any variant from `theta0`.
pub fn run_pg(model: &LqcModel, theta0: &Policy, config: &PgConfig, reference: &Reference) -> Result<RunRecord> {
    config.validate()?;
    let solver = Solver::for_policy(model, theta0, &config.solver)?;
    let rho = model.rho();
    let mut current = evaluate_iterate(&solver, theta0.clone())?;
    let (v0_min, v0_max) = theta0.v_eig_range();
    let lambda_bar0 = curvature_extremes(&solver, &current.eval).1;
    let hi = match reference.delta_tilde {
        Some(dt) if dt > 0.0 => v0_max.max(rho / dt),
        _ => f64::INFINITY,
    };
    let mut state = DiagState {
        lambda_bar0,
        envelope: (v0_min.min(rho / lambda_bar0), hi),
        k0_l2: theta0.k_l2_norm(),
        sup_cross: 0.0,
        curvature_floor: reference.delta_tilde.unwrap_or(f64::INFINITY),
        delta_tilde: reference.delta_tilde,
    };
    let mut record = RunRecord {
        variant: config.variant,
        tau: config.tau,
        grid: theta0.grid().clone(),
        reference_optimum: reference.optimum,
        iterations: Vec::new(),
        termination: None,
        reached_epsilon: false,
        n_epsilon: None,
        final_policy: theta0.clone(),
        left_theta_at: None,
    };
    let mut prev: Option<Iterate> = None;
    let mut n = 0;
    loop {
        let cost = current.eval.cost.total;
        let subopt = cost - reference.optimum;
        let diagnostics = config
            .diagnostics_on
            .then(|| diagnose(n, &current, prev.as_ref(), &mut state, reference, &solver));
        let (v_min, v_max) = factor_range(&current.eval);
        record.iterations.push(IterationRecord {
            iteration: n,
            cost,
            subopt,
            grad_k_l2: current.grad.dk_l2,
            grad_v_l2: current.grad.dv_l2,
            min_eig_v: v_min,
            max_eig_v: v_max,
            min_eig_sigma: current
                .eval
                .trajectory
                .sigma
                .iter()
                .map(min_eigenvalue)
                .fold(f64::INFINITY, f64::min),
            diagnostics,
        });
        record.final_policy = current.policy.clone();
        if subopt < config.stop_epsilon {
            record.termination = Some(Termination::ReachedEpsilon);
            record.reached_epsilon = true;
            record.n_epsilon = Some(n);
            break;
        }
        if n >= config.max_iterations {
            record.termination = Some(Termination::MaxIterations);
            break;
        }
        if let (Some(tol), Some(p)) = (config.stall_tolerance, prev.as_ref()) {
            if (p.eval.cost.total - cost).abs() <= tol * (1.0 + cost.abs()) {
                record.termination = Some(Termination::Stalled);
                break;
            }
        }
        let step = match config.variant {
            PgVariant::Continuous => Ok(apply_npg_update(
                &current.policy,
                &current.grad.dk,
                &current.grad.dv_bw,
                config.tau,
            )),
            _ => discrete_update(&current, config),
        };
        let step = match step {
            Ok(s) => s,
            Err(e) => return Err(abort(n, e.to_string(), record)),
        };
        if step.left_theta {
            record.left_theta_at = Some(n + 1);
            return Err(abort(
                n + 1,
                "a covariance left the positive definite cone".to_string(),
                record,
            ));
        }
        let next = match evaluate_iterate(&solver, step.policy) {
            Ok(it) => it,
            Err(e) => return Err(abort(n + 1, e.to_string(), record)),
        };
        prev = Some(std::mem::replace(&mut current, next));
        n += 1;
    }
    record.n_epsilon = iterations_to_tolerance(&record.costs(), config.stop_epsilon, reference.optimum);
    Ok(record)
}

fn abort(iteration: usize, reason: String, record: RunRecord) -> LqcError {
    LqcError::PgAborted {
        iteration,
        reason,
        record: Box::new(record),
    }
}

/// Continuous-time iteration `K ← K − τD_K`, `V ← V − τ(D_V V + V D_V)`.
pub fn run_continuous_pg(
    model: &LqcModel,
    theta0: &Policy,
    config: &PgConfig,
    reference: &Reference,
) -> Result<RunRecord> {
    let mut cfg = config.clone();
    cfg.variant = PgVariant::Continuous;
    run_pg(model, theta0, &cfg, reference)
}

/// Mesh-parameterised iteration with interval gradients, scaled or unscaled.
pub fn run_discrete_pg(
    model: &LqcModel,
    theta0: &Policy,
    config: &PgConfig,
    reference: &Reference,
) -> Result<RunRecord> {
    if config.variant == PgVariant::Continuous {
        return Err(LqcError::InvalidInput(
            "run_discrete_pg needs the scaled or unscaled variant".to_string(),
        ));
    }
    run_pg(model, theta0, config, reference)
}

/// How `V` is projected onto a coarser grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VProjection {
    #[default]
    Average,
    LeftEndpoint,
}

/// Project a piecewise-constant policy onto `target`: `K` by interval
/// averages, `V` by averages or left-endpoint sampling.
pub fn project_policy(theta: &Policy, target: &TimeGrid, mode: VProjection) -> Result<Policy> {
    let src = theta.grid();
    if (src.horizon() - target.horizon()).abs() > 1e-12 * src.horizon().max(1.0) {
        return Err(LqcError::Grid("target grid has a different horizon".to_string()));
    }
    let (k, d) = (theta.action_dim(), theta.state_dim());
    let mut gains = Vec::with_capacity(target.num_intervals());
    let mut covs = Vec::with_capacity(target.num_intervals());
    for i in 0..target.num_intervals() {
        let (a, b) = (target.node(i), target.node(i + 1));
        let mut kk = Mat::zeros(k, d);
        let mut vv = Mat::zeros(k, k);
        let first = src.interval_index(a);
        let mut s = first;
        while s < src.num_intervals() && src.node(s) < b {
            let overlap = b.min(src.node(s + 1)) - a.max(src.node(s));
            if overlap > 0.0 {
                kk += theta.k(s) * overlap;
                vv += theta.v(s) * overlap;
            }
            s += 1;
        }
        let len = b - a;
        gains.push(kk / len);
        covs.push(match mode {
            VProjection::Average => vv / len,
            VProjection::LeftEndpoint => theta.v(first).clone(),
        });
    }
    Policy::new(target.clone(), gains, covs)
}

const GAUSS_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GAUSS_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Project time-continuous `K(t)`, `V(t)` onto `target` with 5-point
/// Gauss–Legendre interval averages.
pub fn project_functions(
    k: impl Fn(f64) -> Mat,
    v: impl Fn(f64) -> Mat,
    target: &TimeGrid,
    mode: VProjection,
) -> Result<Policy> {
    let avg = |f: &dyn Fn(f64) -> Mat, a: f64, b: f64| {
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        let mut acc = f(c) * 0.0;
        for (x, w) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
            acc += f(c + h * x) * (0.5 * w);
        }
        acc
    };
    let mut gains = Vec::new();
    let mut covs = Vec::new();
    for i in 0..target.num_intervals() {
        let (a, b) = (target.node(i), target.node(i + 1));
        gains.push(avg(&k, a, b));
        covs.push(match mode {
            VProjection::Average => avg(&v, a, b),
            VProjection::LeftEndpoint => v(a),
        });
    }
    Policy::new(target.clone(), gains, covs)
}

/// How the mesh-restricted optimum `C*_π` is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimumEstimate {
    /// Mean cost over the last `tail` of `iterations` scaled iterations.
    TailAverage { iterations: usize, tail: usize },
    /// Lowest cost of a scaled run taken to stagnation. `tau` defaults to
    /// `1/(2λ̄₀)` at the starting policy.
    Converged {
        max_iterations: usize,
        stall_tolerance: f64,
        tau: Option<f64>,
    },
}

impl OptimumEstimate {
    /// Mean of iterations 951..=1000.
    pub const TAIL_1000: OptimumEstimate = OptimumEstimate::TailAverage { iterations: 1000, tail: 50 };
    pub const CONVERGED: OptimumEstimate = OptimumEstimate::Converged {
        max_iterations: 20_000,
        stall_tolerance: 1e-13,
        tau: None,
    };
}

/// Estimate `C*_π` for policies on `theta0`'s grid with the scaled iteration.
pub fn estimate_mesh_optimum(
    model: &LqcModel,
    theta0: &Policy,
    scaled: &PgConfig,
    estimate: OptimumEstimate,
) -> Result<f64> {
    let mut cfg = scaled.clone();
    cfg.variant = PgVariant::DiscreteScaled;
    cfg.diagnostics_on = false;
    cfg.stop_epsilon = f64::MIN_POSITIVE;
    let reference = Reference::value(f64::NEG_INFINITY);
    match estimate {
        OptimumEstimate::TailAverage { iterations, tail } => {
            if tail == 0 || tail > iterations {
                return Err(LqcError::InvalidInput("tail must be in 1..=iterations".to_string()));
            }
            cfg.max_iterations = iterations;
            cfg.stall_tolerance = None;
            let rec = run_pg(model, theta0, &cfg, &reference)?;
            let costs = rec.costs();
            Ok(costs[costs.len() - tail..].iter().sum::<f64>() / tail as f64)
        }
        OptimumEstimate::Converged {
            max_iterations,
            stall_tolerance,
            tau,
        } => {
            cfg.max_iterations = max_iterations;
            cfg.stall_tolerance = Some(stall_tolerance);
            cfg.tau = match tau {
                Some(t) => t,
                None => 0.5 / lambda_bar(model, theta0, &cfg.solver)?,
            };
            let rec = run_pg(model, theta0, &cfg, &reference)?;
            if rec.termination == Some(Termination::MaxIterations) {
                log::warn!("C*_pi estimate did not stagnate within {max_iterations} iterations");
            }
            Ok(rec.costs().into_iter().fold(f64::INFINITY, f64::min))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshSweepConfig {
    pub scaled: PgConfig,
    pub unscaled: PgConfig,
    pub epsilon: f64,
    pub optimum: OptimumEstimate,
    pub projection: VProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshSweepRow {
    pub intervals: usize,
    pub mesh: f64,
    pub c_star_pi: f64,
    pub n_scaled: Option<usize>,
    pub n_unscaled: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshSweepTable {
    pub epsilon: f64,
    pub n_continuous: Option<usize>,
    pub rows: Vec<MeshSweepRow>,
}

impl MeshSweepTable {
    /// Columns `m, mesh, c_star_pi, n_scaled, n_unscaled, n_continuous`;
    /// counts that were not reached are written as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |n: Option<usize>| n.map_or("NA".to_string(), |v| v.to_string());
        let mut out = String::from("m,mesh,c_star_pi,n_scaled,n_unscaled,n_continuous\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{},{},{}",
                r.intervals,
                r.mesh,
                r.c_star_pi,
                fmt(r.n_scaled),
                fmt(r.n_unscaled),
                fmt(self.n_continuous)
            );
        }
        out
    }
}

/// For each mesh, project `theta0`, estimate `C*_π`, and count iterations to
/// `epsilon` for the scaled and unscaled variants. Meshes run in parallel;
/// rows keep the order of `meshes`.
pub fn mesh_sweep(
    model: &LqcModel,
    theta0: &Policy,
    meshes: &[TimeGrid],
    config: &MeshSweepConfig,
    n_continuous: Option<usize>,
) -> Result<MeshSweepTable> {
    let rows = meshes
        .par_iter()
        .map(|mesh| -> Result<MeshSweepRow> {
            let start = project_policy(theta0, mesh, config.projection)?;
            let c_star = estimate_mesh_optimum(model, &start, &config.scaled, config.optimum)?;
            let reference = Reference::value(c_star);
            let count = |base: &PgConfig, variant| -> Result<Option<usize>> {
                let mut cfg = base.clone();
                cfg.variant = variant;
                cfg.stop_epsilon = config.epsilon;
                cfg.stall_tolerance = None;
                Ok(run_pg(model, &start, &cfg, &reference)?.n_epsilon)
            };
            Ok(MeshSweepRow {
                intervals: mesh.num_intervals(),
                mesh: mesh.mesh(),
                c_star_pi: c_star,
                n_scaled: count(&config.scaled, PgVariant::DiscreteScaled)?,
                n_unscaled: count(&config.unscaled, PgVariant::DiscreteUnscaled)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeshSweepTable {
        epsilon: config.epsilon,
        n_continuous,
        rows,
    })
}

/// Largest eigenvalue of `DᵀPD + R + ρV̄⁻¹` along the policy's own `P^θ`.
pub fn lambda_bar(model: &LqcModel, theta: &Policy, options: &SolverOptions) -> Result<f64> {
    let solver = Solver::for_policy(model, theta, options)?;
    let eval = solver.evaluate(theta)?;
    Ok(curvature_extremes(&solver, &eval).1)
}

/// Largest eigenvalue of the curvature at a single matrix `P`, sampled at `t`.
pub fn curvature_max_at(model: &LqcModel, t: f64, p: &Mat) -> Result<f64> {
    Ok(max_eigenvalue(&model.coefs(t)?.curvature(p)))
}

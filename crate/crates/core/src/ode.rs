//! Backward and forward matrix ODE solves and exact cost evaluation.
//!
//! A [`Solver`] integrates on a fine grid that refines the policy grid. In
//! Euler mode the backward step from `t_{j+1}` to `t_j` uses coefficients at
//! `t_j` and the value at `t_{j+1}` (its anchor), the forward step is
//! `Σ_{j+1} = Σ_j + h F(t_j, Σ_j)`, and running integrals are left Riemann
//! sums pairing `P_{j+1}` with `Σ_j`. With these choices the two cost
//! representations agree to roundoff and the gradient formulas are the exact
//! gradients of the discrete cost. RK4 mode is the higher-order cross-check.

use std::fmt::Write as _;

use crate::error::{LqcError, Result};
use crate::grid::TimeGrid;
use crate::linalg::{eigenvalues, log_det_pd, max_eigenvalue, min_eigenvalue, sym_inverse, symmetrize, Mat, EIG_FLOOR};
use crate::model::{Coefs, LqcModel};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Euler,
    Rk4,
}

/// How the solver grid is derived from a policy grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    /// Split every policy interval into this many equal steps.
    Refine(usize),
    /// Use this grid; it must refine the policy grid.
    Grid(TimeGrid),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub scheme: Scheme,
    pub resolution: Resolution,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::Euler,
            resolution: Resolution::Refine(8),
        }
    }
}

impl SolverOptions {
    pub fn new(scheme: Scheme, resolution: Resolution) -> Self {
        Self { scheme, resolution }
    }

    /// Solve directly on the policy grid.
    pub fn on_policy_grid(scheme: Scheme) -> Self {
        Self::new(scheme, Resolution::Refine(1))
    }

    /// Solve on a fixed grid regardless of the policy grid.
    pub fn on_grid(scheme: Scheme, grid: TimeGrid) -> Self {
        Self::new(scheme, Resolution::Grid(grid))
    }

    pub fn solver_grid(&self, policy_grid: &TimeGrid) -> Result<TimeGrid> {
        match &self.resolution {
            Resolution::Refine(r) => policy_grid.refine(*r),
            Resolution::Grid(g) => {
                if !g.refines(policy_grid) {
                    return Err(LqcError::Grid(
                        "solver grid does not refine the policy grid".to_string(),
                    ));
                }
                Ok(g.clone())
            }
        }
    }
}

/// A matrix-valued trajectory at the nodes of a solver grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub values: Vec<Mat>,
}

/// A scalar trajectory at the nodes of a solver grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarPath {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub values: Vec<f64>,
}

/// `P^θ`, `Σ^θ` and `φ^θ` at the solver nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySolution {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub p: Vec<Mat>,
    pub sigma: Vec<Mat>,
    pub phi: Vec<f64>,
}

impl TrajectorySolution {
    /// One row per node: `t`, row-major `P`, row-major `Sigma`, `phi`.
    pub fn to_csv(&self) -> String {
        let d = self.p[0].nrows();
        let mut out = String::from("t");
        for name in ["P", "Sigma"] {
            for r in 0..d {
                for c in 0..d {
                    let _ = write!(out, ",{name}_{r}{c}");
                }
            }
        }
        out.push_str(",phi\n");
        for (j, &t) in self.grid.nodes().iter().enumerate() {
            let _ = write!(out, "{t:.17e}");
            for m in [&self.p[j], &self.sigma[j]] {
                for r in 0..d {
                    for c in 0..d {
                        let _ = write!(out, ",{:.17e}", m[(r, c)]);
                    }
                }
            }
            let _ = writeln!(out, ",{:.17e}", self.phi[j]);
        }
        out
    }
}

/// Cost of a policy. `total` is `½tr(P₀Σ₀) + φ₀`; the components come from
/// integrating against `Σ^θ`, and `representation_gap` is the absolute
/// difference between the two routes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub total: f64,
    pub quadratic_terminal: f64,
    pub running_quadratic: f64,
    pub entropy_term: f64,
    pub representation_gap: f64,
}

impl CostBreakdown {
    /// Sum of the integral-route components.
    pub fn integral_route(&self) -> f64 {
        self.quadratic_terminal + self.running_quadratic + self.entropy_term
    }
}

/// Riccati solution together with the optimal policy on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub p_star: Vec<Mat>,
    pub phi_star: Vec<f64>,
    pub gains: Vec<Mat>,
    pub covariances: Vec<Mat>,
    pub strongly_regular: bool,
    /// Smallest eigenvalue of `DᵀP*D + R + ρV̄⁻¹` over the solver's sample points.
    pub delta_tilde: f64,
    /// Largest eigenvalue of the same matrix.
    pub lambda_max: f64,
    pub optimal_cost: f64,
}

/// One point of the running-integral quadrature: coefficients at node
/// `coef`, `P` at node `p`, `Σ` at node `sigma`, with the policy of fine
/// step `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadSample {
    pub step: usize,
    pub coef: usize,
    pub p: usize,
    pub sigma: usize,
    pub weight: f64,
}

/// Everything computed for one policy evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub trajectory: TrajectorySolution,
    pub cost: CostBreakdown,
    /// Policy interval of each fine step.
    pub step_map: Vec<usize>,
    /// Fine node index of each policy node.
    pub policy_nodes: Vec<usize>,
    /// Factorisation of `V` per policy interval.
    pub v_factors: Vec<CovFactors>,
}

/// Inverse, log-determinant and extreme eigenvalues of one policy covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovFactors {
    pub inv: Mat,
    pub log_det: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

/// Factor every covariance of `policy`: Cholesky for the inverse and the
/// log-determinant, eigenvalues for the extremes.
pub fn factor_covariances(policy: &Policy) -> Result<Vec<CovFactors>> {
    policy
        .covariances()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ev = eigenvalues(v);
            let (min_eig, max_eig) = (ev.min(), ev.max());
            let singular = || LqcError::Singular {
                what: "V",
                t: policy.grid().node(i),
                min_eig,
            };
            if !(min_eig > EIG_FLOOR) {
                return Err(singular());
            }
            let chol = v.clone().cholesky().ok_or_else(singular)?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            Ok(CovFactors {
                inv: symmetrize(&chol.inverse()),
                log_det,
                min_eig,
                max_eig,
            })
        })
        .collect()
}

/// Coefficient cache for one model on one fine grid.
#[derive(Debug, Clone)]
pub struct Solver {
    model: LqcModel,
    grid: TimeGrid,
    scheme: Scheme,
    nodes: Vec<Coefs>,
    mids: Vec<Coefs>,
}

fn check_finite(m: &Mat, what: &'static str, t: f64) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LqcError::NonFinite { what, t })
    }
}

impl Solver {
    pub fn new(model: &LqcModel, grid: TimeGrid, scheme: Scheme) -> Result<Self> {
        if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
            return Err(LqcError::Grid(format!(
                "grid ends at {} but the horizon is {}",
                grid.horizon(),
                model.horizon()
            )));
        }
        let nodes = grid
            .nodes()
            .iter()
            .map(|&t| model.coefs(t))
            .collect::<Result<Vec<_>>>()?;
        let mids = match scheme {
            Scheme::Euler => Vec::new(),
            Scheme::Rk4 => (0..grid.num_intervals())
                .map(|j| model.coefs(grid.node(j) + 0.5 * grid.step(j)))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            model: model.clone(),
            grid,
            scheme,
            nodes,
            mids,
        })
    }

    /// Solver for `policy` with the grid chosen by `options`.
    pub fn for_policy(model: &LqcModel, policy: &Policy, options: &SolverOptions) -> Result<Self> {
        Self::new(model, options.solver_grid(policy.grid())?, options.scheme)
    }

    pub fn model(&self) -> &LqcModel {
        &self.model
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
    /// Coefficients sampled at fine node `j`.
    pub fn coefs(&self, j: usize) -> &Coefs {
        &self.nodes[j]
    }

    /// Policy interval of every fine step.
    pub fn step_map(&self, policy: &Policy) -> Result<Vec<usize>> {
        let (k, d) = (self.model.action_dim(), self.model.state_dim());
        if policy.action_dim() != k || policy.state_dim() != d {
            return Err(crate::error::dim_err(
                "policy gain",
                (k, d),
                (policy.action_dim(), policy.state_dim()),
            ));
        }
        if policy.grid() == &self.grid {
            return Ok((0..self.grid.num_intervals()).collect());
        }
        self.grid.interval_map(policy.grid())
    }

    /// Fine node index of every policy node.
    pub fn policy_nodes(&self, policy: &Policy) -> Result<Vec<usize>> {
        policy
            .grid()
            .nodes()
            .iter()
            .map(|&t| {
                self.grid
                    .find_node(t)
                    .ok_or_else(|| LqcError::Grid(format!("policy node {t} is not a solver node")))
            })
            .collect()
    }

    /// Quadrature points for running integrals.
    pub fn samples(&self) -> Vec<QuadSample> {
        let n = self.grid.num_intervals();
        match self.scheme {
            Scheme::Euler => (0..n)
                .map(|j| QuadSample {
                    step: j,
                    coef: j,
                    p: j + 1,
                    sigma: j,
                    weight: self.grid.step(j),
                })
                .collect(),
            Scheme::Rk4 => (0..n)
                .flat_map(|j| {
                    let w = 0.5 * self.grid.step(j);
                    [
                        QuadSample { step: j, coef: j, p: j, sigma: j, weight: w },
                        QuadSample { step: j, coef: j + 1, p: j + 1, sigma: j + 1, weight: w },
                    ]
                })
                .collect(),
        }
    }

    /// Samples whose fine step is the first step of each policy interval,
    /// i.e. the left-endpoint samples.
    pub fn left_samples(&self, policy_nodes: &[usize]) -> Vec<QuadSample> {
        let all = self.samples();
        let per_step = if self.scheme == Scheme::Euler { 1 } else { 2 };
        policy_nodes[..policy_nodes.len() - 1]
            .iter()
            .map(|&j| all[j * per_step])
            .collect()
    }

    /// Backward solve of the policy Lyapunov equation, `P_T = G`.
    pub fn lyapunov(&self, policy: &Policy, map: &[usize]) -> Result<Vec<Mat>> {
        let n = self.grid.num_intervals();
        let mut p = vec![Mat::zeros(0, 0); n + 1];
        p[n] = self.model.terminal_cost().clone();
        for j in (0..n).rev() {
            let h = self.grid.step(j);
            let k = policy.k(map[j]);
            let next = &p[j + 1];
            let val = match self.scheme {
                Scheme::Euler => next + self.nodes[j].lyapunov_rhs(next, k) * h,
                Scheme::Rk4 => {
                    let (c1, cm, c0) = (&self.nodes[j + 1], &self.mids[j], &self.nodes[j]);
                    let k1 = c1.lyapunov_rhs(next, k);
                    let k2 = cm.lyapunov_rhs(&(next + &k1 * (0.5 * h)), k);
                    let k3 = cm.lyapunov_rhs(&(next + &k2 * (0.5 * h)), k);
                    let k4 = c0.lyapunov_rhs(&(next + &k3 * h), k);
                    next + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
                }
            };
            let val = symmetrize(&val);
            check_finite(&val, "P", self.grid.node(j))?;
            p[j] = val;
        }
        Ok(p)
    }

    /// Forward solve of the second-moment equation from `Σ₀`.
    pub fn covariance(&self, policy: &Policy, map: &[usize]) -> Result<Vec<Mat>> {
        let n = self.grid.num_intervals();
        let mut s = Vec::with_capacity(n + 1);
        s.push(self.model.sigma0().clone());
        for j in 0..n {
            let h = self.grid.step(j);
            let (k, v) = (policy.k(map[j]), policy.v(map[j]));
            let cur = &s[j];
            let val = match self.scheme {
                Scheme::Euler => cur + self.nodes[j].covariance_rhs(cur, k, v) * h,
                Scheme::Rk4 => {
                    let (c0, cm, c1) = (&self.nodes[j], &self.mids[j], &self.nodes[j + 1]);
                    let k1 = c0.covariance_rhs(cur, k, v);
                    let k2 = cm.covariance_rhs(&(cur + &k1 * (0.5 * h)), k, v);
                    let k3 = cm.covariance_rhs(&(cur + &k2 * (0.5 * h)), k, v);
                    let k4 = c1.covariance_rhs(&(cur + &k3 * h), k, v);
                    cur + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
                }
            };
            let val = symmetrize(&val);
            let t = self.grid.node(j + 1);
            check_finite(&val, "Sigma", t)?;
            let min = min_eigenvalue(&val);
            let tol = 1e-10 * val.amax().max(1.0);
            if min < -tol {
                return Err(LqcError::CovarianceLostPsd { t, min_eig: min });
            }
            s.push(val);
        }
        Ok(s)
    }

    /// Backward solve for `φ`, `φ_T = 0`, given `P` at the nodes. In RK4 mode
    /// `deriv(step, node)` must return the backward drift of `P` at `node`
    /// under the policy of `step`.
    fn phi_with(
        &self,
        policy: &Policy,
        map: &[usize],
        p: &[Mat],
        deriv: &dyn Fn(usize, usize) -> Mat,
        factors: &[CovFactors],
    ) -> Result<Vec<f64>> {
        let n = self.grid.num_intervals();
        let mut phi = vec![0.0; n + 1];
        for j in (0..n).rev() {
            let h = self.grid.step(j);
            let i = map[j];
            let (v, ld) = (policy.v(i), factors[i].log_det);
            let incr = match self.scheme {
                Scheme::Euler => h * self.nodes[j].phi_rhs(&p[j + 1], v, ld),
                Scheme::Rk4 => {
                    let pm = (&p[j] + &p[j + 1]) * 0.5 + (deriv(j, j + 1) - deriv(j, j)) * (h / 8.0);
                    h / 6.0
                        * (self.nodes[j].phi_rhs(&p[j], v, ld)
                            + 4.0 * self.mids[j].phi_rhs(&pm, v, ld)
                            + self.nodes[j + 1].phi_rhs(&p[j + 1], v, ld))
                }
            };
            phi[j] = phi[j + 1] + incr;
            if !phi[j].is_finite() {
                return Err(LqcError::NonFinite {
                    what: "phi",
                    t: self.grid.node(j),
                });
            }
        }
        Ok(phi)
    }

    /// `φ^θ` from a `P^θ` trajectory consistent with `policy`.
    pub fn phi(&self, policy: &Policy, map: &[usize], p: &[Mat]) -> Result<Vec<f64>> {
        self.phi_factored(policy, map, p, &factor_covariances(policy)?)
    }

    fn phi_factored(&self, policy: &Policy, map: &[usize], p: &[Mat], factors: &[CovFactors]) -> Result<Vec<f64>> {
        let deriv = |step: usize, node: usize| self.nodes[node].lyapunov_rhs(&p[node], policy.k(map[step]));
        self.phi_with(policy, map, p, &deriv, factors)
    }

    /// `φ*` along the Riccati solution with the pointwise optimal covariance,
    /// whose integrand reduces to `½ρ(ln det V̄ + ln det M(P*) − k ln ρ)`.
    fn optimal_phi(&self, p: &[Mat], derivs: &[Mat]) -> Result<Vec<f64>> {
        let n = self.grid.num_intervals();
        let rho = self.model.rho();
        let k = self.model.action_dim() as f64;
        let f = |c: &Coefs, p: &Mat| -> Result<f64> {
            Ok(0.5 * rho * (c.log_det_vbar + log_det_pd(&c.curvature(p))? - k * rho.ln()))
        };
        let mut phi = vec![0.0; n + 1];
        for j in (0..n).rev() {
            let h = self.grid.step(j);
            let pm = (&p[j] + &p[j + 1]) * 0.5 + (&derivs[j + 1] - &derivs[j]) * (h / 8.0);
            let incr = h / 6.0 * (f(&self.nodes[j], &p[j])? + 4.0 * f(&self.mids[j], &pm)? + f(&self.nodes[j + 1], &p[j + 1])?);
            phi[j] = phi[j + 1] + incr;
        }
        Ok(phi)
    }

    /// Integral-route cost components against `Σ`.
    fn integral_route(&self, policy: &Policy, map: &[usize], sigma: &[Mat], factors: &[CovFactors]) -> (f64, f64, f64) {
        let rho = self.model.rho();
        let mut running = 0.0;
        let mut entropy = 0.0;
        for s in self.samples() {
            let c = &self.nodes[s.coef];
            let i = map[s.step];
            let (k, v) = (policy.k(i), policy.v(i));
            let sig = &sigma[s.sigma];
            let sk = c.s.transpose() * k;
            let quad = &c.q + &sk + sk.transpose() + k.transpose() * &c.r * k;
            running += s.weight * 0.5 * (quad.dot(sig) + c.r.dot(v));
            let mean = (k.transpose() * &c.vbar_inv * k).dot(sig);
            entropy += s.weight * 0.5 * rho * (mean + c.entropy_constant(v, factors[i].log_det));
        }
        let n = self.grid.num_intervals();
        let terminal = 0.5 * self.model.terminal_cost().dot(&sigma[n]);
        (terminal, running, entropy)
    }

    /// Full evaluation: trajectories and both cost routes.
    pub fn evaluate(&self, policy: &Policy) -> Result<Evaluation> {
        let map = self.step_map(policy)?;
        let policy_nodes = self.policy_nodes(policy)?;
        let factors = factor_covariances(policy)?;
        let p = self.lyapunov(policy, &map)?;
        let sigma = self.covariance(policy, &map)?;
        let phi = self.phi_factored(policy, &map, &p, &factors)?;
        let route1 = 0.5 * p[0].dot(&sigma[0]) + phi[0];
        let (terminal, running, entropy) = self.integral_route(policy, &map, &sigma, &factors);
        let route2 = terminal + running + entropy;
        Ok(Evaluation {
            trajectory: TrajectorySolution {
                grid: self.grid.clone(),
                scheme: self.scheme,
                p,
                sigma,
                phi,
            },
            cost: CostBreakdown {
                total: route1,
                quadratic_terminal: terminal,
                running_quadratic: running,
                entropy_term: entropy,
                representation_gap: (route1 - route2).abs(),
            },
            step_map: map,
            policy_nodes,
            v_factors: factors,
        })
    }

    /// Cost only.
    pub fn cost(&self, policy: &Policy) -> Result<f64> {
        let map = self.step_map(policy)?;
        let p = self.lyapunov(policy, &map)?;
        let phi = self.phi(policy, &map, &p)?;
        Ok(0.5 * p[0].dot(self.model.sigma0()) + phi[0])
    }

    /// Riccati solve on the solver grid and the associated optimal policy.
    pub fn riccati(&self) -> Result<RiccatiSolution> {
        let n = self.grid.num_intervals();
        let rho = self.model.rho();
        let mut p = vec![Mat::zeros(0, 0); n + 1];
        p[n] = self.model.terminal_cost().clone();
        let mut gains = vec![Mat::zeros(0, 0); n];
        let mut covs = vec![Mat::zeros(0, 0); n];
        let mut derivs = vec![Mat::zeros(0, 0); n + 1];
        let mut delta = f64::INFINITY;
        let mut lambda: f64 = 0.0;
        let regular = |c: &Coefs, p: &Mat| -> Result<(Mat, Mat, Mat)> {
            let m = c.curvature(p);
            let (ric, gain) = c.riccati_rhs(p)?;
            Ok((ric, gain, m))
        };
        let mut record = |m: &Mat| {
            delta = delta.min(min_eigenvalue(m));
            lambda = lambda.max(max_eigenvalue(m));
        };
        for j in (0..n).rev() {
            let h = self.grid.step(j);
            let next = p[j + 1].clone();
            match self.scheme {
                Scheme::Euler => {
                    let (ric, gain, m) = regular(&self.nodes[j], &next)?;
                    record(&m);
                    p[j] = symmetrize(&(&next + ric * h));
                    covs[j] = symmetrize(&(sym_inverse(&m)? * rho));
                    gains[j] = gain;
                }
                Scheme::Rk4 => {
                    let (c1, cm, c0) = (&self.nodes[j + 1], &self.mids[j], &self.nodes[j]);
                    let (k1, _, m1) = regular(c1, &next)?;
                    if j + 1 == n {
                        record(&m1);
                        derivs[n] = k1.clone();
                    }
                    let (k2, _, _) = regular(cm, &(&next + &k1 * (0.5 * h)))?;
                    let (k3, _, _) = regular(cm, &(&next + &k2 * (0.5 * h)))?;
                    let (k4, _, _) = regular(c0, &(&next + &k3 * h))?;
                    p[j] = symmetrize(&(&next + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)));
                    let (ric, gain, m) = regular(c0, &p[j])?;
                    record(&m);
                    derivs[j] = ric;
                    covs[j] = symmetrize(&(sym_inverse(&m)? * rho));
                    gains[j] = gain;
                }
            }
            check_finite(&p[j], "P*", self.grid.node(j))?;
        }
        let policy = Policy::new(self.grid.clone(), gains.clone(), covs.clone())?;
        let phi = match self.scheme {
            Scheme::Euler => {
                let map: Vec<usize> = (0..n).collect();
                self.phi_with(&policy, &map, &p, &|_, _| Mat::zeros(0, 0), &factor_covariances(&policy)?)?
            }
            Scheme::Rk4 => self.optimal_phi(&p, &derivs)?,
        };
        let optimal_cost = 0.5 * p[0].dot(self.model.sigma0()) + phi[0];
        Ok(RiccatiSolution {
            grid: self.grid.clone(),
            scheme: self.scheme,
            p_star: p,
            phi_star: phi,
            gains,
            covariances: covs,
            strongly_regular: delta > crate::linalg::EIG_FLOOR,
            delta_tilde: delta,
            lambda_max: lambda,
            optimal_cost,
        })
    }
}

/// Riccati solve on `grid`.
pub fn solve_riccati(model: &LqcModel, grid: &TimeGrid, scheme: Scheme) -> Result<RiccatiSolution> {
    Solver::new(model, grid.clone(), scheme)?.riccati()
}

/// Optimal policy `K* = −M⁻¹(BᵀP* + ΣDᵀP*C + S)`, `V* = ρM⁻¹` on the Riccati grid.
pub fn optimal_policy(model: &LqcModel, riccati: &RiccatiSolution) -> Result<Policy> {
    if !riccati.strongly_regular {
        return Err(LqcError::StrongRegularityLost {
            t: 0.0,
            min_eig: riccati.delta_tilde,
        });
    }
    if riccati.gains[0].shape() != (model.action_dim(), model.state_dim()) {
        return Err(crate::error::dim_err(
            "K*",
            (model.action_dim(), model.state_dim()),
            riccati.gains[0].shape(),
        ));
    }
    Policy::new(riccati.grid.clone(), riccati.gains.clone(), riccati.covariances.clone())
}

pub fn solve_policy_lyapunov(model: &LqcModel, theta: &Policy, options: &SolverOptions) -> Result<MatrixPath> {
    let solver = Solver::for_policy(model, theta, options)?;
    let map = solver.step_map(theta)?;
    Ok(MatrixPath {
        values: solver.lyapunov(theta, &map)?,
        grid: solver.grid,
        scheme: solver.scheme,
    })
}

pub fn solve_state_covariance(model: &LqcModel, theta: &Policy, options: &SolverOptions) -> Result<MatrixPath> {
    let solver = Solver::for_policy(model, theta, options)?;
    let map = solver.step_map(theta)?;
    Ok(MatrixPath {
        values: solver.covariance(theta, &map)?,
        grid: solver.grid,
        scheme: solver.scheme,
    })
}

/// `φ^θ` on the grid of `p`.
pub fn solve_phi(model: &LqcModel, theta: &Policy, p: &MatrixPath) -> Result<ScalarPath> {
    let solver = Solver::new(model, p.grid.clone(), p.scheme)?;
    let map = solver.step_map(theta)?;
    if p.values.len() != p.grid.nodes().len() {
        return Err(LqcError::InvalidInput("P trajectory length does not match its grid".into()));
    }
    Ok(ScalarPath {
        values: solver.phi(theta, &map, &p.values)?,
        grid: solver.grid,
        scheme: solver.scheme,
    })
}

pub fn evaluate_cost(model: &LqcModel, theta: &Policy, options: &SolverOptions) -> Result<CostBreakdown> {
    Ok(Solver::for_policy(model, theta, options)?.evaluate(theta)?.cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Coefficient;

    fn s(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    #[test]
    fn zero_dynamics_freeze_p_and_sigma() {
        let g = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let model = LqcModel::builder(2, 1, 1.0)
            .g(g.clone())
            .sigma0(Mat::identity(2, 2) * 0.3)
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            let ric = solve_riccati(&model, &grid, scheme).unwrap();
            for p in &ric.p_star {
                assert!((p - &g).norm() < 1e-14);
            }
            let theta = Policy::constant(grid.clone(), Mat::zeros(1, 2), Mat::identity(1, 1)).unwrap();
            let opts = SolverOptions::on_policy_grid(scheme);
            let cost = evaluate_cost(&model, &theta, &opts).unwrap();
            assert!((cost.total - 0.5 * (g.trace() * 0.3)).abs() < 1e-14);
            assert!(cost.representation_gap < 1e-14);
            let sig = solve_state_covariance(&model, &theta, &opts).unwrap();
            assert!(sig.values.iter().all(|m| (m - Mat::identity(2, 2) * 0.3).norm() < 1e-15));
        }
    }

    #[test]
    fn phi_vanishes_at_reference_covariance() {
        let vbar = Mat::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        let model = LqcModel::builder(1, 2, 1.0)
            .vbar(Coefficient::constant(vbar.clone()))
            .rho(0.7)
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let theta = Policy::constant(grid, Mat::zeros(2, 1), vbar).unwrap();
        let p = solve_policy_lyapunov(&model, &theta, &SolverOptions::default()).unwrap();
        let phi = solve_phi(&model, &theta, &p).unwrap();
        assert!(phi.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn optimal_policy_without_control_channels() {
        let model = LqcModel::builder(1, 1, 1.0)
            .q(Coefficient::constant(s(1.0)))
            .g(s(1.0))
            .r(Coefficient::constant(s(0.5)))
            .vbar(Coefficient::constant(s(2.0)))
            .rho(0.3)
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let ric = solve_riccati(&model, &grid, Scheme::Euler).unwrap();
        let pol = optimal_policy(&model, &ric).unwrap();
        let vstar = 0.3 / (0.5 + 0.3 / 2.0);
        for i in 0..8 {
            assert_eq!(pol.k(i)[(0, 0)], 0.0);
            assert!((pol.v(i)[(0, 0)] - vstar).abs() < 1e-14);
        }
        let model = LqcModel::builder(1, 1, 1.0)
            .vbar(Coefficient::constant(s(2.0)))
            .rho(0.3)
            .build()
            .unwrap();
        let pol = optimal_policy(&model, &solve_riccati(&model, &grid, Scheme::Rk4).unwrap()).unwrap();
        assert!((pol.v(3)[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let model = LqcModel::builder(1, 1, 1.0).g(s(1.0)).build().unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let theta = Policy::constant(grid, s(0.0), s(1.0)).unwrap();
        let solver = Solver::for_policy(&model, &theta, &SolverOptions::on_policy_grid(Scheme::Euler)).unwrap();
        let csv = solver.evaluate(&theta).unwrap().trajectory.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,P_00,Sigma_00,phi");
        assert_eq!(lines.len(), 6);
    }
}

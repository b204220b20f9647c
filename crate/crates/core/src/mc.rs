//! Model-free layer: Euler–Maruyama simulation of the randomised state
//! equation, Monte Carlo cost and second-moment estimators, gradient
//! estimators and a model-free policy gradient loop.
//!
//! Each path draws from its own ChaCha8 stream keyed by `(seed, path)` in a
//! fixed order: `ξ₀`, then per step `ζ` (only on refresh steps) and the
//! Brownian increments. The number of draws never depends on the policy, so
//! two simulations with the same seed share their noise exactly. Paths are
//! reduced in fixed-size chunks that are merged in index order, which makes
//! every estimate independent of the rayon schedule.

use std::fmt::Write as _;

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{LqcError, Result};
use crate::grid::TimeGrid;
use crate::linalg::{
    eigenvalues, log_det_pd, min_eigenvalue, psd_sqrt, sym_eigen, sym_inverse, symmetrize, Mat, Vector, EIG_FLOOR,
};
use crate::model::{Coefs, LqcModel};
use crate::ode::{Scheme, Solver};
use crate::pg::{bures_wasserstein, IterationRecord, PgConfig, PgVariant, Reference, RunRecord, Termination};
use crate::policy::Policy;

/// Paths per reduction chunk.
pub const CHUNK: usize = 1024;

/// Ridge added to `Σ̂(tᵢ)` before inversion in the model-free update.
pub const SIGMA_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub num_paths: usize,
    /// Euler–Maruyama steps.
    pub sim_grid: TimeGrid,
    /// Nodes where the action noise `ζ` is redrawn.
    pub randomisation_grid: TimeGrid,
    pub seed: u64,
    pub xi0_mean: Vector,
    pub xi0_cov: Mat,
    /// Keep the state at every simulation node; required for second moments.
    pub record_states: bool,
    /// Keep the realised action at every step.
    pub record_actions: bool,
}

impl SimConfig {
    pub fn new(
        num_paths: usize,
        sim_grid: TimeGrid,
        randomisation_grid: TimeGrid,
        seed: u64,
        xi0_mean: Vector,
        xi0_cov: Mat,
    ) -> Result<Self> {
        let cfg = Self {
            num_paths,
            sim_grid,
            randomisation_grid,
            seed,
            xi0_mean,
            xi0_cov,
            record_states: true,
            record_actions: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `ζ` refreshed at every step; `ξ₀` from the model's initial law, or
    /// centred with second moment `Σ₀` when the model has none.
    pub fn for_model(model: &LqcModel, num_paths: usize, sim_grid: TimeGrid, seed: u64) -> Result<Self> {
        let (mean, cov) = match model.initial_law() {
            Some(law) => (law.mean.clone(), law.covariance.clone()),
            None => (Vector::zeros(model.state_dim()), model.sigma0().clone()),
        };
        Self::new(num_paths, sim_grid.clone(), sim_grid, seed, mean, cov)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_paths(&self, num_paths: usize) -> Self {
        Self { num_paths, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_paths == 0 {
            return Err(LqcError::InvalidInput("num_paths must be at least 1".into()));
        }
        if !self.sim_grid.refines(&self.randomisation_grid) {
            return Err(LqcError::Grid(
                "randomisation grid is not nested in the simulation grid".into(),
            ));
        }
        let d = self.xi0_mean.len();
        if self.xi0_cov.shape() != (d, d) {
            return Err(crate::error::dim_err("xi0_cov", (d, d), self.xi0_cov.shape()));
        }
        let min_eig = min_eigenvalue(&self.xi0_cov);
        if min_eig < -EIG_FLOOR {
            return Err(LqcError::NotPsd { min_eig });
        }
        Ok(())
    }

    fn check_model(&self, model: &LqcModel) -> Result<()> {
        self.validate()?;
        let d = model.state_dim();
        if self.xi0_mean.len() != d {
            return Err(crate::error::dim_err("xi0_mean", (d, 1), (self.xi0_mean.len(), 1)));
        }
        if (self.sim_grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
            return Err(LqcError::Grid(format!(
                "simulation grid ends at {}, model horizon is {}",
                self.sim_grid.horizon(),
                model.horizon()
            )));
        }
        Ok(())
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate<T> {
    pub value: T,
    pub std_error: T,
    pub num_paths: usize,
}

impl McEstimate<f64> {
    /// `|value − target| ≤ k·std_error + band`.
    pub fn within(&self, target: f64, k: f64, band: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error + band
    }
}

impl McEstimate<Mat> {
    /// Entrywise version of [`McEstimate::<f64>::within`].
    pub fn within(&self, target: &Mat, k: f64, band: f64) -> bool {
        self.value
            .iter()
            .zip(self.std_error.iter())
            .zip(target.iter())
            .all(|((v, se), t)| (v - t).abs() <= k * se + band)
    }
}

/// Running mean and centred second moment per component (Welford, merged
/// with Chan's formula).
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta * inv;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        let n = self.n + other.n;
        let (na, nb) = (self.n as f64, other.n as f64);
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n as f64;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n as f64;
        }
        self.n = n;
    }

    /// Standard error of the mean; zero for a single path. For a sample mean
    /// the jackknife estimate coincides with `s/√N`.
    fn std_error(&self, i: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        (self.m2[i].max(0.0) / (n - 1.0) / n).sqrt()
    }

    fn scalar(&self, i: usize) -> McEstimate<f64> {
        McEstimate {
            value: self.mean[i],
            std_error: self.std_error(i),
            num_paths: self.n,
        }
    }

    /// `rows × cols` block stored row-major at `offset`.
    fn block(&self, offset: usize, rows: usize, cols: usize) -> McEstimate<Mat> {
        McEstimate {
            value: Mat::from_fn(rows, cols, |r, c| self.mean[offset + r * cols + c]),
            std_error: Mat::from_fn(rows, cols, |r, c| self.std_error(offset + r * cols + c)),
            num_paths: self.n,
        }
    }
}

#[derive(Debug, Clone)]
struct StepPlan {
    dt: f64,
    sqrt_dt: f64,
    interval: usize,
    refresh: bool,
    coefs: Coefs,
    /// `tr(V̄⁻¹(V − V̄)) + ln det V̄ − ln det V` for the active `V`.
    entropy: f64,
}

#[derive(Debug, Clone)]
struct IntervalPlan {
    k: Mat,
    root: Mat,
    /// Linear map `∂J/∂V^{1/2}·ζ`-accumulator ↦ `∂J/∂V`, `k² × k²` row-major.
    root_adjoint: Vec<f64>,
    /// `½ρ Σ Δtᵢ (V̄ᵢ⁻¹ − V⁻¹)` over the simulation steps of the interval.
    entropy_grad: Mat,
    /// First simulation node of the interval.
    first_node: usize,
}

/// Everything a path needs, precomputed once per (model, policy, config).
#[derive(Debug, Clone)]
struct Plan {
    d: usize,
    k: usize,
    p: usize,
    rho: f64,
    g: Mat,
    steps: Vec<StepPlan>,
    intervals: Vec<IntervalPlan>,
    xi0_mean: Vector,
    xi0_root: Mat,
    seed: u64,
}

/// Per-path scratch space.
struct Workspace {
    xs: Vec<f64>,
    acts: Vec<f64>,
    zetas: Vec<f64>,
    dw: Vec<f64>,
    lam: Vec<f64>,
    lam_next: Vec<f64>,
    ga: Vec<f64>,
    gm: Vec<f64>,
}

impl Workspace {
    fn new(plan: &Plan) -> Self {
        let n = plan.steps.len();
        Self {
            xs: vec![0.0; (n + 1) * plan.d],
            acts: vec![0.0; n * plan.k],
            zetas: vec![0.0; n * plan.k],
            dw: vec![0.0; n * plan.p],
            lam: vec![0.0; plan.d],
            lam_next: vec![0.0; plan.d],
            ga: vec![0.0; plan.k],
            gm: vec![0.0; plan.intervals.len() * plan.k * plan.k],
        }
    }
}

#[inline]
fn mv_add(out: &mut [f64], m: &Mat, x: &[f64], scale: f64) {
    for (r, o) in out.iter_mut().enumerate().take(m.nrows()) {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate().take(m.ncols()) {
            acc += m[(r, c)] * xc;
        }
        *o += scale * acc;
    }
}

#[inline]
fn mtv_add(out: &mut [f64], m: &Mat, x: &[f64], scale: f64) {
    for (c, o) in out.iter_mut().enumerate().take(m.ncols()) {
        let mut acc = 0.0;
        for (r, xr) in x.iter().enumerate().take(m.nrows()) {
            acc += m[(r, c)] * xr;
        }
        *o += scale * acc;
    }
}

/// `yᵀ M x`.
#[inline]
fn bilinear(m: &Mat, y: &[f64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (r, yr) in y.iter().enumerate().take(m.nrows()) {
        for (c, xc) in x.iter().enumerate().take(m.ncols()) {
            acc += yr * m[(r, c)] * xc;
        }
    }
    acc
}

/// For `S = V^{1/2} = U diag(s) Uᵀ` the derivative of `⟨M, S⟩` in `V` is
/// `U ((Uᵀ sym(M) U) ∘ W) Uᵀ` with `W_ab = 1/(s_a + s_b)`. The map is linear
/// in `M`; it is tabulated on the unit matrices.
fn root_adjoint(v: &Mat) -> Vec<f64> {
    let k = v.nrows();
    let eig = sym_eigen(v);
    let u = eig.eigenvectors;
    let s: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let mut table = vec![0.0; k * k * k * k];
    for a in 0..k {
        for b in 0..k {
            let mut e = Mat::zeros(k, k);
            e[(a, b)] = 1.0;
            let mut inner = u.transpose() * symmetrize(&e) * &u;
            for i in 0..k {
                for j in 0..k {
                    inner[(i, j)] /= s[i] + s[j];
                }
            }
            let out = &u * inner * u.transpose();
            for r in 0..k {
                for c in 0..k {
                    table[(r * k + c) * k * k + a * k + b] = out[(r, c)];
                }
            }
        }
    }
    table
}

impl Plan {
    fn new(model: &LqcModel, theta: &Policy, cfg: &SimConfig) -> Result<Self> {
        cfg.check_model(model)?;
        let (d, k) = (model.state_dim(), model.action_dim());
        if theta.state_dim() != d || theta.action_dim() != k {
            return Err(crate::error::dim_err("policy gain", (k, d), (theta.action_dim(), theta.state_dim())));
        }
        let sim = &cfg.sim_grid;
        if !sim.refines(theta.grid()) {
            return Err(LqcError::Grid("policy grid is not nested in the simulation grid".into()));
        }
        let map = sim.interval_map(theta.grid())?;
        let rho = model.rho();
        let mut intervals = Vec::with_capacity(theta.num_intervals());
        let mut log_dets = Vec::with_capacity(theta.num_intervals());
        let mut v_invs = Vec::with_capacity(theta.num_intervals());
        for j in 0..theta.num_intervals() {
            let v = symmetrize(theta.v(j));
            let first_node = map.iter().position(|&m| m == j).expect("every policy interval holds a step");
            intervals.push(IntervalPlan {
                k: theta.k(j).clone(),
                root: psd_sqrt(&v)?,
                root_adjoint: root_adjoint(&v),
                entropy_grad: Mat::zeros(k, k),
                first_node,
            });
            log_dets.push(log_det_pd(&v)?);
            v_invs.push(sym_inverse(&v)?);
        }
        let mut steps = Vec::with_capacity(sim.num_intervals());
        for (i, &j) in map.iter().enumerate() {
            let t = sim.node(i);
            let coefs = model.coefs(t)?;
            let dt = sim.step(i);
            let entropy = coefs.entropy_constant(theta.v(j), log_dets[j]);
            intervals[j].entropy_grad += (&coefs.vbar_inv - &v_invs[j]) * (0.5 * rho * dt);
            steps.push(StepPlan {
                dt,
                sqrt_dt: dt.sqrt(),
                interval: j,
                refresh: cfg.randomisation_grid.find_node(t).is_some(),
                coefs,
                entropy,
            });
        }
        Ok(Self {
            d,
            k,
            p: model.noise_channels(),
            rho,
            g: model.terminal_cost().clone(),
            steps,
            intervals,
            xi0_mean: cfg.xi0_mean.clone(),
            xi0_root: psd_sqrt(&cfg.xi0_cov)?,
            seed: cfg.seed,
        })
    }

    fn n(&self) -> usize {
        self.steps.len()
    }

    /// Fill `ξ₀`, `ζ` (held between refreshes) and `ΔW` for one path.
    fn draw(&self, path: usize, ws: &mut Workspace) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        let (d, k, p) = (self.d, self.k, self.p);
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in 0..d {
            ws.xs[r] = self.xi0_mean[r];
        }
        mv_add(&mut ws.xs[..d], &self.xi0_root, &z, 1.0);
        for (i, st) in self.steps.iter().enumerate() {
            if st.refresh {
                for a in 0..k {
                    ws.zetas[i * k + a] = StandardNormal.sample(&mut rng);
                }
            } else {
                ws.zetas.copy_within((i - 1) * k..i * k, i * k);
            }
            for c in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                ws.dw[i * p + c] = z * st.sqrt_dt;
            }
        }
    }

    /// Euler–Maruyama pass over the noise already in `ws`; returns the
    /// realised cost (left-endpoint Riemann sum plus terminal term).
    fn forward(&self, ws: &mut Workspace) -> f64 {
        let (d, k, p) = (self.d, self.k, self.p);
        let mut cost = 0.0;
        let mut m = vec![0.0; k];
        for (i, st) in self.steps.iter().enumerate() {
            let iv = &self.intervals[st.interval];
            let c = &st.coefs;
            let (x, rest) = ws.xs[i * d..].split_at_mut(d);
            let a = &mut ws.acts[i * k..(i + 1) * k];
            m.iter_mut().for_each(|v| *v = 0.0);
            mv_add(&mut m, &iv.k, x, 1.0);
            a.copy_from_slice(&m);
            mv_add(a, &iv.root, &ws.zetas[i * k..(i + 1) * k], 1.0);
            cost += self.running(st, x, a, &m) * st.dt;
            let next = &mut rest[..d];
            next.copy_from_slice(x);
            mv_add(next, &c.a, x, st.dt);
            mv_add(next, &c.b, a, st.dt);
            for ch in 0..p {
                let w = ws.dw[i * p + ch];
                mv_add(next, &c.c[ch], x, w);
                mv_add(next, &c.d[ch], a, w);
            }
        }
        let xn = &ws.xs[self.n() * d..];
        cost + 0.5 * bilinear(&self.g, xn, xn)
    }

    /// Reverse sweep of a completed forward pass. Writes `∂J/∂Kⱼ` (row-major)
    /// at `out[gk..]` and `∂J/∂Vⱼ` at `out[gv..]`.
    fn adjoint(&self, ws: &mut Workspace, out: &mut [f64], gk: usize, gv: usize) {
        let (d, k, p) = (self.d, self.k, self.p);
        let kd = k * d;
        let kk = k * k;
        let nj = self.intervals.len();
        out[gk..gk + nj * kd].iter_mut().for_each(|v| *v = 0.0);
        ws.gm.iter_mut().for_each(|v| *v = 0.0);
        let n = self.n();
        ws.lam.iter_mut().for_each(|v| *v = 0.0);
        mv_add(&mut ws.lam, &self.g, &ws.xs[n * d..], 1.0);
        let mut m = vec![0.0; k];
        let mut w = vec![0.0; k];
        for i in (0..n).rev() {
            let st = &self.steps[i];
            let j = st.interval;
            let iv = &self.intervals[j];
            let c = &st.coefs;
            let x = &ws.xs[i * d..(i + 1) * d];
            let a = &ws.acts[i * k..(i + 1) * k];
            let dt = st.dt;
            // g_a = Δt (S x + R a) + (B Δt + Σ D ΔW)ᵀ λ
            ws.ga.iter_mut().for_each(|v| *v = 0.0);
            mv_add(&mut ws.ga, &c.s, x, dt);
            mv_add(&mut ws.ga, &c.r, a, dt);
            mtv_add(&mut ws.ga, &c.b, &ws.lam, dt);
            for ch in 0..p {
                mtv_add(&mut ws.ga, &c.d[ch], &ws.lam, ws.dw[i * p + ch]);
            }
            m.iter_mut().for_each(|v| *v = 0.0);
            mv_add(&mut m, &iv.k, x, 1.0);
            w.iter_mut().for_each(|v| *v = 0.0);
            mv_add(&mut w, &c.vbar_inv, &m, 1.0);
            // λᵢ = (I + A Δt + Σ C ΔW)ᵀ λ + Δt (Q x + Sᵀ a + ρ Kᵀ V̄⁻¹ K x) + Kᵀ g_a
            ws.lam_next.copy_from_slice(&ws.lam);
            mtv_add(&mut ws.lam_next, &c.a, &ws.lam, dt);
            for ch in 0..p {
                mtv_add(&mut ws.lam_next, &c.c[ch], &ws.lam, ws.dw[i * p + ch]);
            }
            mv_add(&mut ws.lam_next, &c.q, x, dt);
            mtv_add(&mut ws.lam_next, &c.s, a, dt);
            mtv_add(&mut ws.lam_next, &iv.k, &w, dt * self.rho);
            mtv_add(&mut ws.lam_next, &iv.k, &ws.ga, 1.0);
            let base = gk + j * kd;
            for r in 0..k {
                let coef = ws.ga[r] + dt * self.rho * w[r];
                for s in 0..d {
                    out[base + r * d + s] += coef * x[s];
                }
            }
            let zeta = &ws.zetas[i * k..(i + 1) * k];
            for r in 0..k {
                for s in 0..k {
                    ws.gm[j * kk + r * k + s] += ws.ga[r] * zeta[s];
                }
            }
            std::mem::swap(&mut ws.lam, &mut ws.lam_next);
        }
        for (j, iv) in self.intervals.iter().enumerate() {
            let gm = &ws.gm[j * kk..(j + 1) * kk];
            let dst = &mut out[gv + j * kk..gv + (j + 1) * kk];
            for (o, row) in dst.iter_mut().zip(iv.root_adjoint.chunks_exact(kk)) {
                *o = row.iter().zip(gm).map(|(t, g)| t * g).sum();
            }
            for r in 0..k {
                for s in 0..k {
                    dst[r * k + s] += iv.entropy_grad[(r, s)];
                }
            }
        }
    }

    /// Row-major `x xᵀ` at node `node` into `out`.
    fn second_moment(&self, ws: &Workspace, node: usize, out: &mut [f64]) {
        let d = self.d;
        let x = &ws.xs[node * d..(node + 1) * d];
        for r in 0..d {
            for s in 0..d {
                out[r * d + s] = x[r] * x[s];
            }
        }
    }
}

/// Chunked, order-preserving reduction of per-path vectors of length `len`.
fn reduce_paths<F>(plan: &Plan, num_paths: usize, len: usize, per_path: F) -> Moments
where
    F: Fn(usize, &mut Workspace, &mut [f64]) + Sync,
{
    let chunks: Vec<Moments> = (0..num_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut ws = Workspace::new(plan);
            let mut buf = vec![0.0; len];
            let mut m = Moments::new(len);
            for path in c * CHUNK..((c + 1) * CHUNK).min(num_paths) {
                per_path(path, &mut ws, &mut buf);
                m.push(&buf);
            }
            m
        })
        .collect();
    chunks.iter().fold(Moments::new(len), |mut acc, m| {
        acc.merge(m);
        acc
    })
}

/// Simulated paths of one policy.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    state_dim: usize,
    action_dim: usize,
    num_paths: usize,
    states: Option<Vec<f64>>,
    actions: Option<Vec<f64>>,
    costs: Vec<f64>,
    policy: Policy,
}

impl PathEnsemble {
    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// State of `path` at simulation node `node`, if states were recorded.
    pub fn state(&self, path: usize, node: usize) -> Option<&[f64]> {
        let d = self.state_dim;
        let per = (self.grid.num_intervals() + 1) * d;
        self.states
            .as_ref()
            .map(|s| &s[path * per + node * d..path * per + (node + 1) * d])
    }

    /// Realised action of `path` on step `step`, if actions were recorded.
    pub fn action(&self, path: usize, step: usize) -> Option<&[f64]> {
        let k = self.action_dim;
        let per = self.grid.num_intervals() * k;
        self.actions
            .as_ref()
            .map(|s| &s[path * per + step * k..path * per + (step + 1) * k])
    }

    /// Realised cost of every path.
    pub fn path_costs(&self) -> &[f64] {
        &self.costs
    }

    /// `node,t,mean_x…,m2_rs…,se_m2_rs…` per simulation node (upper triangle).
    pub fn summary_csv(&self) -> Result<String> {
        let d = self.state_dim;
        let nodes: Vec<usize> = (0..=self.grid.num_intervals()).collect();
        let second = estimate_covariance(self, &nodes)?;
        let mut out = String::from("node,t");
        for r in 0..d {
            let _ = write!(out, ",mean_x{r}");
        }
        for prefix in ["m2", "se_m2"] {
            for r in 0..d {
                for s in r..d {
                    let _ = write!(out, ",{prefix}_{r}{s}");
                }
            }
        }
        out.push('\n');
        let states = self.states.as_ref().expect("checked by estimate_covariance");
        let per = (self.grid.num_intervals() + 1) * d;
        for (&node, est) in nodes.iter().zip(&second) {
            let _ = write!(out, "{node},{:.17e}", self.grid.node(node));
            for r in 0..d {
                let sum: f64 = (0..self.num_paths).map(|p| states[p * per + node * d + r]).sum();
                let _ = write!(out, ",{:.17e}", sum / self.num_paths as f64);
            }
            for m in [&est.value, &est.std_error] {
                for r in 0..d {
                    for s in r..d {
                        let _ = write!(out, ",{:.17e}", m[(r, s)]);
                    }
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Simulate `cfg.num_paths` independent trajectories of the randomised
/// state equation under `theta`.
pub fn simulate_paths(model: &LqcModel, theta: &Policy, cfg: &SimConfig) -> Result<PathEnsemble> {
    let plan = Plan::new(model, theta, cfg)?;
    let (d, k, n) = (plan.d, plan.k, plan.n());
    let chunks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..cfg.num_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut ws = Workspace::new(&plan);
            let (mut xs, mut acts, mut costs) = (Vec::new(), Vec::new(), Vec::new());
            for path in c * CHUNK..((c + 1) * CHUNK).min(cfg.num_paths) {
                plan.draw(path, &mut ws);
                costs.push(plan.forward(&mut ws));
                if cfg.record_states {
                    xs.extend_from_slice(&ws.xs);
                }
                if cfg.record_actions {
                    acts.extend_from_slice(&ws.acts);
                }
            }
            (xs, acts, costs)
        })
        .collect();
    let mut states = cfg.record_states.then(|| Vec::with_capacity(cfg.num_paths * (n + 1) * d));
    let mut actions = cfg.record_actions.then(|| Vec::with_capacity(cfg.num_paths * n * k));
    let mut costs = Vec::with_capacity(cfg.num_paths);
    for (xs, acts, c) in chunks {
        if let Some(s) = states.as_mut() {
            s.extend(xs);
        }
        if let Some(a) = actions.as_mut() {
            a.extend(acts);
        }
        costs.extend(c);
    }
    Ok(PathEnsemble {
        grid: cfg.sim_grid.clone(),
        state_dim: d,
        action_dim: k,
        num_paths: cfg.num_paths,
        states,
        actions,
        costs,
        policy: theta.clone(),
    })
}

fn same_policy(a: &Policy, b: &Policy) -> bool {
    a.grid() == b.grid() && a.gains() == b.gains() && a.covariances() == b.covariances()
}

/// Mean realised cost with its standard error.
pub fn estimate_cost(ensemble: &PathEnsemble, model: &LqcModel, theta: &Policy) -> Result<McEstimate<f64>> {
    if model.state_dim() != ensemble.state_dim || model.action_dim() != ensemble.action_dim {
        return Err(LqcError::InvalidInput("ensemble was simulated for a different model".into()));
    }
    if !same_policy(theta, &ensemble.policy) {
        return Err(LqcError::InvalidInput("ensemble was simulated under a different policy".into()));
    }
    let mut acc = Moments::new(1);
    for chunk in ensemble.costs.chunks(CHUNK) {
        let mut m = Moments::new(1);
        for c in chunk {
            m.push(std::slice::from_ref(c));
        }
        acc.merge(&m);
    }
    Ok(acc.scalar(0))
}

/// Uncentred second moments `E[X Xᵀ]` at the requested simulation nodes.
pub fn estimate_covariance(ensemble: &PathEnsemble, nodes: &[usize]) -> Result<Vec<McEstimate<Mat>>> {
    let states = ensemble
        .states
        .as_ref()
        .ok_or_else(|| LqcError::InvalidInput("ensemble was simulated without recording states".into()))?;
    let n = ensemble.grid.num_intervals();
    if let Some(&bad) = nodes.iter().find(|&&i| i > n) {
        return Err(LqcError::InvalidInput(format!("node {bad} is outside a grid with {n} intervals")));
    }
    let d = ensemble.state_dim;
    let per = (n + 1) * d;
    let len = nodes.len() * d * d;
    let chunks: Vec<Moments> = (0..ensemble.num_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(len);
            let mut buf = vec![0.0; len];
            for path in c * CHUNK..((c + 1) * CHUNK).min(ensemble.num_paths) {
                for (slot, &node) in nodes.iter().enumerate() {
                    let x = &states[path * per + node * d..path * per + (node + 1) * d];
                    for r in 0..d {
                        for s in 0..d {
                            buf[slot * d * d + r * d + s] = x[r] * x[s];
                        }
                    }
                }
                m.push(&buf);
            }
            m
        })
        .collect();
    let total = chunks.iter().fold(Moments::new(len), |mut acc, m| {
        acc.merge(m);
        acc
    });
    Ok((0..nodes.len()).map(|slot| total.block(slot * d * d, d, d)).collect())
}

/// Monte Carlo estimates of the interval gradients `∂C/∂Kⱼ`, `∂C/∂Vⱼ`
/// (symmetric convention: `⟨∂C/∂V, δV⟩` is the derivative along a symmetric
/// `δV`), together with the cost and the second moments at the left node of
/// every policy interval.
#[derive(Debug, Clone)]
pub struct McGradient {
    pub grid: TimeGrid,
    pub cost: McEstimate<f64>,
    pub grad_k: Vec<McEstimate<Mat>>,
    pub grad_v: Vec<McEstimate<Mat>>,
    pub sigma_left: Vec<McEstimate<Mat>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientEstimator {
    /// Reverse-mode derivative of each path's realised cost with its noise
    /// held fixed.
    Pathwise,
    /// Central differences of the cost estimator with common random numbers.
    FdCrn { h: f64 },
}

/// Pathwise gradient: one forward and one reverse sweep per path. It is the
/// `h → 0` limit of the finite-difference estimator on the same noise.
pub fn estimate_gradient_pathwise(model: &LqcModel, theta: &Policy, cfg: &SimConfig) -> Result<McGradient> {
    let plan = Plan::new(model, theta, cfg)?;
    let (d, k) = (plan.d, plan.k);
    let nj = plan.intervals.len();
    let gk = 1;
    let gv = gk + nj * k * d;
    let sg = gv + nj * k * k;
    let len = sg + nj * d * d;
    let m = reduce_paths(&plan, cfg.num_paths, len, |path, ws, buf| {
        plan.draw(path, ws);
        buf[0] = plan.forward(ws);
        plan.adjoint(ws, buf, gk, gv);
        for (j, iv) in plan.intervals.iter().enumerate() {
            plan.second_moment(ws, iv.first_node, &mut buf[sg + j * d * d..sg + (j + 1) * d * d]);
        }
    });
    Ok(McGradient {
        grid: theta.grid().clone(),
        cost: m.scalar(0),
        grad_k: (0..nj).map(|j| m.block(gk + j * k * d, k, d)).collect(),
        grad_v: (0..nj).map(|j| m.block(gv + j * k * k, k, k)).collect(),
        sigma_left: (0..nj).map(|j| m.block(sg + j * d * d, d, d)).collect(),
    })
}

/// Cost and left-node second moments without gradients.
fn forward_statistics(plan: &Plan, num_paths: usize) -> (McEstimate<f64>, Vec<McEstimate<Mat>>) {
    let d = plan.d;
    let nj = plan.intervals.len();
    let m = reduce_paths(plan, num_paths, 1 + nj * d * d, |path, ws, buf| {
        plan.draw(path, ws);
        buf[0] = plan.forward(ws);
        for (j, iv) in plan.intervals.iter().enumerate() {
            plan.second_moment(ws, iv.first_node, &mut buf[1 + j * d * d..1 + (j + 1) * d * d]);
        }
    });
    (m.scalar(0), (0..nj).map(|j| m.block(1 + j * d * d, d, d)).collect())
}

/// Per-path realised costs of `theta` on the noise of `cfg`.
pub fn path_costs(model: &LqcModel, theta: &Policy, cfg: &SimConfig) -> Result<Vec<f64>> {
    let plan = Plan::new(model, theta, cfg)?;
    let chunks: Vec<Vec<f64>> = (0..cfg.num_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut ws = Workspace::new(&plan);
            (c * CHUNK..((c + 1) * CHUNK).min(cfg.num_paths))
                .map(|path| {
                    plan.draw(path, &mut ws);
                    plan.forward(&mut ws)
                })
                .collect()
        })
        .collect();
    Ok(chunks.concat())
}

fn paired_difference(plus: &[f64], minus: &[f64], h: f64) -> McEstimate<f64> {
    let mut acc = Moments::new(1);
    for (p, m) in plus.chunks(CHUNK).zip(minus.chunks(CHUNK)) {
        let mut part = Moments::new(1);
        for (a, b) in p.iter().zip(m) {
            part.push(&[(a - b) / (2.0 * h)]);
        }
        acc.merge(&part);
    }
    acc.scalar(0)
}

fn with_gain(theta: &Policy, j: usize, r: usize, c: usize, delta: f64) -> Policy {
    let mut gains = theta.gains().to_vec();
    gains[j][(r, c)] += delta;
    Policy::from_parts_unchecked(theta.grid().clone(), gains, theta.covariances().to_vec())
}

fn with_covariance(theta: &Policy, j: usize, r: usize, c: usize, delta: f64) -> Result<Policy> {
    let mut covs = theta.covariances().to_vec();
    let step = if r == c { delta } else { 0.5 * delta };
    covs[j][(r, c)] += step;
    if r != c {
        covs[j][(c, r)] += step;
    }
    if !(eigenvalues(&covs[j]).min() > EIG_FLOOR) {
        return Err(LqcError::ShrinkStep);
    }
    Ok(Policy::from_parts_unchecked(theta.grid().clone(), theta.gains().to_vec(), covs))
}

/// Central finite differences of the cost estimator, one parameter entry at
/// a time, with both sides simulated on identical noise. Off-diagonal `V`
/// entries move symmetrically by `h/2`, so every entry estimates the
/// symmetric-convention gradient.
pub fn estimate_gradient_fd_crn(model: &LqcModel, theta: &Policy, cfg: &SimConfig, h: f64) -> Result<McGradient> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(LqcError::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    let plan = Plan::new(model, theta, cfg)?;
    let (cost, sigma_left) = forward_statistics(&plan, cfg.num_paths);
    let (d, k) = (plan.d, plan.k);
    let nj = theta.num_intervals();
    let blank = |rows, cols| McEstimate {
        value: Mat::zeros(rows, cols),
        std_error: Mat::zeros(rows, cols),
        num_paths: cfg.num_paths,
    };
    let mut grad_k = vec![blank(k, d); nj];
    let mut grad_v = vec![blank(k, k); nj];
    for j in 0..nj {
        for r in 0..k {
            for c in 0..d {
                let plus = path_costs(model, &with_gain(theta, j, r, c, h), cfg)?;
                let minus = path_costs(model, &with_gain(theta, j, r, c, -h), cfg)?;
                let e = paired_difference(&plus, &minus, h);
                grad_k[j].value[(r, c)] = e.value;
                grad_k[j].std_error[(r, c)] = e.std_error;
            }
            for c in r..k {
                let plus = path_costs(model, &with_covariance(theta, j, r, c, h)?, cfg)?;
                let minus = path_costs(model, &with_covariance(theta, j, r, c, -h)?, cfg)?;
                let e = paired_difference(&plus, &minus, h);
                for (a, b) in [(r, c), (c, r)] {
                    grad_v[j].value[(a, b)] = e.value;
                    grad_v[j].std_error[(a, b)] = e.std_error;
                }
            }
        }
    }
    Ok(McGradient {
        grid: theta.grid().clone(),
        cost,
        grad_k,
        grad_v,
        sigma_left,
    })
}

pub fn estimate_gradient(
    model: &LqcModel,
    theta: &Policy,
    cfg: &SimConfig,
    estimator: GradientEstimator,
) -> Result<McGradient> {
    match estimator {
        GradientEstimator::Pathwise => estimate_gradient_pathwise(model, theta, cfg),
        GradientEstimator::FdCrn { h } => estimate_gradient_fd_crn(model, theta, cfg, h),
    }
}

/// Mean of `J_Δ − J_{Δ/2}` where the fine path uses the simulation grid
/// refined by two and the coarse path is driven by the summed Brownian
/// increments and `ζ = (ζ₁ + ζ₂)/√2`. Requires `ζ` refreshed every step.
pub fn estimate_level_difference(model: &LqcModel, theta: &Policy, cfg: &SimConfig) -> Result<McEstimate<f64>> {
    if cfg.randomisation_grid != cfg.sim_grid {
        return Err(LqcError::InvalidInput(
            "level coupling needs the action noise refreshed at every step".into(),
        ));
    }
    let fine_grid = cfg.sim_grid.refine(2)?;
    let fine_cfg = SimConfig {
        sim_grid: fine_grid.clone(),
        randomisation_grid: fine_grid,
        ..cfg.clone()
    };
    let coarse = Plan::new(model, theta, cfg)?;
    let fine = Plan::new(model, theta, &fine_cfg)?;
    let (d, k, p) = (coarse.d, coarse.k, coarse.p);
    let chunks: Vec<Moments> = (0..cfg.num_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut wf = Workspace::new(&fine);
            let mut wc = Workspace::new(&coarse);
            let mut m = Moments::new(1);
            for path in c * CHUNK..((c + 1) * CHUNK).min(cfg.num_paths) {
                fine.draw(path, &mut wf);
                wc.xs[..d].copy_from_slice(&wf.xs[..d]);
                for i in 0..coarse.n() {
                    for a in 0..k {
                        wc.zetas[i * k + a] =
                            (wf.zetas[2 * i * k + a] + wf.zetas[(2 * i + 1) * k + a]) * std::f64::consts::FRAC_1_SQRT_2;
                    }
                    for ch in 0..p {
                        wc.dw[i * p + ch] = wf.dw[2 * i * p + ch] + wf.dw[(2 * i + 1) * p + ch];
                    }
                }
                let jf = fine.forward(&mut wf);
                let jc = coarse.forward(&mut wc);
                m.push(&[jc - jf]);
            }
            m
        })
        .collect();
    let total = chunks.iter().fold(Moments::new(1), |mut acc, m| {
        acc.merge(m);
        acc
    });
    Ok(total.scalar(0))
}

struct CvStep {
    f: Mat,
    g: Vec<Mat>,
    p_next: Mat,
    /// `½ tr((Δ²BᵀPB + Δ Σ DᵀPD + ΔR) V)`.
    action_term: f64,
}

impl Plan {
    /// Running cost rate at `(x, a)` with entropy mean term `m = Kx`.
    fn running(&self, st: &StepPlan, x: &[f64], a: &[f64], m: &[f64]) -> f64 {
        let c = &st.coefs;
        0.5 * (bilinear(&c.q, x, x) + 2.0 * bilinear(&c.s, a, x) + bilinear(&c.r, a, a))
            + 0.5 * self.rho * (bilinear(&c.vbar_inv, m, m) + st.entropy)
    }

    /// `J − Σᵢ (Uᵢ₊₁(Xᵢ₊₁) + ℓᵢΔᵢ − E[Uᵢ₊₁(Xᵢ₊₁) + ℓᵢΔᵢ | Xᵢ]) − (U₀(X₀) − E U₀(X₀))`
    /// with `Uᵢ(x) = ½xᵀPᵢx`. Every subtracted term has mean zero.
    fn controlled_cost(&self, ws: &Workspace, cost: f64, cv: &[CvStep], p0: &Mat, u0_mean: f64) -> f64 {
        let (d, k) = (self.d, self.k);
        let mut total = 0.5 * bilinear(p0, &ws.xs[..d], &ws.xs[..d]) - u0_mean;
        let mut m = vec![0.0; k];
        let mut fx = vec![0.0; d];
        for (i, (st, cs)) in self.steps.iter().zip(cv).enumerate() {
            let iv = &self.intervals[st.interval];
            let x = &ws.xs[i * d..(i + 1) * d];
            let xn = &ws.xs[(i + 1) * d..(i + 2) * d];
            let a = &ws.acts[i * k..(i + 1) * k];
            m.iter_mut().for_each(|v| *v = 0.0);
            mv_add(&mut m, &iv.k, x, 1.0);
            fx.iter_mut().for_each(|v| *v = 0.0);
            mv_add(&mut fx, &cs.f, x, 1.0);
            let mut expected = 0.5 * bilinear(&cs.p_next, &fx, &fx) + self.running(st, x, &m, &m) * st.dt + cs.action_term;
            for g in &cs.g {
                fx.iter_mut().for_each(|v| *v = 0.0);
                mv_add(&mut fx, g, x, 1.0);
                expected += 0.5 * st.dt * bilinear(&cs.p_next, &fx, &fx);
            }
            total += 0.5 * bilinear(&cs.p_next, xn, xn) + self.running(st, x, a, &m) * st.dt - expected;
        }
        cost - total
    }
}

/// Cost estimate with a quadratic control variate built from the policy's
/// Lyapunov solution on the simulation grid. The estimator has the same
/// expectation as [`estimate_cost`] (the scheme's exact mean) and a per-path
/// variance of order `Δt²`, which makes the time-discretisation bias
/// measurable. It uses the model, so it is a verification tool rather than a
/// model-free estimator. Requires `ζ` refreshed every step.
pub fn estimate_cost_control_variate(model: &LqcModel, theta: &Policy, cfg: &SimConfig) -> Result<McEstimate<f64>> {
    if cfg.randomisation_grid != cfg.sim_grid {
        return Err(LqcError::InvalidInput(
            "the control variate needs the action noise refreshed at every step".into(),
        ));
    }
    let plan = Plan::new(model, theta, cfg)?;
    let solver = Solver::new(model, cfg.sim_grid.clone(), Scheme::Euler)?;
    let map = solver.step_map(theta)?;
    let p = solver.lyapunov(theta, &map)?;
    let d = plan.d;
    let cv: Vec<CvStep> = plan
        .steps
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let c = &st.coefs;
            let iv = &plan.intervals[st.interval];
            let pn = &p[i + 1];
            let mut quad = c.b.transpose() * pn * &c.b * (st.dt * st.dt) + &c.r * st.dt;
            for dj in &c.d {
                quad += dj.transpose() * pn * dj * st.dt;
            }
            let v = &iv.root * &iv.root;
            CvStep {
                f: Mat::identity(d, d) + (&c.a + &c.b * &iv.k) * st.dt,
                g: c.c.iter().zip(&c.d).map(|(cj, dj)| cj + dj * &iv.k).collect(),
                p_next: pn.clone(),
                action_term: 0.5 * (quad * v).trace(),
            }
        })
        .collect();
    let second0 = &cfg.xi0_cov + &cfg.xi0_mean * cfg.xi0_mean.transpose();
    let u0_mean = 0.5 * (&p[0] * second0).trace();
    let m = reduce_paths(&plan, cfg.num_paths, 1, |path, ws, buf| {
        plan.draw(path, ws);
        let cost = plan.forward(ws);
        buf[0] = plan.controlled_cost(ws, cost, &cv, &p[0], u0_mean);
    });
    Ok(m.scalar(0))
}

/// Seed of iteration `n` in a model-free run: the first word of stream
/// `u64::MAX − n` under the base seed, disjoint from every path stream in
/// practice.
pub fn iteration_seed(seed: u64, n: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - n as u64);
    rng.next_u64()
}

fn frob_l2(ms: &[McEstimate<Mat>]) -> f64 {
    ms.iter().map(|m| m.value.norm_squared()).sum::<f64>().sqrt()
}

/// Model-free policy gradient. Every iteration simulates fresh noise,
/// estimates the interval gradients and `Σ̂(tᵢ)`, and applies
/// `Kᵢ ← Kᵢ − (τ/Δᵢ) ∇̂_{Kᵢ} (Σ̂ᵢ + εI)⁻¹`, `Vᵢ ← Vᵢ − (τ/Δᵢ)(∇̂_{Vᵢ}Vᵢ + Vᵢ∇̂_{Vᵢ})`
/// (`τ` in place of `τ/Δᵢ` for the unscaled variant). Recorded costs are
/// the estimates; `grad_k_l2`/`grad_v_l2` are Euclidean norms of the interval
/// gradient estimates.
pub fn run_model_free_pg(
    model: &LqcModel,
    theta0: &Policy,
    config: &PgConfig,
    sim: &SimConfig,
    reference: &Reference,
    estimator: GradientEstimator,
) -> Result<RunRecord> {
    config.validate()?;
    log::debug!("model-free update inverts Sigma-hat + {SIGMA_RIDGE:e} I");
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
    let mut sim = sim.clone();
    sim.record_states = false;
    sim.record_actions = false;
    let base_seed = sim.seed;
    let mut theta = theta0.clone();
    let mut prev_cost: Option<f64> = None;
    let mut n = 0;
    loop {
        let g = estimate_gradient(model, &theta, &sim.with_seed(iteration_seed(base_seed, n)), estimator)?;
        let cost = g.cost.value;
        let subopt = cost - reference.optimum;
        let (v_min, v_max) = theta.v_eig_range();
        record.iterations.push(IterationRecord {
            iteration: n,
            cost,
            subopt,
            grad_k_l2: frob_l2(&g.grad_k),
            grad_v_l2: frob_l2(&g.grad_v),
            min_eig_v: v_min,
            max_eig_v: v_max,
            min_eig_sigma: g
                .sigma_left
                .iter()
                .map(|s| min_eigenvalue(&s.value))
                .fold(f64::INFINITY, f64::min),
            diagnostics: None,
        });
        record.final_policy = theta.clone();
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
        if let (Some(tol), Some(p)) = (config.stall_tolerance, prev_cost) {
            if (p - cost).abs() <= tol * (1.0 + cost.abs()) {
                record.termination = Some(Termination::Stalled);
                break;
            }
        }
        let grid = theta.grid().clone();
        let d = theta.state_dim();
        let mut gains = Vec::with_capacity(theta.num_intervals());
        let mut covs = Vec::with_capacity(theta.num_intervals());
        for i in 0..theta.num_intervals() {
            let scale = match config.variant {
                PgVariant::DiscreteUnscaled => config.tau,
                _ => config.tau / grid.step(i),
            };
            let sigma = symmetrize(&g.sigma_left[i].value) + Mat::identity(d, d) * SIGMA_RIDGE;
            let sigma_inv = sym_inverse(&sigma).map_err(|_| LqcError::Singular {
                what: "Sigma-hat",
                t: grid.node(i),
                min_eig: min_eigenvalue(&sigma),
            })?;
            gains.push(theta.k(i) - &g.grad_k[i].value * sigma_inv * scale);
            let v = theta.v(i);
            covs.push(symmetrize(&(v - bures_wasserstein(&g.grad_v[i].value, v) * scale)));
        }
        if covs.iter().any(|v| !(min_eigenvalue(v) > 0.0)) {
            record.left_theta_at = Some(n + 1);
            return Err(LqcError::PgAborted {
                iteration: n + 1,
                reason: "a covariance left the positive definite cone".into(),
                record: Box::new(record),
            });
        }
        theta = Policy::from_parts_unchecked(grid, gains, covs);
        prev_cost = Some(cost);
        n += 1;
    }
    Ok(record)
}

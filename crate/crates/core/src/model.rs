//! Problem data: time-dependent coefficients, regulariser and initial law.

use std::fmt;
use std::sync::Arc;

use crate::error::{dim_err, LqcError, Result};
use crate::linalg::{ingest_symmetric, log_det_pd, sym_inverse, symmetrize, Mat, Vector};

type CoefFn = Arc<dyn Fn(f64) -> Mat + Send + Sync>;

/// A matrix-valued coefficient `t -> M(t)`.
#[derive(Clone)]
pub enum Coefficient {
    Constant(Mat),
    Function {
        rows: usize,
        cols: usize,
        label: String,
        f: CoefFn,
    },
}

impl Coefficient {
    pub fn constant(m: Mat) -> Self {
        Coefficient::Constant(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Coefficient::Constant(Mat::zeros(rows, cols))
    }

    pub fn function(
        rows: usize,
        cols: usize,
        label: impl Into<String>,
        f: impl Fn(f64) -> Mat + Send + Sync + 'static,
    ) -> Self {
        Coefficient::Function {
            rows,
            cols,
            label: label.into(),
            f: Arc::new(f),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Coefficient::Constant(m) => m.shape(),
            Coefficient::Function { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            Coefficient::Constant(_) => None,
            Coefficient::Function { label, .. } => Some(label),
        }
    }

    /// Evaluate at `t`; the result is not shape-checked.
    pub fn at(&self, t: f64) -> Mat {
        match self {
            Coefficient::Constant(m) => m.clone(),
            Coefficient::Function { f, .. } => f(t),
        }
    }

    fn checked_at(&self, field: &str, t: f64) -> Result<Mat> {
        let m = self.at(t);
        if m.shape() != self.shape() {
            return Err(dim_err(format!("{field}({t})"), self.shape(), m.shape()));
        }
        Ok(m)
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            Coefficient::Function { rows, cols, label, .. } => {
                write!(f, "Function({label}, {rows}x{cols})")
            }
        }
    }
}

/// Gaussian law of the initial state, used by the simulator.
#[derive(Debug, Clone)]
pub struct InitialLaw {
    pub mean: Vector,
    pub covariance: Mat,
}

/// Entropy-regularised stochastic LQ control problem.
///
/// State `d`, action `k`, `p` noise channels. Only the second moment `Σ₀`
/// enters the model-based cost; the full Gaussian law is optional.
#[derive(Debug, Clone)]
pub struct LqcModel {
    state_dim: usize,
    action_dim: usize,
    horizon: f64,
    a: Coefficient,
    b: Coefficient,
    c: Vec<Coefficient>,
    d: Vec<Coefficient>,
    q: Coefficient,
    s: Coefficient,
    r: Coefficient,
    g: Mat,
    rho: f64,
    vbar: Coefficient,
    sigma0: Mat,
    initial_law: Option<InitialLaw>,
}

/// Coefficients sampled at a single time, with the derived quantities the
/// solvers need.
#[derive(Debug, Clone)]
pub struct Coefs {
    pub t: f64,
    pub a: Mat,
    pub b: Mat,
    pub c: Vec<Mat>,
    pub d: Vec<Mat>,
    pub q: Mat,
    pub s: Mat,
    pub r: Mat,
    pub rho: f64,
    pub vbar: Mat,
    pub vbar_inv: Mat,
    pub log_det_vbar: f64,
}

/// Raw coefficient values at one time, without inversion of `V̄`.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub q: Mat,
    pub r: Mat,
    pub vbar: Mat,
}

impl LqcModel {
    pub fn builder(state_dim: usize, action_dim: usize, horizon: f64) -> LqcModelBuilder {
        LqcModelBuilder::new(state_dim, action_dim, horizon)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }
    pub fn noise_channels(&self) -> usize {
        self.c.len()
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn terminal_cost(&self) -> &Mat {
        &self.g
    }
    pub fn sigma0(&self) -> &Mat {
        &self.sigma0
    }
    pub fn initial_law(&self) -> Option<&InitialLaw> {
        self.initial_law.as_ref()
    }
    pub fn a(&self) -> &Coefficient {
        &self.a
    }
    pub fn b(&self) -> &Coefficient {
        &self.b
    }
    pub fn c(&self) -> &[Coefficient] {
        &self.c
    }
    pub fn d(&self) -> &[Coefficient] {
        &self.d
    }
    pub fn q(&self) -> &Coefficient {
        &self.q
    }
    pub fn s(&self) -> &Coefficient {
        &self.s
    }
    pub fn r(&self) -> &Coefficient {
        &self.r
    }
    pub fn vbar(&self) -> &Coefficient {
        &self.vbar
    }

    /// Copy of the model with a different regularisation weight.
    pub fn with_rho(&self, rho: f64) -> Self {
        let mut m = self.clone();
        m.rho = rho;
        m
    }

    /// Copy of the model with a different reference covariance.
    pub fn with_vbar(&self, vbar: Coefficient) -> Result<Self> {
        if vbar.shape() != (self.action_dim, self.action_dim) {
            return Err(dim_err("vbar", (self.action_dim, self.action_dim), vbar.shape()));
        }
        let mut m = self.clone();
        m.vbar = vbar;
        Ok(m)
    }

    /// Sample the symmetric fields at `t` without any inversion.
    pub fn raw_sample(&self, t: f64) -> Result<RawSample> {
        Ok(RawSample {
            q: self.q.checked_at("Q", t)?,
            r: self.r.checked_at("R", t)?,
            vbar: self.vbar.checked_at("Vbar", t)?,
        })
    }

    /// Sample every coefficient at `t`. Fails on shape mismatch or a
    /// non-invertible `V̄(t)`.
    pub fn coefs(&self, t: f64) -> Result<Coefs> {
        let vbar = symmetrize(&self.vbar.checked_at("Vbar", t)?);
        let vbar_inv = sym_inverse(&vbar)?;
        let log_det_vbar = log_det_pd(&vbar)?;
        let c = self
            .c
            .iter()
            .enumerate()
            .map(|(j, c)| c.checked_at(&format!("C[{j}]"), t))
            .collect::<Result<Vec<_>>>()?;
        let d = self
            .d
            .iter()
            .enumerate()
            .map(|(j, d)| d.checked_at(&format!("D[{j}]"), t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Coefs {
            t,
            a: self.a.checked_at("A", t)?,
            b: self.b.checked_at("B", t)?,
            c,
            d,
            q: symmetrize(&self.q.checked_at("Q", t)?),
            s: self.s.checked_at("S", t)?,
            r: symmetrize(&self.r.checked_at("R", t)?),
            rho: self.rho,
            vbar,
            vbar_inv,
            log_det_vbar,
        })
    }
}

impl Coefs {
    /// `Σⱼ Dⱼᵀ P Dⱼ + R + ρ V̄⁻¹`.
    pub fn curvature(&self, p: &Mat) -> Mat {
        let mut m = &self.r + &self.vbar_inv * self.rho;
        for dj in &self.d {
            m += dj.transpose() * p * dj;
        }
        symmetrize(&m)
    }

    /// `Bᵀ P + Σⱼ Dⱼᵀ P Cⱼ + S`.
    pub fn cross(&self, p: &Mat) -> Mat {
        let mut m = self.b.transpose() * p + &self.s;
        for (cj, dj) in self.c.iter().zip(&self.d) {
            m += dj.transpose() * p * cj;
        }
        m
    }

    /// Right-hand side `L` of the backward Lyapunov equation `dP/dt + L = 0`.
    pub fn lyapunov_rhs(&self, p: &Mat, k: &Mat) -> Mat {
        let ak = &self.a + &self.b * k;
        let mut out = ak.transpose() * p + p * &ak + &self.q;
        for (cj, dj) in self.c.iter().zip(&self.d) {
            let ck = cj + dj * k;
            out += ck.transpose() * p * &ck;
        }
        let sk = self.s.transpose() * k;
        out += &sk + sk.transpose();
        out += k.transpose() * (&self.r + &self.vbar_inv * self.rho) * k;
        symmetrize(&out)
    }

    /// Right-hand side of the backward Riccati equation and the minimising gain.
    pub fn riccati_rhs(&self, p: &Mat) -> Result<(Mat, Mat)> {
        let m = self.curvature(p);
        let m_inv = sym_inverse(&m).map_err(|e| match e {
            LqcError::NotPositiveDefinite { min_eig } => LqcError::StrongRegularityLost { t: self.t, min_eig },
            other => other,
        })?;
        let cross = self.cross(p);
        let mut out = self.a.transpose() * p + p * &self.a + &self.q;
        for cj in &self.c {
            out += cj.transpose() * p * cj;
        }
        out -= cross.transpose() * &m_inv * &cross;
        let gain = -(&m_inv * &cross);
        Ok((symmetrize(&out), gain))
    }

    /// Drift of the forward second-moment equation.
    pub fn covariance_rhs(&self, sigma: &Mat, k: &Mat, v: &Mat) -> Mat {
        let ak = &self.a + &self.b * k;
        let mut out = &ak * sigma + sigma * ak.transpose();
        for (cj, dj) in self.c.iter().zip(&self.d) {
            let ck = cj + dj * k;
            out += &ck * sigma * ck.transpose() + dj * v * dj.transpose();
        }
        symmetrize(&out)
    }

    /// Integrand of the backward equation for φ. The entropy constant is
    /// written as `tr(V̄⁻¹(V − V̄))` so it vanishes exactly at `V = V̄`.
    pub fn phi_rhs(&self, p: &Mat, v: &Mat, log_det_v: f64) -> f64 {
        let mut m = self.r.clone();
        for dj in &self.d {
            m += dj.transpose() * p * dj;
        }
        0.5 * m.dot(v) + 0.5 * self.rho * self.entropy_constant(v, log_det_v)
    }

    /// `tr(V̄⁻¹V) − k + ln det V̄ − ln det V`, the `K`-free part of twice the
    /// relative entropy.
    pub fn entropy_constant(&self, v: &Mat, log_det_v: f64) -> f64 {
        (&self.vbar_inv * (v - &self.vbar)).trace() + self.log_det_vbar - log_det_v
    }
}

/// Builder for [`LqcModel`]; unspecified coefficients default to zero,
/// `V̄` to the identity, `ρ` to 1 and `Σ₀` to zero.
#[derive(Debug, Clone)]
pub struct LqcModelBuilder {
    state_dim: usize,
    action_dim: usize,
    horizon: f64,
    a: Option<Coefficient>,
    b: Option<Coefficient>,
    channels: Vec<(Coefficient, Coefficient)>,
    q: Option<Coefficient>,
    s: Option<Coefficient>,
    r: Option<Coefficient>,
    g: Option<Mat>,
    rho: f64,
    vbar: Option<Coefficient>,
    sigma0: Option<Mat>,
    initial_law: Option<InitialLaw>,
}

impl LqcModelBuilder {
    fn new(state_dim: usize, action_dim: usize, horizon: f64) -> Self {
        Self {
            state_dim,
            action_dim,
            horizon,
            a: None,
            b: None,
            channels: Vec::new(),
            q: None,
            s: None,
            r: None,
            g: None,
            rho: 1.0,
            vbar: None,
            sigma0: None,
            initial_law: None,
        }
    }

    pub fn a(mut self, a: Coefficient) -> Self {
        self.a = Some(a);
        self
    }
    pub fn b(mut self, b: Coefficient) -> Self {
        self.b = Some(b);
        self
    }
    /// Append a noise channel with state loading `c` and action loading `d`.
    pub fn noise_channel(mut self, c: Coefficient, d: Coefficient) -> Self {
        self.channels.push((c, d));
        self
    }
    pub fn q(mut self, q: Coefficient) -> Self {
        self.q = Some(q);
        self
    }
    pub fn s(mut self, s: Coefficient) -> Self {
        self.s = Some(s);
        self
    }
    pub fn r(mut self, r: Coefficient) -> Self {
        self.r = Some(r);
        self
    }
    pub fn g(mut self, g: Mat) -> Self {
        self.g = Some(g);
        self
    }
    pub fn rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }
    pub fn vbar(mut self, vbar: Coefficient) -> Self {
        self.vbar = Some(vbar);
        self
    }
    /// Second moment `E[ξ₀ ξ₀ᵀ]`.
    pub fn sigma0(mut self, sigma0: Mat) -> Self {
        self.sigma0 = Some(sigma0);
        self
    }
    /// Gaussian initial law; also sets `Σ₀ = cov + mean meanᵀ`.
    pub fn initial_law(mut self, mean: Vector, covariance: Mat) -> Self {
        self.sigma0 = Some(&covariance + &mean * mean.transpose());
        self.initial_law = Some(InitialLaw { mean, covariance });
        self
    }

    pub fn build(self) -> Result<LqcModel> {
        let (d, k) = (self.state_dim, self.action_dim);
        if d == 0 || k == 0 {
            return Err(LqcError::InvalidInput("state and action dimensions must be positive".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(LqcError::InvalidInput(format!("horizon must be positive, got {}", self.horizon)));
        }
        let check = |name: &str, coef: &Coefficient, shape: (usize, usize)| -> Result<()> {
            if coef.shape() != shape {
                return Err(dim_err(name, shape, coef.shape()));
            }
            Ok(())
        };
        let a = self.a.unwrap_or_else(|| Coefficient::zeros(d, d));
        let b = self.b.unwrap_or_else(|| Coefficient::zeros(d, k));
        let q = self.q.unwrap_or_else(|| Coefficient::zeros(d, d));
        let s = self.s.unwrap_or_else(|| Coefficient::zeros(k, d));
        let r = self.r.unwrap_or_else(|| Coefficient::zeros(k, k));
        let vbar = self.vbar.unwrap_or_else(|| Coefficient::constant(Mat::identity(k, k)));
        check("A", &a, (d, d))?;
        check("B", &b, (d, k))?;
        check("Q", &q, (d, d))?;
        check("S", &s, (k, d))?;
        check("R", &r, (k, k))?;
        check("Vbar", &vbar, (k, k))?;
        let mut channels = self.channels;
        if channels.is_empty() {
            channels.push((Coefficient::zeros(d, d), Coefficient::zeros(d, k)));
        }
        for (j, (c, dd)) in channels.iter().enumerate() {
            check(&format!("C[{j}]"), c, (d, d))?;
            check(&format!("D[{j}]"), dd, (d, k))?;
        }
        let g = self.g.unwrap_or_else(|| Mat::zeros(d, d));
        if g.shape() != (d, d) {
            return Err(dim_err("G", (d, d), g.shape()));
        }
        let sigma0 = self.sigma0.unwrap_or_else(|| Mat::zeros(d, d));
        if sigma0.shape() != (d, d) {
            return Err(dim_err("Sigma0", (d, d), sigma0.shape()));
        }
        if let Some(law) = &self.initial_law {
            if law.mean.len() != d {
                return Err(dim_err("xi0_mean", (d, 1), (law.mean.len(), 1)));
            }
            if law.covariance.shape() != (d, d) {
                return Err(dim_err("xi0_cov", (d, d), law.covariance.shape()));
            }
        }
        let (c, dn) = channels.into_iter().unzip();
        Ok(LqcModel {
            state_dim: d,
            action_dim: k,
            horizon: self.horizon,
            a,
            b,
            c,
            d: dn,
            q,
            s,
            r,
            g: ingest_symmetric("G", &g),
            rho: self.rho,
            vbar,
            sigma0: ingest_symmetric("Sigma0", &sigma0),
            initial_law: self.initial_law.map(|law| InitialLaw {
                covariance: ingest_symmetric("xi0_cov", &law.covariance),
                mean: law.mean,
            }),
        })
    }
}

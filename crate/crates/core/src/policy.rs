//! Piecewise-constant Gaussian feedback policies `θ = (K, V)`.

use crate::error::{dim_err, LqcError, Result};
use crate::grid::TimeGrid;
use crate::linalg::{eigenvalues, ingest_symmetric, Mat};

/// Gaussian feedback policy, constant on each interval of its grid.
///
/// On `[tᵢ, tᵢ₊₁)` the action law is `N(Kᵢ x, Vᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    grid: TimeGrid,
    gains: Vec<Mat>,
    covs: Vec<Mat>,
    epsilon: f64,
}

impl Policy {
    /// Build a policy; every `V` is symmetrised and must be positive definite.
    pub fn new(grid: TimeGrid, gains: Vec<Mat>, covs: Vec<Mat>) -> Result<Self> {
        let n = grid.num_intervals();
        if gains.len() != n || covs.len() != n {
            return Err(LqcError::InvalidInput(format!(
                "policy needs {n} gains and covariances, got {} and {}",
                gains.len(),
                covs.len()
            )));
        }
        let (k, d) = gains[0].shape();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        let mut sym = Vec::with_capacity(n);
        for (i, (g, v)) in gains.iter().zip(&covs).enumerate() {
            if g.shape() != (k, d) {
                return Err(dim_err(format!("K[{i}]"), (k, d), g.shape()));
            }
            if v.shape() != (k, k) {
                return Err(dim_err(format!("V[{i}]"), (k, k), v.shape()));
            }
            let v = ingest_symmetric("V", v);
            let ev = eigenvalues(&v);
            if !(ev.min() > 0.0) {
                return Err(LqcError::NotPositiveDefinite { min_eig: ev.min() });
            }
            lo = lo.min(ev.min());
            hi = hi.max(ev.max());
            sym.push(v);
        }
        let epsilon = lo.min(1.0 / hi);
        Ok(Self {
            grid,
            gains,
            covs: sym,
            epsilon,
        })
    }

    /// Time-constant policy on `grid`.
    pub fn constant(grid: TimeGrid, k: Mat, v: Mat) -> Result<Self> {
        let n = grid.num_intervals();
        Self::new(grid, vec![k; n], vec![v; n])
    }

    /// Skip validation; used for iterates that may have left the admissible set.
    pub(crate) fn from_parts_unchecked(grid: TimeGrid, gains: Vec<Mat>, covs: Vec<Mat>) -> Self {
        let epsilon = covs
            .iter()
            .map(|v| {
                let ev = eigenvalues(v);
                ev.min().min(1.0 / ev.max())
            })
            .fold(f64::INFINITY, f64::min);
        Self {
            grid,
            gains,
            covs,
            epsilon,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn gains(&self) -> &[Mat] {
        &self.gains
    }
    pub fn covariances(&self) -> &[Mat] {
        &self.covs
    }
    pub fn k(&self, i: usize) -> &Mat {
        &self.gains[i]
    }
    pub fn v(&self, i: usize) -> &Mat {
        &self.covs[i]
    }
    pub fn action_dim(&self) -> usize {
        self.gains[0].nrows()
    }
    pub fn state_dim(&self) -> usize {
        self.gains[0].ncols()
    }
    pub fn num_intervals(&self) -> usize {
        self.gains.len()
    }

    /// Largest `ε` with `ε I ⪯ Vᵢ ⪯ ε⁻¹ I` on every interval, recorded at
    /// construction.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `true` when every `V` value is positive definite.
    pub fn is_admissible(&self) -> bool {
        self.epsilon > 0.0 && self.epsilon.is_finite()
    }

    /// `‖K‖_{L²}` with the Frobenius norm pointwise.
    pub fn k_l2_norm(&self) -> f64 {
        self.gains
            .iter()
            .enumerate()
            .map(|(i, k)| self.grid.step(i) * k.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Smallest and largest eigenvalue of `V` over all intervals.
    pub fn v_eig_range(&self) -> (f64, f64) {
        self.covs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let ev = eigenvalues(v);
            (lo.min(ev.min()), hi.max(ev.max()))
        })
    }

    /// Value on the interval containing `t`.
    pub fn at(&self, t: f64) -> (&Mat, &Mat) {
        let i = self.grid.interval_index(t);
        (&self.gains[i], &self.covs[i])
    }

    /// The same policy expressed on a refinement of its grid.
    pub fn refine_to(&self, fine: &TimeGrid) -> Result<Self> {
        let map = fine.interval_map(&self.grid)?;
        Ok(Self {
            grid: fine.clone(),
            gains: map.iter().map(|&i| self.gains[i].clone()).collect(),
            covs: map.iter().map(|&i| self.covs[i].clone()).collect(),
            epsilon: self.epsilon,
        })
    }
}

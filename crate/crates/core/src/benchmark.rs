//! The three-asset exploratory mean-variance problem used as the reference
//! benchmark, plus the registry of named time-varying coefficients.

use std::f64::consts::PI;

use crate::error::{LqcError, Result};
use crate::grid::TimeGrid;
use crate::linalg::{psd_sqrt, Mat, Vector};
use crate::model::{Coefficient, LqcModel};
use crate::policy::Policy;

pub const HORIZON: f64 = 1.0;
pub const MU: f64 = 0.5;
pub const RHO: f64 = 0.01;
pub const VBAR_SCALE: f64 = 0.1;
pub const XI0_MEAN: f64 = 0.5;
pub const XI0_VAR: f64 = 0.01;
pub const FINE_INTERVALS: usize = 128;
pub const SCALED_TAU: f64 = 0.01;
pub const UNSCALED_TAU: f64 = 0.08;
pub const EPSILON: f64 = 0.01;
pub const MESHES: [usize; 5] = [8, 16, 32, 64, 128];
pub const MC_PATHS: usize = 100_000;
pub const REPETITIONS: usize = 10;

/// Gram matrix `DᵀD` of the action noise loadings.
pub fn dtd() -> Mat {
    Mat::from_row_slice(3, 3, &[0.5, 0.25, -0.125, 0.25, 1.0, -0.25, -0.125, -0.25, 0.5])
}

/// Noise loadings `D⁽ʲ⁾` (1×3 each): the rows of the symmetric root of `DᵀD`.
pub fn noise_loadings() -> Vec<Mat> {
    let root = psd_sqrt(&dtd()).expect("DᵀD is positive definite");
    (0..3).map(|j| root.rows(j, 1).into_owned()).collect()
}

/// `B_t = (0.4, 0.8, 0.4) + 0.2 sin(2πt)·(1, 1, 1)`.
pub fn sinusoidal_b(t: f64) -> Mat {
    let s = 0.2 * (2.0 * PI * t).sin();
    Mat::from_row_slice(1, 3, &[0.4 + s, 0.8 + s, 0.4 + s])
}

/// Named time-varying coefficients available to configuration files.
pub fn coefficient_preset(name: &str) -> Option<Coefficient> {
    match name {
        "sinusoidal_B" => Some(Coefficient::function(1, 3, "sinusoidal_B", sinusoidal_b)),
        _ => None,
    }
}

pub fn coefficient_preset_names() -> &'static [&'static str] {
    &["sinusoidal_B"]
}

/// The benchmark model: `d = 1`, `k = 3`, three noise channels, zero state
/// loadings and running costs, terminal weight `μ`.
pub fn mean_variance_model() -> LqcModel {
    let mut b = LqcModel::builder(1, 3, HORIZON)
        .b(coefficient_preset("sinusoidal_B").expect("registered"))
        .g(Mat::from_element(1, 1, MU))
        .rho(RHO)
        .vbar(Coefficient::constant(Mat::identity(3, 3) * VBAR_SCALE))
        .initial_law(Vector::from_element(1, XI0_MEAN), Mat::from_element(1, 1, XI0_VAR));
    for dj in noise_loadings() {
        b = b.noise_channel(Coefficient::zeros(1, 1), Coefficient::constant(dj));
    }
    b.build().expect("benchmark model is well formed")
}

/// `K⁰ ≡ (1/3, 1/3, 1/3)ᵀ`, `V⁰ ≡ 0.1·DᵀD` on `grid`.
pub fn initial_policy(grid: &TimeGrid) -> Result<Policy> {
    if (grid.horizon() - HORIZON).abs() > 1e-12 {
        return Err(LqcError::Grid(format!("benchmark horizon is {HORIZON}, grid ends at {}", grid.horizon())));
    }
    Policy::constant(grid.clone(), Mat::from_element(3, 1, 1.0 / 3.0), dtd() * 0.1)
}

/// Uniform grid with `n` intervals on the benchmark horizon.
pub fn mesh(n: usize) -> TimeGrid {
    TimeGrid::uniform(HORIZON, n).expect("positive interval count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loadings_reproduce_gram() {
        let ds = noise_loadings();
        let gram = ds.iter().fold(Mat::zeros(3, 3), |acc, d| acc + d.transpose() * d);
        assert!((gram - dtd()).norm() < 1e-14);
    }

    #[test]
    fn model_constants() {
        let m = mean_variance_model();
        assert_eq!((m.state_dim(), m.action_dim(), m.noise_channels()), (1, 3, 3));
        assert!((m.sigma0()[(0, 0)] - 0.26).abs() < 1e-15);
        let b = m.b().at(0.25);
        assert!((b[(0, 1)] - 1.0).abs() < 1e-15);
        let k0 = initial_policy(&mesh(8)).unwrap();
        assert_eq!(k0.num_intervals(), 8);
        assert!((k0.v(3)[(1, 1)] - 0.1).abs() < 1e-15);
    }
}

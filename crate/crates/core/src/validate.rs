//! Checks of the standing assumptions on a model.

use std::fmt;

use crate::error::{dim_err, Result};
use crate::grid::TimeGrid;
use crate::linalg::{asymmetry, min_eigenvalue, EIG_FLOOR};
use crate::model::{Coefficient, LqcModel};

/// Symmetry tolerance for fields that should be symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RhoNotPositive { rho: f64 },
    VbarNotUniformlyPd { t: f64, min_eig: f64 },
    NotSymmetric { field: String, t: Option<f64>, asymmetry: f64 },
    Sigma0NotPsd { min_eig: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RhoNotPositive { rho } => write!(f, "rho must be positive (got {rho})"),
            Violation::VbarNotUniformlyPd { t, min_eig } => {
                write!(f, "Vbar not uniformly positive definite (min eigenvalue {min_eig:e} at t = {t})")
            }
            Violation::NotSymmetric { field, t, asymmetry } => match t {
                Some(t) => write!(f, "{field} not symmetric at t = {t} (asymmetry {asymmetry:e})"),
                None => write!(f, "{field} not symmetric (asymmetry {asymmetry:e})"),
            },
            Violation::Sigma0NotPsd { min_eig } => {
                write!(f, "Sigma0 not positive semidefinite (min eigenvalue {min_eig:e})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Smallest eigenvalue of `V̄` over the grid nodes.
    pub vbar_margin: f64,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.to_string()).collect()
    }
}

fn check_shape(name: &str, coef: &Coefficient, t: f64) -> Result<nalgebra::DMatrix<f64>> {
    let m = coef.at(t);
    if m.shape() != coef.shape() {
        return Err(dim_err(format!("{name}({t})"), coef.shape(), m.shape()));
    }
    Ok(m)
}

/// Validate `model` on the nodes of `grid`. Dimension mismatches are hard
/// errors; assumption failures are collected in the report.
pub fn validate_model(model: &LqcModel, grid: &TimeGrid) -> Result<ValidationReport> {
    if (grid.horizon() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(crate::error::LqcError::Grid(format!(
            "grid ends at {} but the horizon is {}",
            grid.horizon(),
            model.horizon()
        )));
    }
    let mut violations = Vec::new();
    if !(model.rho() > 0.0) {
        violations.push(Violation::RhoNotPositive { rho: model.rho() });
    }
    let mut margin = f64::INFINITY;
    let mut worst_t = 0.0;
    for &t in grid.nodes() {
        check_shape("A", model.a(), t)?;
        check_shape("B", model.b(), t)?;
        check_shape("S", model.s(), t)?;
        for (j, (c, d)) in model.c().iter().zip(model.d()).enumerate() {
            check_shape(&format!("C[{j}]"), c, t)?;
            check_shape(&format!("D[{j}]"), d, t)?;
        }
        for (name, coef) in [("Q", model.q()), ("R", model.r()), ("Vbar", model.vbar())] {
            let m = check_shape(name, coef, t)?;
            let asym = asymmetry(&m);
            if asym > SYMMETRY_TOL {
                violations.push(Violation::NotSymmetric {
                    field: name.to_string(),
                    t: Some(t),
                    asymmetry: asym,
                });
            }
            if name == "Vbar" {
                let ev = min_eigenvalue(&m);
                if ev < margin {
                    margin = ev;
                    worst_t = t;
                }
            }
        }
    }
    if !(margin > EIG_FLOOR) {
        violations.push(Violation::VbarNotUniformlyPd {
            t: worst_t,
            min_eig: margin,
        });
    }
    let s0 = min_eigenvalue(model.sigma0());
    if s0 < -EIG_FLOOR {
        violations.push(Violation::Sigma0NotPsd { min_eig: s0 });
    }
    Ok(ValidationReport {
        violations,
        vbar_margin: margin,
    })
}

use crate::error::{dim_err, Result};
use crate::linalg::{log_det_pd, sym_inverse, symmetrize, Mat};

/// `E[H(N(Kx, V) ‖ N(0, V̄))]` for `x` with second moment `E[xxᵀ] = M`:
///
/// `½(tr(Kᵀ V̄⁻¹ K M) + tr(V̄⁻¹ V) − k + ln det V̄ − ln det V)`.
pub fn relative_entropy_gaussian(k_gain: &Mat, v: &Mat, vbar: &Mat, second_moment: &Mat) -> Result<f64> {
    let (k, d) = k_gain.shape();
    if v.shape() != (k, k) {
        return Err(dim_err("V", (k, k), v.shape()));
    }
    if vbar.shape() != (k, k) {
        return Err(dim_err("Vbar", (k, k), vbar.shape()));
    }
    if second_moment.shape() != (d, d) {
        return Err(dim_err("second_moment", (d, d), second_moment.shape()));
    }
    let v = symmetrize(v);
    let vbar = symmetrize(vbar);
    let vbar_inv = sym_inverse(&vbar)?;
    let log_ratio = log_det_pd(&vbar)? - log_det_pd(&v)?;
    let mean_term = (k_gain.transpose() * &vbar_inv * k_gain).dot(second_moment);
    let cov_term = (&vbar_inv * (&v - &vbar)).trace();
    Ok(0.5 * (mean_term + cov_term + log_ratio))
}

//! Central-difference gradient verification.

use alloc::format;
use alloc::vec::Vec;

use super::{Result, Tensor, TensorError};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct FdiffReport {
    /// Max over sampled coordinates of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat coordinate)` where the max occurred.
    pub worst: (usize, usize),
}

/// Compare analytic gradients of a scalar function against central
/// differences at step `eps`, sampling at most `max_coords_per_tensor`
/// evenly spaced coordinates per parameter tensor.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    max_coords_per_tensor: usize,
    mut f: F,
) -> Result<FdiffReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            detail: "eps must be positive".into(),
        });
    }
    if params.len() != analytic.len() {
        return Err(TensorError::ShapeMismatch {
            op: "finite_diff_check",
            detail: format!("{} params vs {} gradients", params.len(), analytic.len()),
        });
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FdiffReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: (0, 0),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "finite_diff_check",
                detail: format!(
                    "gradient {pi} has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    params[pi].shape()
                ),
            });
        }
        let numel = params[pi].numel();
        let count = numel.min(max_coords_per_tensor).max(usize::from(numel > 0));
        for s in 0..count {
            let coord = if numel <= max_coords_per_tensor {
                s
            } else {
                s * numel / count
            };
            let orig = work[pi].data()[coord];

            work[pi].data_mut()[coord] = orig + eps;
            let plus = f(&work)?;
            work[pi].data_mut()[coord] = orig - eps;
            let minus = f(&work)?;
            work[pi].data_mut()[coord] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_diff_check",
                    detail: format!(
                        "evaluation at parameter {pi} coordinate {coord} gave ({plus}, {minus})"
                    ),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, coord);
            }
        }
    }
    Ok(report)
}

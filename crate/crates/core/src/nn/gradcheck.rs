//! Central finite-difference verification of analytic gradients.

use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation changed a ReLU mask, pooling
    /// winner or mined-negative set; the finite difference straddles a kink
    /// there and says nothing about the analytic gradient.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

fn nudge<M: Parameterized<f64> + ?Sized>(model: &mut M, target: &str, index: usize, delta: f64) {
    model.visit_params_mut("", &mut |name, p| {
        if name == target {
            p.data_mut()[index] += delta;
        }
    });
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn(model, backward)` runs a forward pass (plus backward when asked)
/// and returns the loss together with a hash of the discrete decisions the
/// pass made. `max_coords` limits how many coordinates of each parameter
/// tensor are probed (evenly spaced); `None` checks all of them.
pub fn gradient_check<M, F>(
    model: &mut M,
    eps: f64,
    max_coords: Option<usize>,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    M: Parameterized<f64> + ?Sized,
    F: FnMut(&mut M, bool) -> Result<(f64, u64)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(vec![format!("eps must be in (0, 1e-2], got {eps}")]));
    }
    model.zero_grad();
    let (_, base_sig) = loss_fn(model, true)?;
    let mut analytic = Vec::new();
    model.visit_params("", &mut |name, p| {
        analytic.push((name, p.grad().map(<[f64]>::to_vec).unwrap_or_default()));
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for (name, grad) in &analytic {
        if grad.is_empty() {
            return Err(Error::MissingGrad(name.clone()));
        }
        let stride = match max_coords {
            Some(m) if m > 0 && grad.len() > m => grad.len().div_ceil(m),
            _ => 1,
        };
        for idx in (0..grad.len()).step_by(stride) {
            nudge(model, name, idx, eps);
            let (plus, sig_plus) = loss_fn(model, false)?;
            nudge(model, name, idx, -2.0 * eps);
            let (minus, sig_minus) = loss_fn(model, false)?;
            nudge(model, name, idx, eps);
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

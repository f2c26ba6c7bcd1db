use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::tensor::l2_norm;

/// Default cap on inner gradient-descent iterations.
pub const DEFAULT_INNER_ITERS: usize = 500;
/// Inner solve stops once the proximal objective's gradient norm drops below this.
pub const INNER_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoreauProbeResult {
    /// Proximal point `x_hat`.
    pub prox_point: Vec<f64>,
    /// `2 alpha_i (x_i - x_hat_i)` per group, flattened.
    pub gradient: Vec<f64>,
    pub sq_norm: f64,
    /// Gradient norm of the proximal objective at `x_hat`.
    pub residual: f64,
    pub iterations: usize,
    /// `g(x_hat) + sum_i alpha_i |x_hat_i - x_i|^2`.
    pub envelope_value: f64,
}

/// Inner step size `1 / (2 (max alpha + smoothness of g))`.
pub fn default_inner_lr(alpha: &[f64], g_smoothness: f64) -> f64 {
    let max_alpha = alpha.iter().copied().fold(0.0f64, f64::max);
    1.0 / (2.0 * (max_alpha + g_smoothness))
}

/// Gradient of the Moreau envelope with group-wise parameter
/// `mu_i = 1 / (2 alpha_i)`.
///
/// Solves `min_z g(z) + sum_i alpha_i |z_i - x_i|^2` by gradient descent
/// from `z = x`, then returns `2 alpha_i (x_i - x_hat_i)` per group.
pub fn moreau_grad<O>(
    objective: &O,
    x: &[f64],
    alpha: &[f64],
    inner_iters: usize,
    inner_lr: f64,
) -> Result<MoreauProbeResult>
where
    O: Objective + ?Sized,
{
    let groups = objective.groups();
    if alpha.len() != groups.len() {
        return Err(Error::shape("moreau_grad", "one alpha per group"));
    }
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidArgument("alpha must be positive in every group".into()));
    }
    if !(inner_lr > 0.0) {
        return Err(Error::InvalidArgument("inner-lr must be positive".into()));
    }
    let mut z = x.to_vec();
    let mut iterations = 0;
    let (mut value, mut residual);
    loop {
        let (gv, mut grad) = objective.value_and_grad(&z)?;
        value = gv;
        for (r, a) in groups.iter().zip(alpha) {
            for j in r.clone() {
                grad[j] += 2.0 * a * (z[j] - x[j]);
            }
        }
        residual = l2_norm(&grad);
        if !residual.is_finite() || !value.is_finite() {
            return Err(Error::NonFinite { op: "moreau inner solve" });
        }
        if residual < INNER_TOL || iterations == inner_iters {
            break;
        }
        for (zj, gj) in z.iter_mut().zip(&grad) {
            *zj -= inner_lr * gj;
        }
        iterations += 1;
    }
    let mut gradient = vec![0.0; x.len()];
    let mut penalty = 0.0;
    for (r, a) in groups.iter().zip(alpha) {
        for j in r.clone() {
            gradient[j] = 2.0 * a * (x[j] - z[j]);
            penalty += a * (z[j] - x[j]).powi(2);
        }
    }
    let sq_norm = gradient.iter().map(|v| v * v).sum();
    Ok(MoreauProbeResult {
        prox_point: z,
        gradient,
        sq_norm,
        residual,
        iterations,
        envelope_value: value + penalty,
    })
}

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{default_hvp_eps, hvp};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::tensor::{dot, l2_norm};

const MAX_RESTARTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessOptions {
    pub max_iters: usize,
    /// Convergence threshold on successive Rayleigh quotients, relative to
    /// `max(1, |quotient|)`.
    pub tol: f64,
    /// Finite-difference step; defaults to `1e-4 * (1 + |x|_inf)`.
    pub eps: Option<f64>,
    /// Re-run on `H + |lambda| I` when the dominant eigenvalue is negative.
    pub shift_negative: bool,
}

impl Default for SharpnessOptions {
    fn default() -> Self {
        SharpnessOptions {
            max_iters: 100,
            tol: 1e-9,
            eps: None,
            shift_negative: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessResult {
    /// Rayleigh quotient at termination.
    pub eigenvalue: f64,
    pub rayleigh_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    /// The dominant eigenvalue came out negative.
    pub negative: bool,
    /// `eigenvalue` is the largest algebraic eigenvalue found after a shift.
    pub shifted: bool,
}

fn random_unit<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2_norm(&v);
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn power_iteration<R, F>(
    dim: usize,
    mut apply: F,
    opts: &SharpnessOptions,
    rng: &mut R,
) -> Result<SharpnessResult>
where
    R: Rng,
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if opts.max_iters == 0 {
        return Err(Error::InvalidArgument("max-iters must be >= 1".into()));
    }
    let mut restarts = 0;
    'restart: loop {
        let mut v = random_unit(dim, rng);
        let mut trace: Vec<f64> = Vec::new();
        for k in 1..=opts.max_iters {
            let w = apply(&v)?;
            let w_norm = l2_norm(&w);
            if w_norm == 0.0 {
                if restarts == MAX_RESTARTS {
                    return Err(Error::InvalidArgument(
                        "Hessian-vector product vanished for every start vector".into(),
                    ));
                }
                restarts += 1;
                continue 'restart;
            }
            let rq = dot(&v, &w);
            let done = trace
                .last()
                .is_some_and(|prev| (rq - prev).abs() < opts.tol * rq.abs().max(1.0));
            trace.push(rq);
            if done {
                return Ok(finish(trace, k, true, restarts));
            }
            v = w.into_iter().map(|x| x / w_norm).collect();
        }
        return Ok(finish(trace, opts.max_iters, false, restarts));
    }
}

fn finish(trace: Vec<f64>, iterations: usize, converged: bool, restarts: usize) -> SharpnessResult {
    let eigenvalue = *trace.last().expect("at least one iteration");
    SharpnessResult {
        eigenvalue,
        rayleigh_trace: trace,
        iterations,
        converged,
        restarts,
        negative: eigenvalue < 0.0,
        shifted: false,
    }
}

/// Dominant Hessian eigenvalue of `objective` at `x` by power iteration on
/// finite-difference Hessian-vector products.
///
/// Returns the largest-magnitude eigenvalue with its sign. With
/// `shift_negative`, a negative result triggers a second run on
/// `H + |lambda| I`, which targets the largest algebraic eigenvalue.
pub fn sharpness<O, R>(
    objective: &O,
    x: &[f64],
    opts: &SharpnessOptions,
    rng: &mut R,
) -> Result<SharpnessResult>
where
    O: Objective + ?Sized,
    R: Rng,
{
    if x.len() != objective.dim() {
        return Err(Error::shape("sharpness", "point dimension"));
    }
    let eps = opts.eps.unwrap_or_else(|| default_hvp_eps(x));
    let grad = |p: &[f64]| objective.grad(p);
    let first = power_iteration(x.len(), |v| hvp(grad, x, v, eps), opts, rng)?;
    if !(first.negative && opts.shift_negative) {
        return Ok(first);
    }
    let shift = first.eigenvalue.abs();
    let mut shifted = power_iteration(
        x.len(),
        |v| {
            let hv = hvp(grad, x, v, eps)?;
            Ok(hv.iter().zip(v).map(|(h, vi)| h + shift * vi).collect())
        },
        opts,
        rng,
    )?;
    shifted.eigenvalue -= shift;
    for q in &mut shifted.rayleigh_trace {
        *q -= shift;
    }
    shifted.negative = true;
    shifted.shifted = true;
    shifted.restarts += first.restarts;
    Ok(shifted)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

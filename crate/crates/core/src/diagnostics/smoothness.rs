use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::tensor::l2_norm;

/// Refinement steps per probe in [`probe_alpha`].
pub const DEFAULT_REFINE_STEPS: usize = 20;

/// Per-group smoothness estimates: the largest observed
/// `|grad_i f(x + d) - grad_i f(x)| / |d|` over group-local displacements `d`
/// of norm `radius`.
///
/// Each probe starts from a random direction and is refined by up to
/// `refine` power steps `d <- (grad_i f(x + d) - grad_i f(x))` rescaled to
/// `radius`, so on quadratics the estimate converges to the top curvature of
/// each diagonal block. Always a lower bound on the group's Lipschitz
/// constant.
pub fn probe_alpha<O, R>(
    objective: &O,
    x: &[f64],
    probes: usize,
    radius: f64,
    refine: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    O: Objective + ?Sized,
    R: Rng,
{
    if probes == 0 {
        return Err(Error::InvalidArgument("n-probes must be >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("probe radius must be > 0".into()));
    }
    let base = objective.grad(x)?;
    let mut out = Vec::new();
    for range in objective.groups() {
        let mut best = 0.0f64;
        for _ in 0..probes {
            let mut d: Vec<f64> = range.clone().map(|_| rng.sample(StandardNormal)).collect();
            let n = l2_norm(&d);
            d.iter_mut().for_each(|v| *v *= radius / n);
            let mut last = f64::NAN;
            for _ in 0..=refine {
                let mut shifted = x.to_vec();
                for (s, di) in shifted[range.clone()].iter_mut().zip(&d) {
                    *s += di;
                }
                let g = objective.grad(&shifted)?;
                let diff: Vec<f64> = g[range.clone()]
                    .iter()
                    .zip(&base[range.clone()])
                    .map(|(a, b)| a - b)
                    .collect();
                let diff_norm = l2_norm(&diff);
                let ratio = diff_norm / l2_norm(&d);
                best = best.max(ratio);
                if diff_norm == 0.0 || (ratio - last).abs() <= 1e-13 * ratio {
                    break;
                }
                last = ratio;
                d = diff.into_iter().map(|v| v * radius / diff_norm).collect();
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakConvexityReport {
    pub passed: bool,
    /// Largest `h(mid) - (h(a) + h(b)) / 2` seen; positive means a violation.
    pub worst_violation: f64,
    pub segments: usize,
}

/// Sampled midpoint-convexity test of `h(z) = g(z) + sum_i alpha_i/2 |z_i|^2`
/// on random segments around `x`. A falsification test, not a proof.
///
/// A segment passes when the violation stays below
/// `tol + 1e-12 * (|h(a)| + |h(b)|)`, the second term absorbing roundoff.
pub fn weak_convexity_check<O, R>(
    objective: &O,
    x: &[f64],
    alpha: &[f64],
    segments: usize,
    radius: f64,
    tol: f64,
    rng: &mut R,
) -> Result<WeakConvexityReport>
where
    O: Objective + ?Sized,
    R: Rng,
{
    let groups = objective.groups();
    if alpha.len() != groups.len() {
        return Err(Error::shape("weak_convexity_check", "one alpha per group"));
    }
    let h = |z: &[f64]| -> Result<f64> {
        let g = objective.value(z)?;
        let quad: f64 = groups
            .iter()
            .zip(alpha)
            .map(|(r, a)| 0.5 * a * z[r.clone()].iter().map(|v| v * v).sum::<f64>())
            .sum();
        Ok(g + quad)
    };
    let mut worst = f64::NEG_INFINITY;
    let mut passed = true;
    for _ in 0..segments {
        let a: Vec<f64> = x.iter().map(|v| v + radius * rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = x.iter().map(|v| v + radius * rng.sample::<f64, _>(StandardNormal)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect();
        let (ha, hb, hm) = (h(&a)?, h(&b)?, h(&mid)?);
        let violation = hm - 0.5 * (ha + hb);
        worst = worst.max(violation);
        if violation > tol + 1e-12 * (ha.abs() + hb.abs()) {
            passed = false;
        }
    }
    Ok(WeakConvexityReport {
        passed,
        worst_violation: worst,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{FnObjective, Quadratic};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_of_isotropic_quadratic() {
        let q = Quadratic::diagonal(&[2.5; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = probe_alpha(&q, &[0.3, -0.1, 0.0, 1.0], 2, 0.1, 0, &mut rng).unwrap();
        assert!((a[0] - 2.5).abs() < 1e-8);
    }

    #[test]
    fn alpha_of_linear_function_is_zero() {
        let f = FnObjective::new(3, |x: &[f64]| Ok((x.iter().sum(), vec![1.0; 3])));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(probe_alpha(&f, &[0.0; 3], 3, 1.0, 5, &mut rng).unwrap(), vec![0.0]);
    }

    #[test]
    fn alpha_is_scale_invariant_on_quadratics() {
        let q = Quadratic::diagonal(&[4.0, 1.0, 3.0, 0.5]).with_groups(&[2, 2]).unwrap();
        let x = [0.2, 0.4, -0.3, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = probe_alpha(&q, &x, 3, 0.2, 60, &mut rng).unwrap();
        let b = probe_alpha(&q, &x, 3, 0.1, 60, &mut rng).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-8);
        }
        assert!((a[0] - 4.0).abs() < 1e-8 && (a[1] - 3.0).abs() < 1e-8);
    }

    fn neg_sq_norm(n: usize) -> FnObjective<impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>> {
        FnObjective::new(n, |x: &[f64]| {
            Ok((-x.iter().map(|v| v * v).sum::<f64>(), x.iter().map(|v| -2.0 * v).collect()))
        })
    }

    #[test]
    fn concave_function_needs_enough_alpha() {
        let f = neg_sq_norm(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = [0.5, -0.5, 1.0];
        let ok = weak_convexity_check(&f, &x, &[2.0], 20, 1.0, 1e-9, &mut rng).unwrap();
        assert!(ok.passed);
        assert!(ok.worst_violation.abs() < 1e-12);
        let bad = weak_convexity_check(&f, &x, &[1.0], 20, 1.0, 1e-9, &mut rng).unwrap();
        assert!(!bad.passed && bad.worst_violation > 0.0);
    }
}

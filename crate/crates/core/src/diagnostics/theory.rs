use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Constants of the convergence analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TheoryConstants {
    /// Per-group smoothness of the objective in the parameters.
    pub alpha: Vec<f64>,
    /// Optimality gap of the Moreau envelope at initialization.
    pub d: f64,
    /// Bound on the infinity norm of parameter gradients.
    pub g: f64,
    /// Variance constant.
    pub z: f64,
    /// Per-group gradient variance bounds.
    #[serde(default)]
    pub sigma: Vec<f64>,
    /// Error of the inner maximization oracle.
    pub eps: f64,
    /// Restricted strong convexity of the inner problem.
    pub c: f64,
    /// Restricted strong smoothness of the inner problem.
    pub s: f64,
    /// Moreau parameter per group; `1 / (2 alpha)` when omitted.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl TheoryConstants {
    pub fn alpha_max(&self) -> f64 {
        self.alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max alpha / min alpha`.
    pub fn kappa(&self) -> f64 {
        let min = self.alpha.iter().copied().fold(f64::INFINITY, f64::min);
        self.alpha_max() / min
    }

    pub fn mu(&self) -> Vec<f64> {
        self.mu
            .clone()
            .unwrap_or_else(|| self.alpha.iter().map(|a| 1.0 / (2.0 * a)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a > 0.0)) {
            return bad("alpha", "needs at least one entry, all positive");
        }
        for (key, v) in [("d", self.d), ("g", self.g), ("z", self.z), ("clip-lo", self.clip_lo)] {
            if !(v >= 0.0) {
                return bad(key, "must be >= 0");
            }
        }
        for (key, v) in [("eps", self.eps), ("c", self.c), ("s", self.s), ("clip-hi", self.clip_hi)] {
            if !(v > 0.0) {
                return bad(key, "must be > 0");
            }
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0)) {
            return bad("sigma", "must be >= 0");
        }
        if !(self.clip_lo <= self.clip_hi) {
            return bad("clip-lo", "must not exceed clip-hi");
        }
        Ok(())
    }
}

/// Inner iteration count, undefined unless `S / C < 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerIters {
    Steps(u64),
    Undefined,
}

impl Serialize for InnerIters {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            InnerIters::Steps(n) => s.serialize_u64(*n),
            InnerIters::Undefined => s.serialize_str("undefined (S/C >= 2)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatePlan {
    pub steps: u64,
    /// `1 / (U sqrt(T))`.
    pub eta: f64,
    /// `16 T L^2 Z^2 / U^2`.
    pub batch_size: f64,
    /// `4 eps |alpha|_inf + 2 kappa D G / sqrt(T)`.
    pub bound: f64,
    /// `ceil(C / (2C - S) * ln(8 |alpha|_inf / eps))`, at least 1.
    pub inner_iters: InnerIters,
}

/// Outer learning rate, batch size, stationarity bound and inner iteration
/// count prescribed for `steps` outer iterations. Pure arithmetic.
pub fn rate_calculator(consts: &TheoryConstants, steps: u64) -> Result<RatePlan> {
    consts.validate()?;
    if steps == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let t = steps as f64;
    let sqrt_t = t.sqrt();
    let (lo, hi) = (consts.clip_lo, consts.clip_hi);
    let eta = 1.0 / (hi * sqrt_t);
    let batch_size = 16.0 * t * lo * lo * consts.z * consts.z / (hi * hi);
    let alpha_max = consts.alpha_max();
    let bound = 4.0 * consts.eps * alpha_max + 2.0 * consts.kappa() * consts.d * consts.g / sqrt_t;
    let inner_iters = if consts.s / consts.c < 2.0 {
        let factor = consts.c / (2.0 * consts.c - consts.s);
        let n = (factor * (8.0 * alpha_max / consts.eps).ln()).ceil();
        InnerIters::Steps(n.max(1.0) as u64)
    } else {
        InnerIters::Undefined
    };
    Ok(RatePlan {
        steps,
        eta,
        batch_size,
        bound,
        inner_iters,
    })
}

/// Outer iterations `16 kappa D^2 G^2 / eps^2` needed for a stationarity
/// target `eps` in the oracle-free analysis.
pub fn outer_steps_for_target(consts: &TheoryConstants, target: f64) -> Result<f64> {
    consts.validate()?;
    if !(target > 0.0) {
        return Err(Error::InvalidArgument("target must be > 0".into()));
    }
    Ok(16.0 * consts.kappa() * consts.d.powi(2) * consts.g.powi(2) / target.powi(2))
}

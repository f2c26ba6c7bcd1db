//! Landscape and convergence instrumentation.
//!
//! All routines are read-only over a parameter vector and work on any
//! [`Objective`](crate::objective::Objective).

mod moreau;
mod sharpness;
mod smoothness;
mod theory;

pub use moreau::{default_inner_lr, moreau_grad, MoreauProbeResult, DEFAULT_INNER_ITERS, INNER_TOL};
pub use sharpness::{mean_std, sharpness, SharpnessOptions, SharpnessResult};
pub use smoothness::{probe_alpha, weak_convexity_check, WeakConvexityReport, DEFAULT_REFINE_STEPS};
pub use theory::{outer_steps_for_target, rate_calculator, InnerIters, RatePlan, TheoryConstants};

//! Large-batch adaptation with lightweight adversarial noise.
//!
//! The crate contains everything needed to run the method end to end at desk
//! scale without an external ML framework:
//!
//! * [`autodiff`]: a tape-based reverse-mode engine over dense `f64` tensors
//!   and a finite-difference Hessian-vector product.
//! * [`model`]: small embedding classifiers with layer-partitioned parameters.
//! * [`adversary`]: the divergence regularizer and projected gradient ascent
//!   on the input embeddings.
//! * [`optimizer`]: the group-wise clipped, normalized outer update and the
//!   Adam ablation.
//! * [`diagnostics`]: sharpness, smoothness probes, Moreau-envelope gradients,
//!   weak-convexity checks and the rate calculator.
//! * [`harness`]: synthetic datasets, a simulated data-parallel training
//!   loop, ablation modes and metric emission.

pub mod adversary;
pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! The adversarial regularizer and its inner maximization.
//!
//! A detached label `gamma` is built from the clean forward pass, and the
//! embeddings are pushed by projected gradient ascent on the divergence
//! between `gamma` and the model output at the perturbed embeddings. The
//! projection is a per-component clamp to an `omega` box around the clean
//! embeddings.

use std::ops::AddAssign;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Batch, Model, Reduction, Targets};
use crate::tensor::Tensor;

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    KlSym,
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    LabelProbability,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct AdvNoiseConfig {
    /// Inner ascent step size.
    pub rho: f64,
    /// Radius of the l-infinity box around the clean embeddings.
    pub omega: f64,
    /// Number of ascent steps.
    pub steps: usize,
    /// Regularization strength.
    pub lambda: f64,
    /// First epoch at which the adversary is enabled.
    pub t_start: usize,
    pub regularizer: RegularizerKind,
    pub label_source: LabelSource,
    /// Std of the Gaussian start around the clean embeddings; `omega` if unset.
    pub init_noise_std: Option<f64>,
}

impl Default for AdvNoiseConfig {
    fn default() -> Self {
        AdvNoiseConfig {
            rho: 1e-4,
            omega: 1e-5,
            steps: 1,
            lambda: 1.0,
            t_start: 3,
            regularizer: RegularizerKind::KlSym,
            label_source: LabelSource::LabelProbability,
            init_noise_std: None,
        }
    }
}

impl AdvNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("adversary.{key}"), msg));
        if !(self.rho > 0.0) {
            return bad("rho", "must be > 0");
        }
        if !(self.omega > 0.0) {
            return bad("omega", "must be > 0");
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if matches!(self.init_noise_std, Some(s) if !(s >= 0.0)) {
            return bad("init-noise-std", "must be >= 0");
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        self.init_noise_std.unwrap_or(self.omega)
    }
}

/// Logical forward/backward pass counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCount {
    pub forward: u64,
    pub backward: u64,
}

impl AddAssign for PassCount {
    fn add_assign(&mut self, rhs: Self) {
        self.forward += rhs.forward;
        self.backward += rhs.backward;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvOutcome {
    /// Final perturbed embeddings.
    pub y: Tensor,
    /// Batch-mean regularizer at `y`.
    pub r_value: f64,
    /// Batch-mean regularizer at `y_0, y_1, ..., y_T`.
    pub trace: Vec<f64>,
    /// Passes spent on the ascent only.
    pub cost: PassCount,
    /// Largest `|y - center|` seen after any projection.
    pub max_deviation: f64,
}

/// Label for the second player built from already computed outputs.
///
/// With `LabelProbability` this is the softmax of the outputs for the
/// symmetric KL regularizer and the raw outputs for the squared one. With
/// `GroundTruth` it is the one-hot class or the target value.
pub fn label_from_outputs(
    outputs: &Tensor,
    batch: &Batch,
    source: LabelSource,
    kind: RegularizerKind,
) -> Result<Tensor> {
    match source {
        LabelSource::LabelProbability => Ok(match kind {
            RegularizerKind::KlSym => autodiff::softmax(outputs),
            RegularizerKind::Squared => outputs.clone(),
        }),
        LabelSource::GroundTruth => match &batch.targets {
            Targets::Classes(_) => batch.target_tensor(outputs.shape()[1]),
            Targets::Values(_) => batch.target_tensor(1),
        },
    }
}

/// Detached label `gamma` for `batch` under the current parameters.
pub fn make_label(
    model: &Model,
    batch: &Batch,
    source: LabelSource,
    kind: RegularizerKind,
) -> Result<Tensor> {
    let outputs = model.predict(batch)?;
    label_from_outputs(&outputs, batch, source, kind)
}

/// Regularizer between the constant label `gamma` and the outputs at the
/// perturbed embeddings.
///
/// Symmetric KL is computed as `sum (p - gamma) (ln p - ln gamma)`, which
/// equals `KL(gamma || p) + KL(p || gamma)`, with both logarithms floored at
/// [`PROB_FLOOR`].
pub fn regularizer<'g>(
    gamma: &Tensor,
    outputs: Var<'g>,
    kind: RegularizerKind,
    reduction: Reduction,
) -> Result<Var<'g>> {
    let graph = outputs.graph();
    let shape = outputs.shape();
    if gamma.shape() != shape.as_slice() {
        return Err(Error::shape(
            "regularizer",
            format!("label {:?} vs outputs {shape:?}", gamma.shape()),
        ));
    }
    let rows = shape[0] as f64;
    let total = match kind {
        RegularizerKind::KlSym => {
            let p = outputs.softmax()?;
            let log_p = p.clamp(PROB_FLOOR, 1.0)?.ln()?;
            let g = graph.constant(gamma.clone());
            let log_g = graph.constant(gamma.map(|v| v.max(PROB_FLOOR).ln()));
            p.sub(&g)?.mul(&log_p.sub(&log_g)?)?.sum()?
        }
        RegularizerKind::Squared => {
            let g = graph.constant(gamma.clone());
            outputs.sub(&g)?.square()?.sum()?
        }
    };
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => total.scale(1.0 / rows),
    }
}

/// Batch-mean regularizer value outside any training graph.
pub fn regularizer_value(gamma: &Tensor, outputs: &Tensor, kind: RegularizerKind) -> Result<f64> {
    let graph = Graph::new();
    let out = graph.constant(outputs.clone());
    Ok(regularizer(gamma, out, kind, Reduction::Mean)?
        .item()
        .expect("scalar"))
}

/// Clamps every component of `y` into `[c - omega, c + omega]`.
///
/// The box edges are nudged inward by an ulp when rounding of `c ± omega`
/// would place them farther than `omega` from `c`, so `|y - c| <= omega`
/// holds exactly in floating point.
pub fn project(y: &Tensor, center: &Tensor, omega: f64) -> Result<Tensor> {
    if y.shape() != center.shape() {
        return Err(Error::shape(
            "project",
            format!("{:?} vs {:?}", y.shape(), center.shape()),
        ));
    }
    let data = y
        .data()
        .iter()
        .zip(center.data())
        .map(|(&v, &c)| {
            let mut hi = c + omega;
            while hi - c > omega {
                hi = hi.next_down();
            }
            let mut lo = c - omega;
            while c - lo > omega {
                lo = lo.next_up();
            }
            v.clamp(lo, hi)
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Clean embeddings plus Gaussian noise, projected into the box.
pub fn gaussian_start<R: Rng>(center: &Tensor, std: f64, omega: f64, rng: &mut R) -> Result<Tensor> {
    let noisy = if std > 0.0 {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
        let data = center.data().iter().map(|c| c + normal.sample(rng)).collect();
        Tensor::new(center.shape().to_vec(), data)?
    } else {
        center.clone()
    };
    project(&noisy, center, omega)
}

/// Result of [`ascend`].
#[derive(Clone, Debug, PartialEq)]
pub struct Ascent {
    pub y: Tensor,
    /// Objective at `y_0 .. y_{steps-1}`, as returned by the gradient oracle.
    pub values: Vec<f64>,
    pub max_deviation: f64,
}

/// Projected gradient ascent `y <- P(y + rho * grad r(y))` from `y0`.
///
/// `value_grad` returns the objective and its gradient at a point.
pub fn ascend<F>(
    y0: Tensor,
    center: &Tensor,
    rho: f64,
    omega: f64,
    steps: usize,
    mut value_grad: F,
) -> Result<Ascent>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let mut y = project(&y0, center, omega)?;
    let mut max_deviation = max_abs_diff(&y, center);
    let mut values = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (value, grad) = value_grad(&y)?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite { op: "pga" });
        }
        values.push(value);
        let stepped: Vec<f64> = y
            .data()
            .iter()
            .zip(grad.data())
            .map(|(a, g)| a + rho * g)
            .collect();
        y = project(&Tensor::new(y.shape().to_vec(), stepped)?, center, omega)?;
        max_deviation = max_deviation.max(max_abs_diff(&y, center));
    }
    Ok(Ascent {
        y,
        values,
        max_deviation,
    })
}

/// Projected gradient ascent on the regularizer, starting from the clean
/// embeddings `center` plus Gaussian noise.
///
/// The ascent direction is the gradient of the per-example regularizer sum,
/// so the step each example takes does not depend on the batch size.
pub fn pga_from<R: Rng>(
    model: &Model,
    center: &Tensor,
    gamma: &Tensor,
    cfg: &AdvNoiseConfig,
    rng: &mut R,
) -> Result<AdvOutcome> {
    let y0 = gaussian_start(center, cfg.noise_std(), cfg.omega, rng)?;
    let rows = center.shape()[0] as f64;
    let ascent = ascend(y0, center, cfg.rho, cfg.omega, cfg.steps, |y| {
        let graph = Graph::new();
        let bound = model.bind_frozen(&graph);
        let yv = graph.param(y.clone());
        let outputs = bound.logits_from_embeddings(yv)?;
        let r = regularizer(gamma, outputs, cfg.regularizer, Reduction::Sum)?;
        let value = r.item().expect("scalar") / rows;
        let grads = graph.backward(r)?;
        Ok((value, grads.wrt(yv)))
    })?;
    let r_value = regularizer_value(gamma, &model.predict_from_embeddings(&ascent.y)?, cfg.regularizer)?;
    if !r_value.is_finite() {
        return Err(Error::NonFinite { op: "pga" });
    }
    let mut trace = ascent.values;
    trace.push(r_value);
    Ok(AdvOutcome {
        y: ascent.y,
        r_value,
        trace,
        cost: PassCount {
            forward: cfg.steps as u64,
            backward: cfg.steps as u64,
        },
        max_deviation: ascent.max_deviation,
    })
}

/// Builds the label and runs [`pga_from`] on the batch's clean embeddings.
pub fn pga<R: Rng>(model: &Model, batch: &Batch, cfg: &AdvNoiseConfig, rng: &mut R) -> Result<AdvOutcome> {
    cfg.validate()?;
    let center = model.embeddings(batch)?;
    let gamma = make_label(model, batch, cfg.label_source, cfg.regularizer)?;
    pga_from(model, &center, &gamma, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Inputs, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs_to_logits(p: &[f64]) -> Tensor {
        Tensor::new(vec![1, p.len()], p.iter().map(|v| v.ln()).collect()).unwrap()
    }

    fn batch() -> Batch {
        Batch::new(
            Inputs::Tokens {
                ids: (0..64).map(|i| (i * 5 + 3) % 64).collect(),
                seq_len: 16,
            },
            Targets::Classes(vec![0, 1, 1, 0]),
        )
        .unwrap()
    }

    #[test]
    fn kl_sym_of_identical_distributions_is_zero() {
        let gamma = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let r = regularizer_value(&gamma, &probs_to_logits(&[0.3, 0.7]), RegularizerKind::KlSym).unwrap();
        assert!(r.abs() < 1e-15);
    }

    #[test]
    fn kl_sym_matches_direct_summation() {
        let gamma = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let r = regularizer_value(&gamma, &probs_to_logits(&[0.25, 0.75]), RegularizerKind::KlSym).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln() + 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.27465).abs() < 1e-5);
    }

    #[test]
    fn squared_regularizer() {
        let gamma = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let out = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        assert_eq!(regularizer_value(&gamma, &out, RegularizerKind::Squared).unwrap(), 9.0);
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let center = Tensor::vector(vec![0.0, 0.0]);
        let y = Tensor::vector(vec![2e-5, 3e-6]);
        let p = project(&y, &center, 1e-5).unwrap();
        assert_eq!(p.data(), &[1e-5, 3e-6]);
        assert_eq!(project(&p, &center, 1e-5).unwrap(), p);
    }

    #[test]
    fn projection_is_exact_for_large_centers() {
        let center = Tensor::vector(vec![12.345678, -1e3, 0.1]);
        let y = Tensor::vector(vec![100.0, -2e3, -7.0]);
        let p = project(&y, &center, 1e-5).unwrap();
        for (a, c) in p.data().iter().zip(center.data()) {
            assert!((a - c).abs() <= 1e-5);
        }
    }

    #[test]
    fn label_probability_rows_sum_to_one() {
        let model = Model::init(&ModelSpec::default(), 2).unwrap();
        let gamma = make_label(&model, &batch(), LabelSource::LabelProbability, RegularizerKind::KlSym).unwrap();
        for i in 0..gamma.rows() {
            assert!((gamma.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_uniform_label_and_ground_truth_is_one_hot() {
        let mut model = Model::init(&ModelSpec::default(), 2).unwrap();
        for t in &mut model.groups_mut().last_mut().unwrap().tensors {
            t.data_mut().fill(0.0);
        }
        let gamma = make_label(&model, &batch(), LabelSource::LabelProbability, RegularizerKind::KlSym).unwrap();
        assert!(gamma.data().iter().all(|&v| v == 0.5));
        let gt = make_label(&model, &batch(), LabelSource::GroundTruth, RegularizerKind::KlSym).unwrap();
        assert_eq!(gt.data(), &[1., 0., 0., 1., 0., 1., 1., 0.]);
    }

    #[test]
    fn ascent_on_concave_quadratic_increases_objective() {
        let center = Tensor::vector(vec![0.0; 3]);
        let c = [2e-6, -1e-6, 5e-7];
        let f = |y: &Tensor| {
            let d: Vec<f64> = y.data().iter().zip(&c).map(|(a, b)| a - b).collect();
            let value = -d.iter().map(|v| v * v).sum::<f64>();
            Ok((value, Tensor::vector(d.iter().map(|v| -2.0 * v).collect())))
        };
        let y0 = Tensor::vector(vec![8e-6, 8e-6, -8e-6]);
        let out = ascend(y0, &center, 0.3, 1e-5, 1, f).unwrap();
        let (r1, _) = f(&out.y).unwrap();
        assert!(r1 >= out.values[0]);
    }

    #[test]
    fn linear_ascent_hits_the_box_edge() {
        let omega = 1e-5;
        let center = Tensor::vector(vec![0.0]);
        let f = |_: &Tensor| Ok((0.0, Tensor::vector(vec![1.0])));
        for rho in [1e-9, 1e-4, 3.0] {
            let y0 = Tensor::vector(vec![0.0]);
            let out = ascend(y0, &center, rho, omega, 1, f).unwrap();
            assert_eq!(out.y.data()[0], rho.min(omega));
        }
    }

    #[test]
    fn constant_model_leaves_r_at_zero() {
        let mut model = Model::init(&ModelSpec::default(), 4).unwrap();
        for g in model.groups_mut().iter_mut().skip(1) {
            for t in &mut g.tensors {
                t.data_mut().fill(0.0);
            }
        }
        let cfg = AdvNoiseConfig {
            init_noise_std: Some(0.0),
            ..AdvNoiseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = pga(&model, &batch(), &cfg, &mut rng).unwrap();
        assert_eq!(out.r_value, 0.0);
        assert_eq!(out.y, model.embeddings(&batch()).unwrap());
        assert_eq!(out.cost, PassCount { forward: 1, backward: 1 });
    }

    #[test]
    fn pga_respects_the_box() {
        let model = Model::init(&ModelSpec::default(), 7).unwrap();
        let cfg = AdvNoiseConfig {
            steps: 4,
            rho: 10.0,
            ..AdvNoiseConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = pga(&model, &batch(), &cfg, &mut rng).unwrap();
        assert!(out.max_deviation <= cfg.omega);
        assert_eq!(out.trace.len(), 5);
        assert!(out.trace.iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn label_is_detached_from_its_source() {
        let model = Model::init(&ModelSpec::default(), 7).unwrap();
        let b = batch();
        let gamma = make_label(&model, &b, LabelSource::LabelProbability, RegularizerKind::KlSym).unwrap();
        let center = model.embeddings(&b).unwrap();
        let grad_y = |m: &Model| {
            let graph = Graph::new();
            let bound = m.bind_frozen(&graph);
            let y = graph.param(center.map(|v| v + 1e-3));
            let r = regularizer(&gamma, bound.logits_from_embeddings(y).unwrap(), RegularizerKind::KlSym, Reduction::Sum).unwrap();
            graph.backward(r).unwrap().wrt(y)
        };
        let before = grad_y(&model);
        // Changing the parameters that produced gamma leaves gamma, and hence
        // the gradient under the original model, untouched.
        let mut other = model.clone();
        other.groups_mut()[3].tensors[0].data_mut()[0] += 1.0;
        let _ = make_label(&other, &b, LabelSource::LabelProbability, RegularizerKind::KlSym).unwrap();
        assert_eq!(grad_y(&model), before);
    }

    #[test]
    fn invalid_config_names_the_key() {
        let cfg = AdvNoiseConfig {
            omega: 0.0,
            ..AdvNoiseConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "adversary.omega"),
            other => panic!("{other:?}"),
        }
    }
}

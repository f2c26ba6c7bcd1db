//! Outer minimization.
//!
//! The main update moves every parameter group `i` along its normalized
//! averaged gradient by `lr * clip(|x_i|)`, where `clip` clamps the group's
//! pre-update norm into `[clip_lo, clip_hi]`. There is no momentum and no
//! weight decay. `PlainNormalized` applies the same rule to the whole model as
//! a single group, and `Adam` is the ablation baseline.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::adversary::{regularizer, RegularizerKind};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{task_loss, Batch, BoundModel, Reduction};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    ScalaGroupwise,
    PlainNormalized,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct OuterOptConfig {
    pub kind: OptimizerKind,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_ratio: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub epochs: usize,
    /// Constant `1 / (clip_hi * sqrt(T))` over `T` outer steps, no warmup.
    pub theory_mode: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OuterOptConfig {
    fn default() -> Self {
        OuterOptConfig {
            kind: OptimizerKind::ScalaGroupwise,
            lr: 1e-3,
            warmup_ratio: 0.1,
            clip_lo: 0.0,
            clip_hi: 10.0,
            epochs: 6,
            theory_mode: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OuterOptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("optimizer.{key}"), msg));
        if !(self.clip_lo < self.clip_hi) {
            return bad(
                "clip-lo",
                format!("clip-lo ({}) must be below clip-hi ({})", self.clip_lo, self.clip_hi),
            );
        }
        if !(self.clip_lo >= 0.0) {
            return bad("clip-lo", "must be >= 0".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup-ratio", "must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam-eps", "must be > 0".into());
        }
        Ok(())
    }
}

/// `max(lo, min(c, hi))`.
pub fn clip(c: f64, lo: f64, hi: f64) -> f64 {
    lo.max(c.min(hi))
}

/// Theory-mode learning rate `1 / (clip_hi * sqrt(T))`.
pub fn theory_lr(clip_hi: f64, total_steps: usize) -> f64 {
    1.0 / (clip_hi * (total_steps as f64).sqrt())
}

/// Number of warmup steps: `ceil(warmup_ratio * total)`.
pub fn warmup_steps(warmup_ratio: f64, total_steps: usize) -> usize {
    (warmup_ratio * total_steps as f64).ceil() as usize
}

/// Learning rate at `step` of `total_steps`: linear warmup from 0 to `lr`,
/// then linear decay to 0. In theory mode the constant `1 / (U sqrt(T))`.
pub fn lr_at(cfg: &OuterOptConfig, step: usize, total_steps: usize) -> f64 {
    if cfg.theory_mode {
        return theory_lr(cfg.clip_hi, total_steps);
    }
    let warm = warmup_steps(cfg.warmup_ratio, total_steps);
    if step < warm {
        cfg.lr * step as f64 / warm as f64
    } else {
        let remaining = total_steps.saturating_sub(step) as f64;
        cfg.lr * remaining / (total_steps - warm) as f64
    }
}

/// Square-root learning-rate scaling for a batch size change.
pub fn sqrt_scale_lr(lr: f64, batch_base: usize, batch_new: usize) -> Result<f64> {
    if batch_base == 0 || batch_new == 0 {
        return Err(Error::InvalidArgument("batch sizes must be positive".into()));
    }
    Ok(lr * (batch_new as f64 / batch_base as f64).sqrt())
}

/// What one outer step did to each parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub lr: f64,
    /// Norm of the update vector applied to each group.
    pub update_norms: Vec<f64>,
    /// Clipped pre-update parameter norm per group (zero for Adam).
    pub nu: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub param_norms: Vec<f64>,
    /// Groups left untouched because their gradient was exactly zero.
    pub skipped: Vec<usize>,
    pub task_loss: f64,
    pub reg_value: f64,
    pub adversary_active: bool,
}

/// Group-wise clipped, normalized descent:
/// `x_i <- x_i - lr * clip(|x_i|) * g_i / |g_i|` with the pre-update norm.
pub fn scala_step(
    params: &mut [f64],
    groups: &[Range<usize>],
    grad: &[f64],
    lr: f64,
    clip_lo: f64,
    clip_hi: f64,
) -> Result<StepReport> {
    check_grad(params, grad)?;
    let mut report = StepReport {
        lr,
        ..StepReport::default()
    };
    for (i, range) in groups.iter().enumerate() {
        let g = &grad[range.clone()];
        let x = &mut params[range.clone()];
        let grad_norm = l2_norm(g);
        let param_norm = l2_norm(x);
        let nu = clip(param_norm, clip_lo, clip_hi);
        report.grad_norms.push(grad_norm);
        report.param_norms.push(param_norm);
        report.nu.push(nu);
        if grad_norm == 0.0 {
            report.skipped.push(i);
            report.update_norms.push(0.0);
            continue;
        }
        let scale = lr * nu / grad_norm;
        let delta: Vec<f64> = g.iter().map(|v| scale * v).collect();
        for (xi, d) in x.iter_mut().zip(&delta) {
            *xi -= d;
        }
        report.update_norms.push(l2_norm(&delta));
    }
    Ok(report)
}

fn check_grad(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::shape(
            "outer step",
            format!("{} parameters, {} gradient entries", params.len(), grad.len()),
        ));
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "outer step" });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Stateful outer optimizer dispatching on [`OptimizerKind`].
#[derive(Clone, Debug, PartialEq)]
pub struct OuterOptimizer {
    cfg: OuterOptConfig,
    adam: Option<AdamState>,
}

impl OuterOptimizer {
    pub fn new(cfg: OuterOptConfig) -> Self {
        OuterOptimizer { cfg, adam: None }
    }

    pub fn config(&self) -> &OuterOptConfig {
        &self.cfg
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        groups: &[Range<usize>],
        grad: &[f64],
        lr: f64,
    ) -> Result<StepReport> {
        match self.cfg.kind {
            OptimizerKind::ScalaGroupwise => {
                scala_step(params, groups, grad, lr, self.cfg.clip_lo, self.cfg.clip_hi)
            }
            OptimizerKind::PlainNormalized => {
                let whole = [0..params.len()];
                scala_step(params, &whole, grad, lr, self.cfg.clip_lo, self.cfg.clip_hi)
            }
            OptimizerKind::Adam => self.adam_step(params, groups, grad, lr),
        }
    }

    /// Adam with bias correction.
    pub fn adam_step(
        &mut self,
        params: &mut [f64],
        groups: &[Range<usize>],
        grad: &[f64],
        lr: f64,
    ) -> Result<StepReport> {
        check_grad(params, grad)?;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps);
        let state = self.adam.get_or_insert_with(|| AdamState {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
        });
        state.t += 1;
        let c1 = 1.0 - b1.powi(state.t);
        let c2 = 1.0 - b2.powi(state.t);
        let mut delta = vec![0.0; params.len()];
        for (j, g) in grad.iter().enumerate() {
            state.m[j] = b1 * state.m[j] + (1.0 - b1) * g;
            state.v[j] = b2 * state.v[j] + (1.0 - b2) * g * g;
            let m_hat = state.m[j] / c1;
            let v_hat = state.v[j] / c2;
            delta[j] = lr * m_hat / (v_hat.sqrt() + eps);
        }
        let mut report = StepReport {
            lr,
            ..StepReport::default()
        };
        for (i, range) in groups.iter().enumerate() {
            report.grad_norms.push(l2_norm(&grad[range.clone()]));
            report.param_norms.push(l2_norm(&params[range.clone()]));
            report.nu.push(0.0);
            report.update_norms.push(l2_norm(&delta[range.clone()]));
            if grad[range.clone()].iter().all(|&g| g == 0.0) {
                report.skipped.push(i);
            }
        }
        for (x, d) in params.iter_mut().zip(&delta) {
            *x -= d;
        }
        Ok(report)
    }
}

/// Regularizer inputs for [`composed_loss`].
#[derive(Clone, Copy, Debug)]
pub struct AdversarialTerm<'a> {
    pub gamma: &'a Tensor,
    /// Perturbed embeddings, treated as a constant.
    pub y: &'a Tensor,
    pub kind: RegularizerKind,
}

/// Task loss plus `lambda` times the regularizer.
pub struct ComposedLoss<'g> {
    pub total: Var<'g>,
    pub task: f64,
    pub reg: f64,
}

/// Builds `task(outputs) + lambda * r(gamma, Phi(x, y))` on the graph of
/// `outputs`. Without an adversarial term, or with `lambda == 0`, the result
/// is exactly the task loss node.
pub fn composed_loss<'g>(
    model: &BoundModel<'g>,
    outputs: Var<'g>,
    batch: &Batch,
    adversarial: Option<AdversarialTerm<'_>>,
    lambda: f64,
    reduction: Reduction,
) -> Result<ComposedLoss<'g>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let classes = outputs.shape()[1];
    let task = task_loss(outputs, batch, classes, reduction)?;
    let task_value = task.item().expect("scalar");
    let (total, reg) = match adversarial {
        Some(adv) if lambda > 0.0 => {
            let graph = outputs.graph();
            let at_y = model.logits_from_embeddings(graph.constant(adv.y.clone()))?;
            let r = regularizer(adv.gamma, at_y, adv.kind, reduction)?;
            let reg = r.item().expect("scalar");
            (task.add(&r.scale(lambda)?)?, reg)
        }
        _ => (task, 0.0),
    };
    if !total.item().is_some_and(f64::is_finite) {
        return Err(Error::NonFinite { op: "composed loss" });
    }
    Ok(ComposedLoss {
        total,
        task: task_value,
        reg,
    })
}

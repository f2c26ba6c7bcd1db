//! Simulated workers: partitioning, per-micro-batch composed-loss gradients
//! and a fixed-order reduction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::AdversaryKind;
use crate::adversary::{gaussian_start, label_from_outputs, pga_from, AdvNoiseConfig, PassCount};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, Reduction};
use crate::optimizer::{composed_loss, AdversarialTerm};
use crate::tensor::l2_norm;

/// Adversary settings for one outer step.
#[derive(Clone, Copy, Debug)]
pub struct AdversaryPlan<'a> {
    pub cfg: &'a AdvNoiseConfig,
    pub kind: AdversaryKind,
    /// Delay gate: whether the regularizer is part of this step's loss.
    pub active: bool,
}

impl AdversaryPlan<'_> {
    pub fn engaged(&self) -> bool {
        self.active && self.kind != AdversaryKind::Off && self.cfg.lambda > 0.0
    }
}

/// Splits `batch` into `workers` contiguous shards, each cut into
/// micro-batches of `micro_batch` samples.
pub fn partition(batch: &Batch, workers: usize, micro_batch: usize) -> Result<Vec<Vec<Batch>>> {
    let n = batch.len();
    if workers == 0 || micro_batch == 0 || n == 0 || n % (workers * micro_batch) != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch of {n} does not split into {workers} workers x micro-batches of {micro_batch}"
        )));
    }
    let shard = n / workers;
    Ok((0..workers)
        .map(|p| {
            (0..shard / micro_batch)
                .map(|m| {
                    let start = p * shard + m * micro_batch;
                    batch.slice(start..start + micro_batch)
                })
                .collect()
        })
        .collect())
}

/// Seed for the noise of micro-batch `index` (global, worker-major order)
/// at outer step `step`.
pub fn micro_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroBatchResult {
    /// Gradient of the summed (not averaged) composed loss.
    pub grad: Vec<f64>,
    pub samples: usize,
    pub task_sum: f64,
    pub reg_sum: f64,
    pub passes: PassCount,
    pub max_deviation: f64,
    /// Batch-mean regularizer along the ascent, when PGA ran.
    pub r_trace: Vec<f64>,
}

/// Composed-loss gradient of one micro-batch.
pub fn micro_batch_gradient(
    model: &Model,
    batch: &Batch,
    plan: &AdversaryPlan<'_>,
    seed: u64,
) -> Result<MicroBatchResult> {
    let graph = Graph::new();
    let bound = model.bind(&graph);
    let (outputs, emb) = bound.forward(batch)?;
    let mut passes = PassCount {
        forward: 1,
        backward: 1,
    };
    let mut max_deviation = 0.0;
    let mut r_trace = Vec::new();
    let perturbed = if plan.engaged() {
        let cfg = plan.cfg;
        let gamma = label_from_outputs(&outputs.value(), batch, cfg.label_source, cfg.regularizer)?;
        let center = emb.value();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = match plan.kind {
            AdversaryKind::Pga => {
                let out = pga_from(model, &center, &gamma, cfg, &mut rng)?;
                passes += out.cost;
                max_deviation = out.max_deviation;
                r_trace = out.trace;
                out.y
            }
            AdversaryKind::Gaussian => {
                let y = gaussian_start(&center, cfg.noise_std(), cfg.omega, &mut rng)?;
                max_deviation = y
                    .data()
                    .iter()
                    .zip(center.data())
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                y
            }
            AdversaryKind::Off => unreachable!("engaged() excludes Off"),
        };
        Some((gamma, y))
    } else {
        None
    };
    let term = perturbed.as_ref().map(|(gamma, y)| AdversarialTerm {
        gamma,
        y,
        kind: plan.cfg.regularizer,
    });
    let lambda = if term.is_some() { plan.cfg.lambda } else { 0.0 };
    let loss = composed_loss(&bound, outputs, batch, term, lambda, Reduction::Sum)?;
    let grads = graph.backward(loss.total)?;
    let grad = bound.flat_grad(&grads);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "worker gradient" });
    }
    Ok(MicroBatchResult {
        grad,
        samples: batch.len(),
        task_sum: loss.task,
        reg_sum: loss.reg,
        passes,
        max_deviation,
        r_trace,
    })
}

/// Sums vectors by a balanced pairwise tree over their given order.
pub fn pairwise_sum(mut level: Vec<Vec<f64>>) -> Vec<f64> {
    assert!(!level.is_empty(), "pairwise_sum of nothing");
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        level = next;
    }
    level.pop().expect("non-empty")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker: usize,
    pub micro_batches: usize,
    pub samples: usize,
    pub task_sum: f64,
    pub reg_sum: f64,
    pub passes: PassCount,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accumulated {
    /// Averaged gradient `(1/B) sum` over every sample of the step.
    pub grad: Vec<f64>,
    pub task_loss: f64,
    pub reg_value: f64,
    pub passes: PassCount,
    pub max_deviation: f64,
    /// Per-group per-sample gradient spread estimated from micro-batch means.
    pub sigma: Vec<f64>,
    pub workers: Vec<WorkerReport>,
}

/// Evaluates every micro-batch against the same model snapshot, optionally
/// on `pool`, and averages in global micro-batch order.
///
/// Noise for micro-batch `k` (counting worker-major) is seeded with
/// `micro_seed(seed, step, k)`, so the result depends only on the sequence
/// of micro-batches and not on how they are spread over workers.
pub fn accumulate_gradients(
    model: &Model,
    parts: &[Vec<Batch>],
    plan: &AdversaryPlan<'_>,
    seed: u64,
    step: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Accumulated> {
    let jobs: Vec<(usize, &Batch)> = parts
        .iter()
        .enumerate()
        .flat_map(|(p, mbs)| mbs.iter().map(move |b| (p, b)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::InvalidArgument("no micro-batches".into()));
    }
    let run = |k: usize| micro_batch_gradient(model, jobs[k].1, plan, micro_seed(seed, step, k as u64));
    let results: Vec<MicroBatchResult> = match pool {
        Some(pool) => pool.install(|| (0..jobs.len()).into_par_iter().map(run).collect::<Result<_>>())?,
        None => (0..jobs.len()).map(run).collect::<Result<_>>()?,
    };

    let total: usize = results.iter().map(|r| r.samples).sum();
    let inv = 1.0 / total as f64;
    let mut workers: Vec<WorkerReport> = (0..parts.len())
        .map(|worker| WorkerReport {
            worker,
            ..WorkerReport::default()
        })
        .collect();
    let mut passes = PassCount::default();
    let mut max_deviation = 0.0f64;
    let (mut task_sum, mut reg_sum) = (0.0, 0.0);
    for ((p, _), r) in jobs.iter().zip(&results) {
        let w = &mut workers[*p];
        w.micro_batches += 1;
        w.samples += r.samples;
        w.task_sum += r.task_sum;
        w.reg_sum += r.reg_sum;
        w.passes += r.passes;
        w.max_deviation = w.max_deviation.max(r.max_deviation);
        passes += r.passes;
        max_deviation = max_deviation.max(r.max_deviation);
        task_sum += r.task_sum;
        reg_sum += r.reg_sum;
    }
    let sizes: Vec<usize> = results.iter().map(|r| r.samples).collect();
    let grads: Vec<Vec<f64>> = results.into_iter().map(|r| r.grad).collect();
    let mut grad = pairwise_sum(grads.clone());
    grad.iter_mut().for_each(|g| *g *= inv);

    let sigma = model
        .group_ranges()
        .into_iter()
        .map(|range| {
            let spread: f64 = grads
                .iter()
                .zip(&sizes)
                .map(|(g, &b)| {
                    let diff: Vec<f64> = g[range.clone()]
                        .iter()
                        .zip(&grad[range.clone()])
                        .map(|(s, m)| s / b as f64 - m)
                        .collect();
                    b as f64 * l2_norm(&diff).powi(2)
                })
                .sum();
            (spread / grads.len() as f64).sqrt()
        })
        .collect();

    Ok(Accumulated {
        grad,
        task_loss: task_sum * inv,
        reg_value: reg_sum * inv,
        passes,
        max_deviation,
        sigma,
        workers,
    })
}

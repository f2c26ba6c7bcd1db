use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AdversaryKind, ExperimentConfig};
use super::data::{synth_dataset, Dataset};
use super::metrics::{write_csv, write_jsonl, write_summary, Abort, MeasuredConstants, RunRecord, Summary};
use super::workers::{accumulate_gradients, micro_seed, partition, AdversaryPlan};
use crate::diagnostics::{
    default_inner_lr, moreau_grad, probe_alpha, sharpness, SharpnessOptions, SharpnessResult,
    DEFAULT_REFINE_STEPS,
};
use crate::error::{Error, Result};
use crate::model::{Batch, Model, TaskObjective};
use crate::optimizer::{lr_at, OuterOptimizer};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const SHARPNESS_STREAM: u64 = 0x5348_4152;
const ALPHA_STREAM: u64 = 0x414c_5048;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; defaults to the number of simulated workers.
    pub threads: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    pub model: Model,
    /// `(epoch, model)` at the configured checkpoint cadence.
    pub checkpoints: Vec<(usize, Model)>,
    /// Wall time of each outer step in seconds.
    pub timings: Vec<f64>,
}

struct MoreauState {
    alpha: Vec<f64>,
    inner_lr: f64,
    initial_envelope: Option<f64>,
    lowest_envelope: f64,
    z_ratio: f64,
}

/// The first `n` examples of `batch`.
pub fn sample_prefix(batch: &Batch, n: usize) -> Batch {
    batch.slice(0..n.min(batch.len()))
}

/// Per-group `alpha` (configured, or probed at `model` and floored at 1e-6)
/// and the inner step size used for Moreau probes on `batch`.
pub fn moreau_setup(model: &Model, batch: &Batch, cfg: &ExperimentConfig) -> Result<(Vec<f64>, f64)> {
    let diag = &cfg.diagnostics;
    let alpha: Vec<f64> = match &diag.moreau_alpha {
        Some(a) => a.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ALPHA_STREAM);
            probe_alpha(
                &TaskObjective::new(model, batch),
                &model.flat_params(),
                diag.alpha_probes,
                diag.alpha_radius,
                DEFAULT_REFINE_STEPS,
                &mut rng,
            )?
            .into_iter()
            .map(|a| a.max(1e-6))
            .collect()
        }
    };
    let max_alpha = alpha.iter().copied().fold(0.0, f64::max);
    let inner_lr = default_inner_lr(&alpha, max_alpha);
    Ok((alpha, inner_lr))
}

/// Sharpness of the mean task loss on `batch`, seeded by the run seed and `step`.
pub fn measure_sharpness(model: &Model, batch: &Batch, cfg: &ExperimentConfig, step: usize) -> Result<SharpnessResult> {
    let objective = TaskObjective::new(model, batch);
    let opts = SharpnessOptions {
        max_iters: cfg.diagnostics.sharpness_iters,
        tol: cfg.diagnostics.sharpness_tol,
        ..SharpnessOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(micro_seed(cfg.seed ^ SHARPNESS_STREAM, step as u64, 0));
    sharpness(&objective, &model.flat_params(), &opts, &mut rng)
}

fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    Ok((model.score(&data.train)?, model.score(&data.test)?))
}

/// Runs the outer loop described by `cfg`: per-epoch shuffling, simulated
/// workers, delayed adversarial regularization and the configured outer
/// optimizer, with periodic diagnostics.
///
/// A non-finite loss or gradient stops the run; the step is recorded in
/// [`Summary::aborted`] and everything up to it is returned.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let data = synth_dataset(&cfg.dataset, cfg.seed)?;
    let mut model = Model::init(&cfg.model_spec(), cfg.seed)?;
    let (adv, opt_cfg, adv_kind) = cfg.effective();
    let mut optimizer = OuterOptimizer::new(opt_cfg.clone());
    let groups = model.group_ranges();

    let threads = opts.threads.unwrap_or(cfg.workers).clamp(1, cfg.workers);
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let b = cfg.batch_size;
    let steps_per_epoch = data.train.len() / b;
    let total_steps = steps_per_epoch * opt_cfg.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let diag = &cfg.diagnostics;
    let sharp_batch = sample_prefix(&data.train, diag.sharpness_samples);
    let moreau_batch = sample_prefix(&data.train, diag.moreau_samples);
    let mut moreau = if diag.moreau_every > 0 {
        let (alpha, inner_lr) = moreau_setup(&model, &moreau_batch, cfg)?;
        Some(MoreauState {
            inner_lr,
            alpha,
            initial_envelope: None,
            lowest_envelope: f64::INFINITY,
            z_ratio: 0.0,
        })
    } else {
        None
    };

    let mut records = Vec::with_capacity(total_steps);
    let mut timings = Vec::with_capacity(total_steps);
    let mut checkpoints = Vec::new();
    let mut forward = 0u64;
    let mut backward = 0u64;
    let mut g_inf = 0.0f64;
    let mut sigma_max = vec![0.0f64; groups.len()];
    let mut moreau_norms = Vec::new();
    let mut aborted = None;
    let mut epochs_completed = 0;
    let mut best_test: Option<f64> = None;
    let mut last_eval: Option<(f64, f64)> = None;

    'epochs: for epoch in 0..opt_cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let plan = AdversaryPlan {
            cfg: &adv,
            kind: adv_kind,
            active: adv_kind != AdversaryKind::Off && epoch >= adv.t_start,
        };
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            let started = Instant::now();
            let batch = data.train.select(&order[s * b..(s + 1) * b]);
            let parts = partition(&batch, cfg.workers, cfg.micro_batch)?;
            let snapshot = model.flat_params();

            let acc = match accumulate_gradients(&model, &parts, &plan, cfg.seed, step as u64, pool.as_ref()) {
                Ok(acc) => acc,
                Err(e) if e.is_numerical() => {
                    aborted = Some(Abort {
                        step,
                        reason: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            forward += acc.passes.forward;
            backward += acc.passes.backward;
            g_inf = acc.grad.iter().fold(g_inf, |m, g| m.max(g.abs()));
            for (m, s) in sigma_max.iter_mut().zip(&acc.sigma) {
                *m = m.max(*s);
            }

            let moreau_sq_norm = match moreau.as_mut() {
                Some(state) if step % diag.moreau_every == 0 => {
                    match moreau_grad(
                        &TaskObjective::new(&model, &moreau_batch),
                        &snapshot,
                        &state.alpha,
                        diag.moreau_inner_iters,
                        state.inner_lr,
                    ) {
                        Ok(probe) => {
                            state.initial_envelope.get_or_insert(probe.envelope_value);
                            state.lowest_envelope = state.lowest_envelope.min(probe.envelope_value);
                            for ((xh, x), g) in probe.prox_point.iter().zip(&snapshot).zip(&acc.grad) {
                                if g.abs() > 1e-12 {
                                    state.z_ratio = state.z_ratio.max(((xh - x) / g).abs());
                                }
                            }
                            moreau_norms.push(probe.sq_norm);
                            Some(probe.sq_norm)
                        }
                        Err(e) => {
                            log::warn!("moreau probe at step {step} failed: {e}");
                            None
                        }
                    }
                }
                _ => None,
            };

            let lr = lr_at(&opt_cfg, step, total_steps);
            let mut params = snapshot;
            let report = match optimizer.step(&mut params, &groups, &acc.grad, lr) {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    aborted = Some(Abort {
                        step,
                        reason: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if params.iter().any(|p| !p.is_finite()) {
                aborted = Some(Abort {
                    step,
                    reason: "non-finite parameters after the outer step".into(),
                });
                break 'epochs;
            }
            model.set_flat_params(&params)?;

            let sharp = if diag.sharpness_every > 0 && step % diag.sharpness_every == 0 {
                match measure_sharpness(&model, &sharp_batch, cfg, step) {
                    Ok(r) => Some(r.eigenvalue),
                    Err(e) => {
                        log::warn!("sharpness at step {step} failed: {e}");
                        None
                    }
                }
            } else {
                None
            };

            let (train_acc, test_acc) = if s + 1 == steps_per_epoch {
                let (tr, te) = evaluate(&model, &data)?;
                best_test = Some(best_test.map_or(te, |b: f64| b.max(te)));
                last_eval = Some((tr, te));
                log::info!("epoch {epoch}: loss {:.4} train {tr:.4} test {te:.4}", acc.task_loss);
                (Some(tr), Some(te))
            } else {
                (None, None)
            };

            let engaged = plan.engaged();
            records.push(RunRecord {
                step,
                epoch,
                mode: cfg.mode.as_str().to_string(),
                lr,
                task_loss: acc.task_loss,
                reg_value: acc.reg_value,
                lambda: if engaged { adv.lambda } else { 0.0 },
                adversary_active: engaged,
                update_norms: report.update_norms,
                nu: report.nu,
                grad_norms: report.grad_norms,
                skipped_groups: report.skipped,
                max_perturbation: acc.max_deviation,
                train_acc,
                test_acc,
                sharpness: sharp,
                moreau_sq_norm,
                forward_passes: forward,
                backward_passes: backward,
            });
            timings.push(started.elapsed().as_secs_f64());
        }
        epochs_completed = epoch + 1;
        let every = cfg.output.checkpoint_every;
        if every > 0 && epochs_completed % every == 0 {
            checkpoints.push((epochs_completed, model.clone()));
        }
    }

    let final_sharp = if diag.sharpness_final && aborted.is_none() {
        match measure_sharpness(&model, &sharp_batch, cfg, total_steps) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("final sharpness failed: {e}");
                None
            }
        }
    } else {
        None
    };

    let constants = moreau.as_ref().map(|m| MeasuredConstants {
        alpha: m.alpha.clone(),
        d: m.initial_envelope.map_or(0.0, |e| (e - m.lowest_envelope).max(0.0)),
        g: g_inf,
        z: m.z_ratio * sigma_max.iter().copied().fold(0.0, f64::max),
        sigma: sigma_max.clone(),
    });
    let summary = Summary {
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        steps: records.len(),
        epochs_completed,
        final_train_acc: last_eval.map(|e| e.0),
        final_test_acc: last_eval.map(|e| e.1),
        best_test_acc: best_test,
        final_task_loss: records.last().map(|r| r.task_loss),
        final_sharpness: final_sharp.as_ref().map(|r| r.eigenvalue),
        sharpness_converged: final_sharp.as_ref().map(|r| r.converged),
        forward_passes: forward,
        backward_passes: backward,
        mean_moreau_sq_norm: (!moreau_norms.is_empty())
            .then(|| moreau_norms.iter().sum::<f64>() / moreau_norms.len() as f64),
        constants,
        aborted,
    };
    Ok(RunOutput {
        records,
        summary,
        model,
        checkpoints,
        timings,
    })
}

/// Writes `metrics.csv`, `metrics.jsonl`, `summary.json`, checkpoints and
/// `model-final.json` into `dir` and returns their paths. These files are
/// reproducible byte for byte; per-step wall times go to `timings.csv`, which
/// is not part of the returned list.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("metrics.csv");
    write_csv(&out.records, std::fs::File::create(&csv_path)?)?;
    written.push(csv_path);
    let jsonl_path = dir.join("metrics.jsonl");
    write_jsonl(&out.records, std::io::BufWriter::new(std::fs::File::create(&jsonl_path)?))?;
    written.push(jsonl_path);
    let summary_path = dir.join("summary.json");
    write_summary(&out.summary, &summary_path)?;
    written.push(summary_path);
    for (epoch, model) in &out.checkpoints {
        let path = dir.join(format!("checkpoint-epoch{epoch}.json"));
        model.save(&path)?;
        written.push(path);
    }
    let final_path = dir.join("model-final.json");
    out.model.save(&final_path)?;
    written.push(final_path);
    let timings_path = dir.join("timings.csv");
    let mut w = csv::Writer::from_path(&timings_path)?;
    w.write_record(["step", "seconds"])?;
    for (i, t) in out.timings.iter().enumerate() {
        w.write_record([i.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(written)
}

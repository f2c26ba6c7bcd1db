//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p scala-core --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scala_core::autodiff::{Graph, Var};
use scala_core::diagnostics::{
    mean_std, moreau_grad, probe_alpha, rate_calculator, sharpness, weak_convexity_check, InnerIters,
    SharpnessOptions, TheoryConstants,
};
use scala_core::harness::{
    accumulate_gradients, partition, run_experiment, synth_dataset, write_artifacts, AdversaryKind,
    AdversaryPlan, ExperimentConfig, RunOptions, RunOutput, RunRecord,
};
use scala_core::model::{Model, ModelSpec, TaskObjective};
use scala_core::objective::{FnObjective, Objective, Quadratic};
use scala_core::optimizer::{scala_step, OuterOptimizer};
use scala_core::Tensor;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn config(overrides: &[&str]) -> ExperimentConfig {
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str("", &ov).expect("valid acceptance config")
}

fn run(overrides: &[&str]) -> RunOutput {
    run_experiment(&config(overrides), &RunOptions::default()).expect("run completes")
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn away_from(rng: &mut ChaCha8Rng, shape: Vec<usize>, kinks: &[f64]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > 0.05) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

// ---------------------------------------------------------------- criterion 1

type OpFn = for<'g> fn(&[Var<'g>]) -> scala_core::Result<Var<'g>>;

fn weighted_loss(op: OpFn, inputs: &[Tensor], w: &Tensor) -> (f64, Vec<Tensor>) {
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = op(&vars).unwrap();
    let loss = out.mul(&graph.constant(w.clone())).unwrap().sum().unwrap();
    let value = loss.item().unwrap();
    let grads = graph.backward(loss).unwrap();
    (value, vars.iter().map(|v| grads.wrt(*v)).collect())
}

fn output_shape(op: OpFn, inputs: &[Tensor]) -> Vec<usize> {
    let graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    op(&vars).unwrap().shape()
}

/// Relative error between the tape gradient and central differences of
/// `sum(op(inputs) * w)` for a random weight tensor `w`.
fn op_gradient_error(op: OpFn, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> f64 {
    let w = uniform(rng, output_shape(op, &inputs), -1.0, 1.0);
    let (_, analytic) = weighted_loss(op, &inputs, &w);
    let h = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (weighted_loss(op, &plus, &w).0 - weighted_loss(op, &minus, &w).0) / (2.0 * h);
            num += (analytic[i].data()[j] - fd).powi(2);
            den += fd * fd;
        }
    }
    num.sqrt() / den.sqrt().max(1e-8)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn rt(rng: &mut ChaCha8Rng, ndims: usize, lo: f64, hi: f64) -> Tensor {
    let shape = (0..ndims).map(|_| dim(rng)).collect();
    uniform(rng, shape, lo, hi)
}

fn away(rng: &mut ChaCha8Rng, kinks: &[f64]) -> Tensor {
    let shape = vec![dim(rng), dim(rng)];
    away_from(rng, shape, kinks)
}

type Generator = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn op_table() -> Vec<(&'static str, OpFn, Generator)> {
    vec![
        ("matmul", |v| v[0].matmul(&v[1]), |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            vec![uniform(r, vec![m, k], -1.0, 1.0), uniform(r, vec![k, n], -1.0, 1.0)]
        }),
        ("batch_matmul", |v| v[0].batch_matmul(&v[1]), |r| {
            let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
            vec![uniform(r, vec![b, m, k], -1.0, 1.0), uniform(r, vec![b, k, n], -1.0, 1.0)]
        }),
        ("transpose", |v| v[0].transpose(), |r| {
            let nd = if r.random::<bool>() { 3 } else { 2 };
            vec![rt(r, nd, -1.0, 1.0)]
        }),
        ("add", |v| v[0].add(&v[1]), |r| {
            let s = vec![dim(r), dim(r)];
            vec![uniform(r, s.clone(), -1.0, 1.0), uniform(r, s, -1.0, 1.0)]
        }),
        ("sub", |v| v[0].sub(&v[1]), |r| {
            let s = vec![dim(r), dim(r), dim(r)];
            vec![uniform(r, s.clone(), -1.0, 1.0), uniform(r, s, -1.0, 1.0)]
        }),
        ("mul", |v| v[0].mul(&v[1]), |r| {
            let s = vec![dim(r), dim(r)];
            vec![uniform(r, s.clone(), -1.0, 1.0), uniform(r, s, -1.0, 1.0)]
        }),
        ("add_row", |v| v[0].add_row(&v[1]), |r| {
            let (m, n) = (dim(r), dim(r));
            vec![uniform(r, vec![m, n], -1.0, 1.0), uniform(r, vec![n], -1.0, 1.0)]
        }),
        ("scale", |v| v[0].scale(-1.7), |r| vec![rt(r, 2, -1.0, 1.0)]),
        ("relu", |v| v[0].relu(), |r| vec![away(r, &[0.0])]),
        ("tanh", |v| v[0].tanh(), |r| vec![rt(r, 2, -2.0, 2.0)]),
        ("gather_rows", |v| {
            let rows = v[0].shape()[0];
            v[0].gather_rows(&[0, rows - 1, 0, rows / 2, rows - 1])
        }, |r| vec![rt(r, 2, -1.0, 1.0)]),
        ("softmax", |v| v[0].softmax(), |r| vec![rt(r, 2, -3.0, 3.0)]),
        ("log_softmax", |v| v[0].log_softmax(), |r| vec![rt(r, 2, -3.0, 3.0)]),
        ("ln", |v| v[0].ln(), |r| vec![rt(r, 2, 0.2, 2.0)]),
        ("sum", |v| v[0].sum(), |r| vec![rt(r, 2, -1.0, 1.0)]),
        ("mean", |v| v[0].mean(), |r| vec![rt(r, 3, -1.0, 1.0)]),
        ("square", |v| v[0].square(), |r| vec![rt(r, 2, -1.0, 1.0)]),
        ("clamp", |v| v[0].clamp(-0.5, 0.5), |r| vec![away(r, &[-0.5, 0.5])]),
        ("reshape", |v| {
            let n = v[0].shape().iter().product::<usize>();
            v[0].reshape(&[n])
        }, |r| vec![rt(r, 2, -1.0, 1.0)]),
        ("mean_axis1", |v| v[0].mean_axis1(), |r| vec![rt(r, 3, -1.0, 1.0)]),
    ]
}

fn full_net_error(spec: &ModelSpec, seed: u64) -> f64 {
    let data = synth_dataset(
        &config(&["dataset.train-size=64", "dataset.test-size=1"]).dataset,
        seed,
    )
    .unwrap();
    let model = Model::init(spec, seed).unwrap();
    let batch = data.train.slice(0..6);
    let obj = TaskObjective::new(&model, &batch);
    let x = model.flat_params();
    let g = obj.grad(&x).unwrap();
    let h = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let mut z = x.clone();
    for j in 0..x.len() {
        z[j] = x[j] + h;
        let fp = obj.value(&z).unwrap();
        z[j] = x[j] - h;
        let fm = obj.value(&z).unwrap();
        z[j] = x[j];
        let fd = (fp - fm) / (2.0 * h);
        num += (g[j] - fd).powi(2);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, "");
    let ops = op_table();
    for (name, op, gen) in &ops {
        for _ in 0..25 {
            let err = op_gradient_error(*op, gen(&mut rng), &mut rng);
            ensure!(err < 1e-4, "{name}: relative error {err:.2e}");
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let plain = full_net_error(&ModelSpec::default(), 3);
    ensure!(plain < 1e-4, "default model: relative error {plain:.2e}");
    let attn = full_net_error(
        &ModelSpec {
            attention: true,
            ..ModelSpec::default()
        },
        4,
    );
    ensure!(attn < 1e-4, "attention model: relative error {attn:.2e}");
    Ok(format!(
        "{} ops x 25 instances, worst {:.1e} ({}); full net {plain:.1e}, with attention {attn:.1e}",
        ops.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..10 {
        let n = if case == 0 { 50 } else { rng.random_range(5..=50) };
        let k = n + rng.random_range(0..n);
        let m = DMatrix::<f64>::from_fn(k, n, |_, _| rng.sample(StandardNormal));
        let a = m.transpose() * &m / k as f64;
        let oracle = SymmetricEigen::new(a.clone()).eigenvalues.max();
        let dense: Vec<f64> = (0..n * n).map(|i| a[(i / n, i % n)]).collect();
        let q = Quadratic::new(n, dense).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let opts = SharpnessOptions {
            max_iters: 2000,
            tol: 1e-10,
            ..SharpnessOptions::default()
        };
        let est = sharpness(&q, &x, &opts, &mut rng).map_err(|e| e.to_string())?.eigenvalue;
        let rel = (est - oracle).abs() / oracle.abs();
        ensure!(rel < 0.01, "case {case} (n={n}): power {est} vs dense {oracle}");
        worst = worst.max(rel);
    }
    Ok(format!("10 quadratics up to 50x50, worst relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0f64, 0.0f64);
    for &(a, alpha, x) in &[(2.0, 2.0, 1.0), (0.5, 1.0, -3.0), (5.0, 4.0, 0.25), (1.0, 0.75, 2.0)] {
        let q = Quadratic::diagonal(&[a]);
        let probed = probe_alpha(&q, &[x], 3, 1e-2, 20, &mut rng).map_err(|e| e.to_string())?[0];
        ensure!((probed - a).abs() < 1e-8, "probe-alpha {probed} for a={a}");
        let r = moreau_grad(&q, &[x], &[alpha], 2000, 1.0 / (2.0 * (alpha + a))).map_err(|e| e.to_string())?;
        let expected = a * x / (1.0 + a / (2.0 * alpha));
        let err = (r.gradient[0] - expected).abs();
        ensure!(err < 1e-6, "moreau-grad {} vs {expected} (a={a}, alpha={alpha}, x={x})", r.gradient[0]);
        worst = (worst.0.max((probed - a).abs()), worst.1.max(err));
    }
    let q = Quadratic::diagonal(&[2.0]);
    let r = moreau_grad(&q, &[1.0], &[2.0], 500, 0.125).map_err(|e| e.to_string())?;
    ensure!((r.gradient[0] - 4.0 / 3.0).abs() < 1e-6, "a=2, alpha=2, x=1 gave {}", r.gradient[0]);
    Ok(format!(
        "a=2, alpha=2, x=1 -> {:.10}; worst alpha error {:.1e}, worst gradient error {:.1e}",
        r.gradient[0], worst.0, worst.1
    ))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let out = run(&[
        "dataset.train-size=1024",
        "batch-size=64",
        "optimizer.epochs=3",
        "optimizer.lr=0.05",
        "optimizer.clip-lo=0.5",
        "optimizer.clip-hi=3.0",
        "adversary.t-start=1",
        "diagnostics.sharpness-final=false",
    ]);
    let mut checked = 0;
    let mut worst = 0.0f64;
    for r in &out.records {
        for (i, (u, nu)) in r.update_norms.iter().zip(&r.nu).enumerate() {
            if r.skipped_groups.contains(&i) {
                continue;
            }
            let expected = r.lr * nu;
            if expected == 0.0 {
                ensure!(*u == 0.0, "step {} group {i}: moved by {u} at zero rate", r.step);
                continue;
            }
            let rel = (u - expected).abs() / expected;
            ensure!(rel <= 1e-12, "step {} group {i}: |dx| {u} vs lr*nu {expected}", r.step);
            worst = worst.max(rel);
            checked += 1;
        }
    }

    let cfg = config(&["dataset.train-size=256", "batch-size=64"]);
    let data = synth_dataset(&cfg.dataset, 0).unwrap();
    let model = Model::init(&cfg.model_spec(), 0).unwrap();
    let plan = AdversaryPlan {
        cfg: &cfg.adversary,
        kind: AdversaryKind::Off,
        active: false,
    };
    let parts = partition(&data.train.slice(0..64), 2, 16).unwrap();
    let grad = accumulate_gradients(&model, &parts, &plan, 0, 0, None).unwrap().grad;
    let groups = model.group_ranges();
    let reference = {
        let mut p = model.flat_params();
        scala_step(&mut p, &groups, &grad, 0.01, 0.0, 10.0).unwrap();
        p
    };
    for c in [2.0, 0.5, 1024.0, 2f64.powi(-30), 2f64.powi(40)] {
        let scaled: Vec<f64> = grad.iter().map(|g| g * c).collect();
        let mut p = model.flat_params();
        scala_step(&mut p, &groups, &scaled, 0.01, 0.0, 10.0).unwrap();
        ensure!(p == reference, "rescaling by {c} changed the update");
    }
    let x0 = model.flat_params();
    let delta = |p: &[f64]| -> Vec<f64> { p.iter().zip(&x0).map(|(a, b)| a - b).collect() };
    let base_delta = delta(&reference);
    let base_norm = base_delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let mut max_rel = 0.0f64;
    for c in [3.7, 1e-3, 123.456, 0.3] {
        let scaled: Vec<f64> = grad.iter().map(|g| g * c).collect();
        let mut p = model.flat_params();
        scala_step(&mut p, &groups, &scaled, 0.01, 0.0, 10.0).unwrap();
        let diff: f64 = delta(&p).iter().zip(&base_delta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        max_rel = max_rel.max(diff / base_norm);
    }
    ensure!(max_rel <= 1e-14, "general rescaling changed the update by {max_rel:.1e} relative");
    Ok(format!(
        "{checked} group updates, worst relative deviation {worst:.1e}; power-of-two rescaling bit-identical, \
         other factors within {max_rel:.1e} relative"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn strip_mode(records: &[RunRecord]) -> Vec<RunRecord> {
    records
        .iter()
        .map(|r| RunRecord {
            mode: String::new(),
            ..r.clone()
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let common = [
        "dataset.train-size=1024",
        "batch-size=64",
        "optimizer.epochs=4",
        "optimizer.lr=0.02",
        "adversary.omega=1e-5",
        "adversary.rho=1e-3",
        "adversary.steps=3",
        "adversary.t-start=2",
        "diagnostics.sharpness-final=false",
    ];
    let scala = run(&[&common[..], &["mode=scala"]].concat());
    let omega = 1e-5;
    let mut worst = 0.0f64;
    for r in &scala.records {
        ensure!(r.max_perturbation <= omega + 1e-15, "step {}: deviation {}", r.step, r.max_perturbation);
        ensure!(r.adversary_active == (r.epoch >= 2), "gate wrong at step {}", r.step);
        if r.adversary_active {
            ensure!(r.max_perturbation > 0.0, "no perturbation at active step {}", r.step);
        }
        worst = worst.max(r.max_perturbation);
    }
    let zero = run(&[&common[..], &["mode=scala", "adversary.lambda=0.0"]].concat());
    let baseline = run(&[&common[..], &["mode=baseline"]].concat());
    let gated: Vec<RunRecord> = scala.records.iter().filter(|r| r.epoch < 2).cloned().collect();
    let n = gated.len();
    ensure!(strip_mode(&gated) == strip_mode(&zero.records[..n]), "pre-gate stream differs from lambda=0");
    ensure!(strip_mode(&zero.records) == strip_mode(&baseline.records), "lambda=0 differs from baseline");
    ensure!(scala.records[n].task_loss == zero.records[n].task_loss, "first gated step should share its snapshot");
    ensure!(scala.records[n + 1] != zero.records[n + 1], "adversary had no effect after the gate");
    Ok(format!(
        "max |y - emb|_inf = {worst:.3e} <= omega; {n} pre-gate records bit-identical to the lambda=0 baseline"
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let cfg = config(&["dataset.train-size=512", "batch-size=64", "mode=no-delay", "adversary.omega=1e-2", "adversary.rho=1e-2"]);
    let (adv, _, kind) = cfg.effective();
    let data = synth_dataset(&cfg.dataset, cfg.seed).unwrap();
    let mut model = Model::init(&cfg.model_spec(), cfg.seed).unwrap();
    let groups = model.group_ranges();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let plan = AdversaryPlan {
        cfg: &adv,
        kind,
        active: true,
    };
    let mut opt = OuterOptimizer::new(cfg.optimizer.clone());
    for step in 0..8 {
        let batch = data.train.slice(step * 64..(step + 1) * 64);
        let one = accumulate_gradients(&model, &partition(&batch, 1, 16).unwrap(), &plan, 9, step as u64, None)
            .unwrap();
        let four =
            accumulate_gradients(&model, &partition(&batch, 4, 16).unwrap(), &plan, 9, step as u64, Some(&pool))
                .unwrap();
        ensure!(one.grad == four.grad, "step {step}: P=1 and P=4 gradients differ");
        let mut p = model.flat_params();
        opt.step(&mut p, &groups, &one.grad, 0.01).unwrap();
        model.set_flat_params(&p).unwrap();
    }

    let base = [
        "dataset.train-size=1024",
        "batch-size=64",
        "micro-batch=16",
        "optimizer.epochs=2",
        "mode=no-delay",
        "diagnostics.sharpness-every=8",
    ];
    let p1 = run(&[&base[..], &["workers=1"]].concat());
    let p4 = run(&[&base[..], &["workers=4"]].concat());
    ensure!(p1.records == p4.records, "P=1 and P=4 metric streams differ");
    ensure!(p1.model.flat_params() == p4.model.flat_params(), "P=1 and P=4 final models differ");

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = run(&[&base[..], &["workers=2"]].concat());
        write_artifacts(&out, d.path()).unwrap();
    }
    for name in ["metrics.csv", "metrics.jsonl", "summary.json", "model-final.json"] {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        ensure!(a == b, "{name} differs between identical runs");
    }
    Ok(format!(
        "8 adversarial steps with bit-identical gradients for P=1 and P=4; {} records equal across worker counts; \
         artifacts byte-identical across reruns",
        p1.records.len()
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let common = ["dataset.train-size=1024", "batch-size=64", "optimizer.epochs=2", "adversary.steps=1"];
    let base = run(&[&common[..], &["mode=baseline"]].concat()).summary;
    let adv = run(&[&common[..], &["mode=scala", "adversary.t-start=0"]].concat()).summary;
    ensure!(
        adv.forward_passes == 2 * base.forward_passes && adv.backward_passes == 2 * base.backward_passes,
        "passes {}/{} vs baseline {}/{}",
        adv.forward_passes,
        adv.backward_passes,
        base.forward_passes,
        base.backward_passes
    );
    let delayed = run(&[&common[..], &["mode=scala", "adversary.t-start=1"]].concat()).summary;
    ensure!(
        delayed.forward_passes == base.forward_passes * 3 / 2,
        "delayed run: {} forward passes",
        delayed.forward_passes
    );
    Ok(format!(
        "forward {} vs {}, backward {} vs {} (ratio 2 exactly)",
        adv.forward_passes, base.forward_passes, adv.backward_passes, base.backward_passes
    ))
}

// ------------------------------------------------------------ criteria 8 and 9

const SEEDS: u64 = 5;

struct Sweep {
    sharp: [Vec<f64>; 3],
    test: [Vec<f64>; 3],
}

fn token_rule_sweep() -> &'static Sweep {
    static SWEEP: std::sync::OnceLock<Sweep> = std::sync::OnceLock::new();
    SWEEP.get_or_init(|| {
        let arms: [&[&str]; 3] = [
            &["mode=baseline", "optimizer.kind=adam", "batch-size=32", "micro-batch=16", "optimizer.lr=1e-3"],
            &["mode=baseline", "optimizer.kind=adam", "batch-size=512", "micro-batch=256", "optimizer.lr=4e-3"],
            &["mode=scala", "batch-size=512", "micro-batch=256", "optimizer.lr=3e-2"],
        ];
        let mut sharp: [Vec<f64>; 3] = Default::default();
        let mut test: [Vec<f64>; 3] = Default::default();
        for (k, arm) in arms.iter().enumerate() {
            for seed in 0..SEEDS {
                let seed = format!("seed={seed}");
                let ov = [&["dataset.train-size=8192", "optimizer.epochs=6", seed.as_str()][..], arm].concat();
                let s = run(&ov).summary;
                sharp[k].push(s.final_sharpness.expect("final sharpness"));
                test[k].push(s.final_test_acc.expect("test accuracy"));
            }
        }
        Sweep { sharp, test }
    })
}

fn separated(lower: &[f64], upper: &[f64]) -> (bool, usize) {
    let (ml, sl) = mean_std(lower);
    let (mu, su) = mean_std(upper);
    let wins = lower.iter().zip(upper).filter(|(l, u)| l < u).count();
    (ml + sl < mu - su, wins)
}

fn criterion_8() -> Outcome {
    let s = token_rule_sweep();
    let [small, large, scala] = &s.sharp;
    let (sep_a, wins_a) = separated(small, large);
    let (sep_b, wins_b) = separated(scala, large);
    let fmt = |v: &[f64]| {
        let (m, sd) = mean_std(v);
        format!("{m:.3}±{sd:.3}")
    };
    let detail = format!(
        "top eigenvalue: baseline B=32 {}, baseline B=512 {}, scala B=512 {} (seed wins {wins_a}/5, {wins_b}/5)",
        fmt(small),
        fmt(large),
        fmt(scala)
    );
    ensure!(sep_a || wins_a >= 4, "large batch not sharper: {detail}");
    ensure!(sep_b || wins_b >= 4, "scala not flatter than large-batch baseline: {detail}");
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let s = token_rule_sweep();
    let means: Vec<f64> = s.test.iter().map(|v| mean_std(v).0).collect();
    let gap = means[0] - means[1];
    ensure!(gap > 0.0, "no generalization gap: B=32 {:.4} vs B=512 {:.4}", means[0], means[1]);
    let recovered = (means[2] - means[1]) / gap;
    let detail = format!(
        "test accuracy: baseline B=32 {:.4}, baseline B=512 {:.4}, scala B=512 {:.4}; gap recovered {:.0}%",
        means[0],
        means[1],
        means[2],
        100.0 * recovered
    );
    ensure!(recovered >= 0.5, "{detail}");
    Ok(detail)
}

// --------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut cells = Vec::new();
    for t in [64usize, 256, 1024] {
        let b = t / 4;
        let mut norms = Vec::new();
        for seed in 0..3 {
            let ov: Vec<String> = vec![
                format!("seed={seed}"),
                "dataset.kind=gaussian-blobs".into(),
                "dataset.separation=2.0".into(),
                format!("dataset.train-size={}", t * b),
                format!("batch-size={b}"),
                format!("micro-batch={b}"),
                "workers=1".into(),
                "model.hidden=[]".into(),
                "optimizer.epochs=1".into(),
                "optimizer.theory-mode=true".into(),
                "optimizer.clip-lo=0.5".into(),
                "optimizer.clip-hi=1.0".into(),
                "mode=no-delay".into(),
                format!("diagnostics.moreau-every={}", t / 64),
                "diagnostics.sharpness-final=false".into(),
            ];
            let cfg = ExperimentConfig::from_toml_str("", &ov).map_err(|e| e.to_string())?;
            let out = run_experiment(&cfg, &RunOptions::default()).map_err(|e| e.to_string())?;
            ensure!(out.records.len() == t, "expected {t} steps, got {}", out.records.len());
            norms.push(out.summary.mean_moreau_sq_norm.ok_or("no Moreau probes")?);
        }
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        xs.push((t as f64).ln());
        ys.push(mean.ln());
        cells.push(format!("T={t}: {mean:.4e}"));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let detail = format!("{}; log-log slope {slope:.3}", cells.join(", "));
    ensure!(slope <= -0.3, "{detail}");
    Ok(detail)
}

// --------------------------------------------------------------- criterion 11

fn criterion_11() -> Outcome {
    let consts = TheoryConstants {
        alpha: vec![0.5, 2.0],
        d: 1.0,
        g: 1.0,
        z: 0.5,
        sigma: vec![],
        eps: 0.01,
        c: 1.0,
        s: 1.5,
        mu: None,
        clip_lo: 1.0,
        clip_hi: 10.0,
    };
    let plan = rate_calculator(&consts, 100).map_err(|e| e.to_string())?;
    ensure!(plan.eta == 0.01, "eta {}", plan.eta);
    ensure!(plan.batch_size == 4.0, "batch size {}", plan.batch_size);
    ensure!(plan.bound == 0.88, "bound {}", plan.bound);
    let inner = rate_calculator(
        &TheoryConstants {
            alpha: vec![1.0],
            eps: 0.08,
            ..consts
        },
        100,
    )
    .map_err(|e| e.to_string())?;
    ensure!(inner.inner_iters == InnerIters::Steps(10), "inner iterations {:?}", inner.inner_iters);
    Ok(format!(
        "eta={}, b={}, bound={}, inner-iters={:?}",
        plan.eta, plan.batch_size, plan.bound, inner.inner_iters
    ))
}

// --------------------------------------------------------------- criterion 12

fn criterion_12() -> Outcome {
    let cfg = config(&[
        "dataset.kind=gaussian-blobs",
        "dataset.separation=2.0",
        "dataset.train-size=512",
        "model.hidden=[]",
    ]);
    let data = synth_dataset(&cfg.dataset, 0).unwrap();
    let model = Model::init(&cfg.model_spec(), 0).unwrap();
    let obj = TaskObjective::new(&model, &data.train);
    let x = model.flat_params();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let alpha = probe_alpha(&obj, &x, 3, 1e-2, 20, &mut rng).map_err(|e| e.to_string())?;
    let logistic = weak_convexity_check(&obj, &x, &alpha, 50, 1.0, 1e-9, &mut rng).map_err(|e| e.to_string())?;
    ensure!(logistic.passed, "logistic loss failed at alpha {alpha:?}: {}", logistic.worst_violation);

    let neg = FnObjective::new(4, |z: &[f64]| {
        Ok((-z.iter().map(|v| v * v).sum::<f64>(), z.iter().map(|v| -2.0 * v).collect()))
    });
    let z0 = [0.3, -1.0, 0.5, 2.0];
    let fails = weak_convexity_check(&neg, &z0, &[1.0], 50, 1.0, 1e-9, &mut rng).map_err(|e| e.to_string())?;
    let passes = weak_convexity_check(&neg, &z0, &[2.0], 50, 1.0, 1e-9, &mut rng).map_err(|e| e.to_string())?;
    ensure!(!fails.passed, "-|x|^2 passed with alpha=1");
    ensure!(passes.passed, "-|x|^2 failed with alpha=2: {}", passes.worst_violation);
    Ok(format!(
        "logistic passes at probed alpha {:.3}; -|x|^2 fails at alpha=1 (violation {:.3}), passes at alpha=2 \
         (violation {:.1e})",
        alpha[0], fails.worst_violation, passes.worst_violation
    ))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome, u64); 12] = [
        (1, "autodiff vs finite differences", criterion_1, 10),
        (2, "power-iteration sharpness vs dense eigensolver", criterion_2, 5),
        (3, "Moreau envelope on a scalar quadratic", criterion_3, 1),
        (4, "update-norm law", criterion_4, 60),
        (5, "projection and delay gate", criterion_5, 60),
        (6, "worker invariance and determinism", criterion_6, 60),
        (7, "pass-counter accounting", criterion_7, 60),
        (8, "sharpness direction on token-rule", criterion_8, 300),
        (9, "generalization-gap closure on token-rule", criterion_9, 300),
        (10, "rate shape in theory mode", criterion_10, 600),
        (11, "theory calculator examples", criterion_11, 1),
        (12, "weak-convexity check", criterion_12, 5),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut shared_sweep = Duration::ZERO;
    for (id, name, f, budget) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let mut elapsed = start.elapsed();
        if id == 8 {
            shared_sweep = elapsed;
        } else if id == 9 && elapsed < shared_sweep {
            elapsed = shared_sweep;
        }
        let over = elapsed.as_secs_f64() > budget as f64;
        let (status, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; exceeded {budget}s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {id:>2} {status} [{:.1}s] {name}: {detail}", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

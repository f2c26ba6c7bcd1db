//! `scala-opt`: train, diagnose and compare experiments from the command line.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or configuration
//! error, 3 numerical abort. Machine-readable output goes to stdout, logs to
//! stderr.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use scala_core::diagnostics::{moreau_grad, rate_calculator, TheoryConstants};
use scala_core::harness::{
    measure_sharpness, moreau_setup, run_experiment, sample_prefix, synth_dataset, write_artifacts,
    ExperimentConfig, RunOptions, RunOutput,
};
use scala_core::model::{Model, TaskObjective};
use serde::Serialize;

use manifest::{sha256_file, Manifest, MANIFEST_FILE};

pub const THREADS_ENV: &str = "SCALA_OPT_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("run aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Other(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Aborted { .. } => 3,
        }
    }
}

impl From<scala_core::Error> for CliError {
    fn from(e: scala_core::Error) -> Self {
        use scala_core::Error as E;
        match e {
            _ if e.is_numerical() => CliError::Numerical(e.to_string()),
            E::Config { .. } | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "scala-opt", version, about = "Large-batch training with lightweight adversarial noise")]
struct Cli {
    /// Raise log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// `key=value` override with a dotted key, e.g. `optimizer.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1.., action = ArgAction::Append)]
    set: Vec<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `output.dir` from the config, else `runs/<verb>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment TOML, or a `manifest.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, summary, checkpoints and a manifest.
    Train(ConfigArgs),
    /// Dominant Hessian eigenvalue of the training loss at a checkpoint or a freshly trained model.
    Sharpness {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Moreau-envelope gradient norm at a checkpoint or a freshly trained model.
    Moreau {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learning rate, batch size, bound and inner iterations for T outer steps.
    Plan {
        /// Constants as TOML, or JSON when the file ends in `.json`.
        constants: PathBuf,
        #[arg(long, short = 'T')]
        steps: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run full scala plus the listed ablation modes and print a summary table.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "no-delay,adam,no-pga")]
        modes: Vec<String>,
    },
    /// Run two or more configs sequentially and print a summary table.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scala-opt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(args) => train(&args),
        Command::Sharpness { args, checkpoint } => sharpness(&args, checkpoint.as_deref()),
        Command::Moreau { args, checkpoint } => moreau(&args, checkpoint.as_deref()),
        Command::Plan { constants, steps, out } => plan(&constants, steps, out),
        Command::Ablate { args, modes } => ablate(&args, &modes),
        Command::Compare { configs, overrides } => compare(&configs, &overrides),
    }
}

fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<ExperimentConfig> {
    let text = match path {
        None => String::new(),
        Some(p) if p.extension().is_some_and(|e| e == "json") => Manifest::read(p)?
            .config
            .ok_or_else(|| CliError::Config(format!("{}: manifest has no config", p.display())))?,
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
    };
    let mut overrides = ov.set.clone();
    if let Some(seed) = ov.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::from_toml_str(&text, &overrides).map_err(|e| CliError::Config(e.to_string()))
}

fn out_dir(flag: Option<&Path>, cfg: Option<&ExperimentConfig>, verb: &str) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output.dir.as_ref()).map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(verb));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn run_options(cfg: &ExperimentConfig) -> Result<RunOptions> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Some(n),
            _ => return Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => None,
    };
    Ok(RunOptions {
        threads: cap.map(|n| n.min(cfg.workers.max(1))),
    })
}

fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    log::info!("running mode {} seed {}", cfg.mode.as_str(), cfg.seed);
    Ok(run_experiment(cfg, &run_options(cfg)?)?)
}

/// Writes to stdout; a closed pipe on the reading side is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Other(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    emit(&format!("{text}\n"))?;
    Ok(text)
}

fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, format!("{text}\n")).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn resolved(cfg: &ExperimentConfig) -> Result<String> {
    Ok(cfg.to_toml_string()?)
}

/// Writes the run's artifacts and manifest into `dir`.
fn persist_run(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    let paths = write_artifacts(out, dir)?;
    let mut m = Manifest::new("train", Some(cfg.seed), Some(resolved(cfg)?));
    m.add_artifacts(dir, &paths)?;
    m.write(dir)?;
    Ok(())
}

fn train(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let dir = out_dir(args.overrides.out.as_deref(), Some(&cfg), "train")?;
    let out = run(&cfg)?;
    persist_run(&cfg, &out, &dir)?;
    print_json(&out.summary)?;
    match out.summary.aborted {
        Some(a) => Err(CliError::Aborted {
            step: a.step,
            reason: a.reason,
        }),
        None => Ok(()),
    }
}

/// The model to diagnose plus manifest inputs describing where it came from.
fn diagnosed_model(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    dir: &Path,
    m: &mut Manifest,
) -> Result<Model> {
    if let Some(p) = checkpoint {
        m.inputs.insert("checkpoint".into(), p.display().to_string());
        m.inputs.insert("checkpoint-sha256".into(), sha256_file(p)?);
        return Ok(Model::load(p)?);
    }
    let mut cfg = cfg.clone();
    cfg.diagnostics.sharpness_final = false;
    let out = run(&cfg)?;
    if let Some(a) = out.summary.aborted {
        return Err(CliError::Aborted {
            step: a.step,
            reason: a.reason,
        });
    }
    let path = dir.join("model-final.json");
    out.model.save(&path)?;
    m.add_artifacts(dir, &[path])?;
    Ok(out.model)
}

fn sharpness(args: &ConfigArgs, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let dir = out_dir(args.overrides.out.as_deref(), Some(&cfg), "sharpness")?;
    let mut m = Manifest::new("sharpness", Some(cfg.seed), Some(resolved(&cfg)?));
    let model = diagnosed_model(&cfg, checkpoint, &dir, &mut m)?;
    let data = synth_dataset(&cfg.dataset, cfg.seed)?;
    let batch = sample_prefix(&data.train, cfg.diagnostics.sharpness_samples);
    let res = measure_sharpness(&model, &batch, &cfg, 0)?;
    let report = serde_json::json!({
        "samples": batch.len(),
        "eigenvalue": res.eigenvalue,
        "converged": res.converged,
        "iterations": res.iterations,
        "negative": res.negative,
        "rayleigh_trace": res.rayleigh_trace,
    });
    let text = print_json(&report)?;
    let path = write_file(&dir.join("sharpness.json"), &text)?;
    m.add_artifacts(&dir, &[path])?;
    m.write(&dir)?;
    Ok(())
}

fn moreau(args: &ConfigArgs, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let dir = out_dir(args.overrides.out.as_deref(), Some(&cfg), "moreau")?;
    let mut m = Manifest::new("moreau", Some(cfg.seed), Some(resolved(&cfg)?));
    let model = diagnosed_model(&cfg, checkpoint, &dir, &mut m)?;
    let data = synth_dataset(&cfg.dataset, cfg.seed)?;
    let batch = sample_prefix(&data.train, cfg.diagnostics.moreau_samples);
    let (alpha, inner_lr) = moreau_setup(&model, &batch, &cfg)?;
    let probe = moreau_grad(
        &TaskObjective::new(&model, &batch),
        &model.flat_params(),
        &alpha,
        cfg.diagnostics.moreau_inner_iters,
        inner_lr,
    )?;
    let report = serde_json::json!({
        "samples": batch.len(),
        "alpha": alpha,
        "inner_lr": inner_lr,
        "sq_norm": probe.sq_norm,
        "residual": probe.residual,
        "iterations": probe.iterations,
        "envelope_value": probe.envelope_value,
    });
    let text = print_json(&report)?;
    let path = write_file(&dir.join("moreau.json"), &text)?;
    m.add_artifacts(&dir, &[path])?;
    m.write(&dir)?;
    Ok(())
}

fn read_constants(path: &Path) -> Result<TheoryConstants> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.message().to_string())
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn plan(constants: &Path, steps: u64, out: Option<PathBuf>) -> Result<()> {
    let consts = read_constants(constants)?;
    let plan = rate_calculator(&consts, steps).map_err(|e| CliError::Config(e.to_string()))?;
    let text = print_json(&plan)?;
    let dir = out_dir(out.as_deref(), None, "plan")?;
    let path = write_file(&dir.join("plan.json"), &text)?;
    let mut m = Manifest::new("plan", None, None);
    m.inputs.insert("constants".into(), constants.display().to_string());
    m.inputs.insert("constants-sha256".into(), sha256_file(constants)?);
    m.inputs.insert("steps".into(), steps.to_string());
    m.add_artifacts(&dir, &[path])?;
    m.write(&dir)?;
    Ok(())
}

#[derive(Serialize)]
struct Row {
    name: String,
    mode: String,
    seed: u64,
    final_train_acc: Option<f64>,
    final_test_acc: Option<f64>,
    best_test_acc: Option<f64>,
    final_sharpness: Option<f64>,
    forward_passes: u64,
    backward_passes: u64,
    status: String,
}

/// Runs each `(name, config)` sequentially into `dir/<name>`, then writes and
/// prints the summary table. Aborted runs stay in the table, marked in `status`.
fn run_table(verb: &str, runs: Vec<(String, ExperimentConfig)>, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let mut m = Manifest::new(verb, None, None);
    let mut aborted = None;
    for (name, cfg) in &runs {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
        let (status, summary) = match run(cfg) {
            Ok(out) => {
                persist_run(cfg, &out, &sub)?;
                let status = match &out.summary.aborted {
                    Some(a) => {
                        aborted.get_or_insert_with(|| (a.step, format!("{name}: {}", a.reason)));
                        format!("aborted@{}", a.step)
                    }
                    None => "ok".to_string(),
                };
                (status, Some(out.summary))
            }
            Err(CliError::Numerical(reason)) => {
                aborted.get_or_insert_with(|| (0, format!("{name}: {reason}")));
                ("failed".to_string(), None)
            }
            Err(e) => return Err(e),
        };
        m.inputs.insert(format!("{name}.config"), resolved(cfg)?);
        m.add_artifacts(dir, &[sub.join(MANIFEST_FILE)].into_iter().filter(|p| p.exists()).collect::<Vec<_>>())?;
        rows.push(Row {
            name: name.clone(),
            mode: cfg.mode.as_str().to_string(),
            seed: cfg.seed,
            final_train_acc: summary.as_ref().and_then(|s| s.final_train_acc),
            final_test_acc: summary.as_ref().and_then(|s| s.final_test_acc),
            best_test_acc: summary.as_ref().and_then(|s| s.best_test_acc),
            final_sharpness: summary.as_ref().and_then(|s| s.final_sharpness),
            forward_passes: summary.as_ref().map_or(0, |s| s.forward_passes),
            backward_passes: summary.as_ref().map_or(0, |s| s.backward_passes),
            status,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Other(e.to_string()))?;
    }
    let table = String::from_utf8(w.into_inner().map_err(|e| CliError::Other(e.to_string()))?)
        .expect("csv output is utf-8");
    emit(&table)?;
    let path = dir.join(format!("{verb}.csv"));
    fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
    m.add_artifacts(dir, &[path])?;
    m.write(dir)?;
    match aborted {
        Some((step, reason)) => Err(CliError::Aborted { step, reason }),
        None => Ok(()),
    }
}

fn ablate(args: &ConfigArgs, modes: &[String]) -> Result<()> {
    let base = load_config(args.config.as_deref(), &args.overrides)?;
    let dir = out_dir(args.overrides.out.as_deref(), Some(&base), "ablate")?;
    let mut names = vec!["scala".to_string()];
    names.extend(modes.iter().filter(|m| m.as_str() != "scala").cloned());
    let mut runs = Vec::new();
    for mode in names {
        let mut ov = args.overrides.clone();
        ov.set.push(format!("mode={mode}"));
        let cfg = load_config(args.config.as_deref(), &ov)?;
        runs.push((cfg.mode.as_str().to_string(), cfg));
    }
    run_table("ablate", runs, &dir)
}

fn compare(configs: &[PathBuf], ov: &Overrides) -> Result<()> {
    if configs.len() < 2 {
        return Err(CliError::Config("compare needs at least two configs".into()));
    }
    let mut runs = Vec::new();
    for (i, path) in configs.iter().enumerate() {
        let cfg = load_config(Some(path), ov)?;
        let stem = path.file_stem().map_or_else(|| "config".into(), |s| s.to_string_lossy().into_owned());
        runs.push((format!("{i}-{stem}"), cfg));
    }
    let dir = out_dir(ov.out.as_deref(), None, "compare")?;
    run_table("compare", runs, &dir)
}

//! Experiment configuration: a single TOML document with nested sections.
//!
//! Every field can be overridden with a dotted `section.key=value` string;
//! values are parsed as TOML literals and fall back to bare strings.

use serde::{Deserialize, Serialize};

use crate::adversary::{AdvNoiseConfig, LabelSource, RegularizerKind};
use crate::error::{Error, Result};
use crate::model::{Activation, InputSpec, ModelSpec, TaskKind};
use crate::optimizer::{OptimizerKind, OuterOptConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// No adversarial term at any step.
    Baseline,
    /// Full method as configured.
    #[default]
    Scala,
    /// Adversary enabled from the first epoch.
    #[serde(alias = "ablation-no-delay")]
    NoDelay,
    /// Outer update replaced by Adam.
    #[serde(alias = "ablation-adam")]
    Adam,
    /// Regularization strength forced to zero.
    #[serde(alias = "ablation-no-pga")]
    NoPga,
    /// Single Gaussian draw in the box instead of gradient ascent.
    #[serde(alias = "ablation-gaussian-noise")]
    GaussianNoise,
    /// Ground-truth labels instead of label probabilities.
    #[serde(alias = "ablation-gt-label")]
    GtLabel,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Scala => "scala",
            Mode::NoDelay => "no-delay",
            Mode::Adam => "adam",
            Mode::NoPga => "no-pga",
            Mode::GaussianNoise => "gaussian-noise",
            Mode::GtLabel => "gt-label",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        #[derive(Deserialize)]
        struct W {
            m: Mode,
        }
        toml::from_str::<W>(&format!("m = {:?}", s))
            .map(|w| w.m)
            .map_err(|_| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

/// How perturbed embeddings are produced when the adversary is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversaryKind {
    Off,
    Pga,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TokenRule,
    GaussianBlobs,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train_size: usize,
    pub test_size: usize,
    /// Token-rule vocabulary size.
    pub vocab: usize,
    pub seq_len: usize,
    /// Token-rule: number of positive keywords (and of negative keywords).
    pub keywords: usize,
    /// Feature dimension for blobs and regression.
    pub dim: usize,
    /// Distance between blob means, in units of the per-coordinate std.
    pub separation: f64,
    /// Regression target noise std.
    pub noise: f64,
    /// Probability of flipping a classification label.
    pub label_noise: f64,
    /// Data seed; the experiment seed when unset.
    pub seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::TokenRule,
            train_size: 4096,
            test_size: 1024,
            vocab: 64,
            seq_len: 16,
            keywords: 8,
            dim: 8,
            separation: 4.0,
            noise: 0.1,
            label_noise: 0.0,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        ModelConfig {
            embed_dim: spec.embed_dim,
            hidden: spec.hidden,
            activation: spec.activation,
            attention: spec.attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Measure sharpness of the final model.
    pub sharpness_final: bool,
    /// Measure sharpness every this many steps (0 disables).
    pub sharpness_every: usize,
    pub sharpness_iters: usize,
    pub sharpness_tol: f64,
    /// Training examples (taken from the front of the training set) used for
    /// sharpness.
    pub sharpness_samples: usize,
    /// Moreau-envelope probe every this many steps (0 disables).
    pub moreau_every: usize,
    pub moreau_samples: usize,
    pub moreau_inner_iters: usize,
    /// Fixed per-group alpha; probed at initialization when unset.
    pub moreau_alpha: Option<Vec<f64>>,
    pub alpha_probes: usize,
    pub alpha_radius: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            sharpness_final: true,
            sharpness_every: 0,
            sharpness_iters: 100,
            sharpness_tol: 1e-6,
            sharpness_samples: 512,
            moreau_every: 0,
            moreau_samples: 1024,
            moreau_inner_iters: 500,
            moreau_alpha: None,
            alpha_probes: 3,
            alpha_radius: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Artifact directory; nothing is written when unset.
    pub dir: Option<String>,
    /// Write a checkpoint every this many epochs (0: final model only).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    /// Simulated workers `P`.
    pub workers: usize,
    /// Total batch `B` per outer step.
    pub batch_size: usize,
    /// Micro-batch size `b`.
    pub micro_batch: usize,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub optimizer: OuterOptConfig,
    pub adversary: AdvNoiseConfig,
    pub diagnostics: DiagnosticsConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: Mode::Scala,
            workers: 2,
            batch_size: 64,
            micro_batch: 16,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            optimizer: OuterOptConfig::default(),
            adversary: AdvNoiseConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(key, format!("`{part}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn decode(table: &toml::Table) -> std::result::Result<ExperimentConfig, String> {
    let text = toml::to_string(table).map_err(|e| e.to_string())?;
    toml::from_str(&text).map_err(|e| e.message().to_string())
}

impl ExperimentConfig {
    /// Parses a TOML document, applies `key=value` overrides in order and
    /// validates the result. Errors name the offending key.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("<config>", e.message().to_string()))?;
        decode(&table).map_err(|m| Error::config("<config>", m))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.as_str(), "override must look like key=value"))?;
            let key = key.trim();
            set_path(&mut table, key, parse_value(raw.trim()))?;
            decode(&table).map_err(|m| Error::config(key, m))?;
        }
        let cfg = decode(&table).map_err(|m| Error::config("<config>", m))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        if self.micro_batch == 0 {
            return Err(Error::config("micro-batch", "must be >= 1"));
        }
        if self.batch_size == 0 || self.batch_size % (self.workers * self.micro_batch) != 0 {
            return Err(Error::config(
                "batch-size",
                format!(
                    "batch-size ({}) must be a positive multiple of workers x micro-batch ({} x {})",
                    self.batch_size, self.workers, self.micro_batch
                ),
            ));
        }
        let d = &self.dataset;
        if d.train_size < self.batch_size {
            return Err(Error::config("dataset.train-size", "smaller than one batch"));
        }
        if d.test_size == 0 {
            return Err(Error::config("dataset.test-size", "must be >= 1"));
        }
        if !(0.0..=0.5).contains(&d.label_noise) {
            return Err(Error::config("dataset.label-noise", "must be in [0, 0.5]"));
        }
        if d.kind == DatasetKind::TokenRule {
            if d.seq_len == 0 || d.vocab < 2 * d.keywords || d.keywords == 0 {
                return Err(Error::config(
                    "dataset.keywords",
                    "token-rule needs seq-len >= 1 and vocab >= 2 x keywords >= 2",
                ));
            }
        } else if d.dim == 0 {
            return Err(Error::config("dataset.dim", "must be >= 1"));
        }
        if d.kind == DatasetKind::Regression && self.adversary.regularizer == RegularizerKind::KlSym {
            return Err(Error::config(
                "adversary.regularizer",
                "regression tasks need the squared regularizer",
            ));
        }
        self.optimizer.validate()?;
        self.adversary.validate()?;
        self.model_spec().validate().map_err(|e| Error::config("model", e.to_string()))?;
        let diag = &self.diagnostics;
        if diag.sharpness_iters == 0 {
            return Err(Error::config("diagnostics.sharpness-iters", "must be >= 1"));
        }
        if diag.alpha_probes == 0 || !(diag.alpha_radius > 0.0) {
            return Err(Error::config("diagnostics.alpha-probes", "need >= 1 probe and a positive radius"));
        }
        if let Some(alpha) = &diag.moreau_alpha {
            let groups = self.model_spec_groups();
            if alpha.len() != groups || alpha.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::config(
                    "diagnostics.moreau-alpha",
                    format!("needs {groups} positive entries"),
                ));
            }
        }
        Ok(())
    }

    fn model_spec_groups(&self) -> usize {
        let tokens = usize::from(self.dataset.kind == DatasetKind::TokenRule);
        tokens + usize::from(self.model.attention) + self.model.hidden.len() + 1
    }

    /// Architecture implied by the dataset and model sections.
    pub fn model_spec(&self) -> ModelSpec {
        let d = &self.dataset;
        let (input, task) = match d.kind {
            DatasetKind::TokenRule => (
                InputSpec::Tokens {
                    vocab: d.vocab,
                    seq_len: d.seq_len,
                },
                TaskKind::Classification,
            ),
            DatasetKind::GaussianBlobs => (InputSpec::Features { dim: d.dim }, TaskKind::Classification),
            DatasetKind::Regression => (InputSpec::Features { dim: d.dim }, TaskKind::Regression),
        };
        ModelSpec {
            input,
            embed_dim: self.model.embed_dim,
            hidden: self.model.hidden.clone(),
            classes: 2,
            task,
            activation: self.model.activation,
            attention: self.model.attention,
        }
    }

    /// Adversary, optimizer and perturbation kind after applying the mode.
    pub fn effective(&self) -> (AdvNoiseConfig, OuterOptConfig, AdversaryKind) {
        let mut adv = self.adversary.clone();
        let mut opt = self.optimizer.clone();
        let mut kind = AdversaryKind::Pga;
        match self.mode {
            Mode::Baseline => kind = AdversaryKind::Off,
            Mode::Scala => {}
            Mode::NoDelay => adv.t_start = 0,
            Mode::Adam => opt.kind = OptimizerKind::Adam,
            Mode::NoPga => adv.lambda = 0.0,
            Mode::GaussianNoise => kind = AdversaryKind::Gaussian,
            Mode::GtLabel => adv.label_source = LabelSource::GroundTruth,
        }
        if adv.lambda == 0.0 {
            kind = AdversaryKind::Off;
        }
        (adv, opt, kind)
    }

    pub fn micro_batches_per_worker(&self) -> usize {
        self.batch_size / (self.workers * self.micro_batch)
    }
}

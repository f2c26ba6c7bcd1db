//! Per-step records, run summary and their file formats.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One outer step. Wall time is kept out of this record so that metric
/// files are reproducible byte for byte; see [`super::RunOutput::timings`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub epoch: usize,
    pub mode: String,
    pub lr: f64,
    pub task_loss: f64,
    pub reg_value: f64,
    pub lambda: f64,
    pub adversary_active: bool,
    pub update_norms: Vec<f64>,
    pub nu: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub skipped_groups: Vec<usize>,
    /// Largest `|y - emb|` over the step's perturbations.
    pub max_perturbation: f64,
    /// Set on the last step of each epoch.
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub sharpness: Option<f64>,
    pub moreau_sq_norm: Option<f64>,
    /// Cumulative pass counters after this step.
    pub forward_passes: u64,
    pub backward_passes: u64,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    step: usize,
    epoch: usize,
    mode: &'a str,
    lr: f64,
    task_loss: f64,
    reg_value: f64,
    lambda: f64,
    adversary_active: bool,
    update_norms: String,
    nu: String,
    grad_norms: String,
    skipped_groups: String,
    max_perturbation: f64,
    train_acc: Option<f64>,
    test_acc: Option<f64>,
    sharpness: Option<f64>,
    moreau_sq_norm: Option<f64>,
    forward_passes: u64,
    backward_passes: u64,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl RunRecord {
    fn csv_row(&self) -> CsvRow<'_> {
        CsvRow {
            step: self.step,
            epoch: self.epoch,
            mode: &self.mode,
            lr: self.lr,
            task_loss: self.task_loss,
            reg_value: self.reg_value,
            lambda: self.lambda,
            adversary_active: self.adversary_active,
            update_norms: join(&self.update_norms),
            nu: join(&self.nu),
            grad_norms: join(&self.grad_norms),
            skipped_groups: join(&self.skipped_groups),
            max_perturbation: self.max_perturbation,
            train_acc: self.train_acc,
            test_acc: self.test_acc,
            sharpness: self.sharpness,
            moreau_sq_norm: self.moreau_sq_norm,
            forward_passes: self.forward_passes,
            backward_passes: self.backward_passes,
        }
    }
}

/// CSV with a header row; vector fields are `;`-separated.
pub fn write_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(records: &[RunRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<RunRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Problem constants measured along a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredConstants {
    /// Per-group smoothness probed at initialization.
    pub alpha: Vec<f64>,
    /// Envelope value at initialization minus the lowest probed loss.
    pub d: f64,
    /// Largest infinity norm of an averaged gradient.
    pub g: f64,
    /// Largest `|(x_hat - x)_j / grad_j|` at Moreau probes times the largest sigma.
    pub z: f64,
    /// Largest per-group gradient spread.
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub steps: usize,
    pub epochs_completed: usize,
    pub final_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub final_task_loss: Option<f64>,
    pub final_sharpness: Option<f64>,
    pub sharpness_converged: Option<bool>,
    pub forward_passes: u64,
    pub backward_passes: u64,
    /// Uniform average of the sampled Moreau squared gradient norms.
    pub mean_moreau_sq_norm: Option<f64>,
    pub constants: Option<MeasuredConstants>,
    pub aborted: Option<Abort>,
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

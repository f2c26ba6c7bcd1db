//! Simulated data-parallel training harness.
//!
//! An experiment is a TOML document ([`ExperimentConfig`]); [`run_experiment`]
//! turns it into one [`RunRecord`] per outer step plus a [`Summary`]. Workers
//! are simulated: micro-batch gradients may be computed on a thread pool but
//! are always reduced in the same order, so results do not depend on the
//! worker count or thread scheduling.

mod config;
mod data;
mod metrics;
mod run;
mod workers;

pub use config::{
    AdversaryKind, DatasetKind, DatasetSpec, DiagnosticsConfig, ExperimentConfig, Mode, ModelConfig,
    OutputConfig,
};
pub use data::{synth_dataset, Dataset};
pub use metrics::{read_jsonl, write_csv, write_jsonl, write_summary, Abort, MeasuredConstants, RunRecord, Summary};
pub use run::{
    measure_sharpness, moreau_setup, run_experiment, sample_prefix, write_artifacts, RunOptions, RunOutput,
};
pub use workers::{
    accumulate_gradients, micro_batch_gradient, micro_seed, pairwise_sum, partition, Accumulated,
    AdversaryPlan, MicroBatchResult, WorkerReport,
};

//! Scoring, the synthetic benchmark, and the multi-run experiment harness.

mod experiment;
mod metrics;
mod synthetic;

pub use experiment::{
    apply_param, run_experiment, run_once, sweep, DataSource, Engine, ExperimentConfig, ExperimentReport, RunResult,
    Selection, Summary, SweepParam, SweepTable,
};
pub use metrics::{align_labels, count_distinct, mean_f1, score, LabelAlignment, ALIGNMENT_RULE};
pub use synthetic::{LatentDataset, SyntheticConfig};

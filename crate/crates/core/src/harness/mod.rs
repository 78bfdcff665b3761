//! Training loop, baselines, linear-probe benchmarks and the ablation ladder.

mod ablation;
mod bench;
mod config;
mod probe;
mod train;

pub use ablation::{run_ablation, AblationRow, AblationTable, Rung, RungDelta};
pub use bench::{
    benchmark_across, benchmark_across_with, benchmark_identity, benchmark_single, encode_split, evaluate, evaluate_raw,
    extract_features, raw_features, raw_split, write_reports_csv, BenchmarkReport, DomainScore, Encoded, EvalOptions,
    LabelAudit, Task,
};
pub use config::{Method, TrainConfig, TRAIN_SCHEMA_VERSION};
pub use probe::{linear_probe, stratified_subset, Features, LinearProbe, ProbeConfig};
pub use train::{train, train_to, train_until, InputNorm, RunInfo, StepLog, Trained, METRICS_FILE};

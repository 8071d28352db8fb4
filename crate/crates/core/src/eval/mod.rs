//! Evaluation harness: manifests, pipeline runs, metrics, sweeps and latency.

mod latency;
mod manifest;
mod metrics;
mod pipeline;
mod stats;
mod sweep;

pub use latency::{ensemble_latency, expected_latency, ExpectedLatency};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use metrics::{metrics, render_metrics_table, Confusion, ConfusionMatrix, MetricsReport};
pub use pipeline::{
    read_records, run_pipeline, write_records, ArbiterStage, Cascade, ClassifyOutcome, EvalRecord, StageLatencies,
    RECORD_SCHEMA_VERSION,
};
pub use stats::{dataset_stats, render_stats_table, ClassCount, DatasetStats};
pub use sweep::{
    sweep_csv, sweep_svg, sweep_trigger, threshold_grid, unit_steps, ArbiterFn, ArbiterModel, OperatingPoint,
    SweepPoint, SweepResult, REPORTED_TRIGGER_RATES,
};

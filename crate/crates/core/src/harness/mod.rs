//! Config-driven experiments: pretraining, online fine-tuning, aggregation
//! and export.

pub mod compare;
pub mod config;
pub mod export;
pub mod run;

pub use compare::{compare_strategies, Comparison, ComparisonRow};
pub use config::ExperimentConfig;
pub use export::{export_metrics, load_records, save_records, summarize, Spread, StrategySummary};
pub use run::{run_experiment, run_single, EvalPoint, PeriodRow, RunRecord};

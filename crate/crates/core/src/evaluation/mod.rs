//! Synthetic benchmark, SID-level hit rate, baselines and experiment runner.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod world;

pub use experiment::{run_experiment, Ablation, Baseline, ExperimentConfig};
pub use metrics::{hr_at_k, metrics_csv, write_metrics_csv, MetricsReport, HR_KS};
pub use world::{generate_world, Action, Event, ItemRecord, UserRecord, World, WorldConfig};

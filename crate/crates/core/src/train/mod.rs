//! Training, evaluation, benchmarks and analysis passes behind the CLI.

pub mod analysis;
pub mod bench;
pub mod config;
pub mod optim;
pub mod run;

pub use analysis::{histogram_similarity, sweep_theta, Histogram, SweepRow};
pub use bench::{bench_routing, BenchRow, BenchShape};
pub use config::{RunConfig, TrainConfig};
pub use optim::{lr_at, optimizer_step, AdamConfig, AdamState};
pub use run::{evaluate, load_data, train, EpochRow, RunReport, TrainOutcome};

//! Command-line driver: config loading, training, evaluation, benchmarks
//! and synthetic data generation. `main.rs` only parses flags.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_benchmark, cmd_eval, cmd_synth_gen, cmd_train, BenchmarkOutput, EvalArgs, EvalData,
    EvalOutput, SplitPart, SynthFormat, TrainSummary,
};
pub use config::{load, RunConfig};
pub use error::{CliError, Result};

//! Library side of the `mapanno` command-line tool.

pub mod annotate;
pub mod config;
pub mod evaluate;
pub mod overlay;
pub mod review;
pub mod segment;
pub mod synth;
pub mod trajectory;

use mapanno_core::par::Execution;

/// `Some(1)` worker means a plain sequential run.
pub fn execution_for(workers: Option<usize>) -> Execution {
    match workers {
        Some(1) => Execution::Sequential,
        _ => Execution::default(),
    }
}

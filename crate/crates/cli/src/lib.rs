//! Configuration loading and the end-to-end pipeline behind the `ionsync` binary.
//!
//! Exit codes of the binary: 0 success, 2 configuration error, 3 stage or
//! output failure, 4 Langevin divergence.

pub mod config;
pub mod pipeline;

pub use config::{load_config, parse_sweep, Format, RunConfig};
pub use pipeline::{run_pipeline, PipelineReport, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: ionsync::Error,
    },

    #[error("{aborted} of {total} Langevin trajectories diverged")]
    Divergence { aborted: usize, total: usize },

    #[error("output: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } | CliError::Output(_) => 3,
            CliError::Divergence { .. } => 4,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

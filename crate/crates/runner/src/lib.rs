//! Batch tooling for the consensus game: single runs, resumable parameter
//! sweeps, log aggregation and replay, behind the `consensus-sim` binary.

use std::path::Path;

use thiserror::Error;

pub mod cli;
pub mod replay;
pub mod report;
pub mod sweep;

pub use sweep::{derive_seed, run_sweep, SweepOptions, SweepReport, SweepSpec};

/// Errors surfaced to the command line. Validation problems (bad input)
/// exit with 1, runtime failures with 2.
#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl RunnerError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        let msg = format!("{}: {err}", path.display());
        if err.kind() == std::io::ErrorKind::NotFound {
            RunnerError::Validation(msg)
        } else {
            RunnerError::Runtime(msg)
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Validation(_) => 1,
            RunnerError::Runtime(_) => 2,
        }
    }
}

/// Gateway settings for `model`: the endpoint comes from `endpoint` or the
/// `LLM_ENDPOINT` variable, the key from `LLM_API_KEY`.
pub fn gateway_config(model: &str, endpoint: Option<&str>) -> Result<consensus_llm::GatewayConfig, RunnerError> {
    use consensus_llm::gateway::{ENV_API_KEY, ENV_ENDPOINT};
    let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
    let endpoint = endpoint
        .map(str::to_string)
        .or_else(|| env(ENV_ENDPOINT))
        .ok_or_else(|| {
            RunnerError::Validation(format!(
                "LLM policies need an endpoint: set {ENV_ENDPOINT} or gateway.endpoint_url"
            ))
        })?;
    let mut cfg = consensus_llm::GatewayConfig::new(endpoint, model);
    cfg.api_key = env(ENV_API_KEY);
    Ok(cfg)
}

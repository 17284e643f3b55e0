use std::path::Path;

use cedm_core::codec::CodecError;
use cedm_core::dag::DagError;
use cedm_core::diffusion::ModelError;
use cedm_core::inference::InferenceError;
use cedm_core::metrics::MetricsError;
use cedm_core::sampler::SamplerError;
use cedm_core::scm::ScmError;
use thiserror::Error;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or labels (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or mismatched data and archives (exit 3).
    #[error("{0}")]
    Data(String),
    /// Divergence, degenerate statistics, non-finite training (exit 4).
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<DagError> for CliError {
    fn from(e: DagError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ScmError> for CliError {
    fn from(e: ScmError) -> Self {
        match e {
            ScmError::Dimension(_) => CliError::Data(e.to_string()),
            ScmError::NotPositiveDefinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric(_) => CliError::Numeric(e.to_string()),
            ModelError::Schedule(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Diverged { .. } => CliError::Numeric(e.to_string()),
            SamplerError::Scm(s) => s.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Shape(_) | CodecError::TooFewSamples(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Degenerate | MetricsError::NonFinite => CliError::Numeric(e.to_string()),
            MetricsError::TooFewPermutations(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Range(_) | InferenceError::Hypothesis(_) => CliError::Usage(e.to_string()),
            InferenceError::Dag(e) => e.into(),
            InferenceError::Model(e) => e.into(),
            InferenceError::Sampler(e) => e.into(),
            InferenceError::Codec(e) => e.into(),
            InferenceError::Metrics(e) => e.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Which loss term produced a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Prediction,
    Orthogonality,
    Permutation,
    Baseline,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            LossTerm::Prediction => "prediction KL (term 1)",
            LossTerm::Orthogonality => "basis overlap (term 2)",
            LossTerm::Permutation => "permutation KL (term 3)",
            LossTerm::Baseline => "baseline KL",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("integration produced a non-finite state from x = {x:?} with tau = {tau}")]
    Integration { x: Vec<f64>, tau: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("degenerate density: {0}")]
    Degenerate(String),

    #[error("grid mismatch: {0}")]
    Grid(String),

    #[error("non-finite value in {term}")]
    Numerical { term: LossTerm },

    #[error("rollout collapsed to an all-zero field at step {step}")]
    Collapse { step: usize },

    #[error(
        "training diverged at epoch {epoch}: loss {loss:.4e} exceeds {factor}x the initial {initial:.4e}; try a smaller step size"
    )]
    Divergence {
        epoch: usize,
        loss: f64,
        initial: f64,
        factor: f64,
    },

    #[error("stage `{stage}` failed (config {config_hash}): {source}")]
    Stage {
        stage: &'static str,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::Resource(_)
            | Error::Grid(_)
            | Error::Json(_) => 2,
            Error::Integration { .. }
            | Error::Degenerate(_)
            | Error::Numerical { .. }
            | Error::Collapse { .. }
            | Error::Divergence { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io(_) => 1,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str, config_hash: &str) -> Error {
        Error::Stage {
            stage,
            config_hash: config_hash.to_string(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

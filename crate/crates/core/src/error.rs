use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("degenerate contact: puck and mallet centers coincide")]
    DegenerateContact,

    #[error("regressor is rank deficient (deficient columns: {columns:?}, condition {condition:.3e})")]
    RankDeficient { columns: Vec<usize>, condition: f64 },

    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("no feasible shot angle")]
    NoShot,

    #[error("no plan: {0}")]
    NoPlan(String),

    #[error("planning horizon too short: {steps} steps (need at least 2)")]
    HorizonTooShort { steps: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("artifact {path} has schema version {found}, expected {expected}; regenerate it with `{command}`")]
    SchemaVersion {
        path: String,
        found: u32,
        expected: u32,
        command: String,
    },

    #[error("missing artifact {path}; generate it with `{command}`")]
    MissingArtifact { path: String, command: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::DegenerateContact => "degenerate_contact",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NotEnoughSamples { .. } => "not_enough_samples",
            Error::NonFinite(_) => "non_finite",
            Error::SingularInnovation => "singular_innovation",
            Error::NoShot => "no_shot",
            Error::NoPlan(_) => "no_plan",
            Error::HorizonTooShort { .. } => "horizon_too_short",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::SchemaVersion { .. } => "schema_version",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

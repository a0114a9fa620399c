use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("no value for state {state} at t={t}")]
    MissingValue { t: usize, state: usize },
    #[error("announced policy does not cover state {state} at t={t}")]
    UncoveredState { t: usize, state: usize },
    #[error("no dataset for driver type {0}")]
    MissingDataset(u32),
    #[error("unknown driver type {0}")]
    UnknownDriverType(u32),
    #[error("need {need} samples but only {have} available")]
    InsufficientSamples { need: usize, have: usize },
    #[error("meta batch is empty")]
    EmptyBatch,
    #[error("utility table has {found} states, scenario needs {expected}")]
    TableShape { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

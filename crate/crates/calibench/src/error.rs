//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // dataset
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("item {id}: {message}")]
    InvalidItem { id: String, message: String },
    #[error("item {id}: attachment file not found: {path}")]
    MissingAttachment { id: String, path: PathBuf },
    #[error("pairing: {0}")]
    Pairing(String),

    // prompting
    #[error("no template for strategy {strategy} and ({category}, {subtask}, {modality})")]
    NoTemplate {
        strategy: String,
        category: String,
        subtask: String,
        modality: String,
    },
    #[error("item {id}: vcap requires a visual input, item modality is text")]
    VcapOnTextItem { id: String },
    #[error("template {template}: missing binding for placeholder \"{placeholder}\"")]
    MissingBinding {
        template: String,
        placeholder: String,
    },
    #[error("template {template}: unused binding \"{placeholder}\"")]
    UnusedBinding {
        template: String,
        placeholder: String,
    },
    #[error("template {template}: unknown placeholder \"{placeholder}\" in body")]
    UnknownPlaceholder {
        template: String,
        placeholder: String,
    },
    #[error("template {template}: {message}")]
    BadTemplate { template: String, message: String },
    #[error("second-round binding requires a non-empty first-round output")]
    EmptyFirstRound,
    #[error("invalid dialogue plan: {0}")]
    InvalidPlan(String),

    // client
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("retries exhausted after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("model returned empty content")]
    EmptyResponse,
    #[error("transport: {0}")]
    Transport(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    // parsing
    #[error("non-numeric confidence value: {0:?}")]
    NonNumericConfidence(String),
    #[error("missing confidence tag")]
    MissingConfidence,
    #[error("no well-formed guesses in top-k output")]
    NoGuesses,

    // metrics / report
    #[error("no records after filtering")]
    EmptyRecords,
    #[error("auroc requires at least one correct and one incorrect record")]
    DegenerateAuroc,
    #[error("group {group}: missing {side}-modality records")]
    MissingModalitySide { group: String, side: &'static str },
    #[error("unknown group label: {0}")]
    UnknownGroupLabel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

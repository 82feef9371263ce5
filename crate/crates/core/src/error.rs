use std::path::PathBuf;

use thiserror::Error;

use crate::types::State;

/// Failures raised by a completion backend.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("scripted backend exhausted (prompt starting {prompt_head:?})")]
    ScriptExhausted { prompt_head: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Whether a retry has a chance of succeeding.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout(_) => true,
            BackendError::HttpStatus { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("document text is empty")]
    EmptyDocument,
    #[error("sentence {0} is empty")]
    EmptySentence(usize),
    #[error("sentence id {id} is not in document {doc}")]
    UnknownSentence { doc: String, id: usize },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PromptError {
    #[error("not enough exemplars for state {state}: need {needed}, have {available}")]
    MissingExemplars {
        state: State,
        needed: usize,
        available: usize,
    },
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("document has no sentences")]
    NoSentences,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("backend call in state {state} failed")]
    Backend {
        state: State,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("state {0} produced an empty utterance")]
    EmptyGeneration(State),
    #[error("invalid run configuration: {0}")]
    InvalidRunConfig(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no pseudo-reference for conversation {conversation_id} turn {turn_index}")]
    MissingReference {
        conversation_id: String,
        turn_index: usize,
    },
    #[error("document {0} not found")]
    MissingDocument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("tokenizer unavailable: {0}")]
    TokenizerUnavailable(String),
    #[error("source {index} has {available} items but {needed} are required")]
    InsufficientSource {
        index: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid mix specification: {0}")]
    InvalidMix(String),
    #[error("document {0} not found")]
    MissingDocument(String),
    #[error(transparent)]
    Document(#[from] DocumentError),
}

//! Synthesis and evaluation of document-grounded conversations.
//!
//! Conversations are generated turn by turn by a small state machine that
//! drives completion backends through per-state prompts
//! ([`engine`], [`prompts`], [`backend`]). The result is scored with lexical
//! metrics against the grounding document and against reference responses
//! ([`metrics`], [`eval`]) and exported for instruction tuning ([`dataset`]).

pub mod backend;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod pool;
pub mod prompts;
pub mod segment;
pub mod types;

pub use backend::{
    Backend, BackendConfig, CompletionResult, DecodingMode, DecodingParams, FnBackend,
    HttpBackend, Matcher, Pick, ScriptSpec, ScriptedBackend,
};
pub use engine::{Backends, CorpusSummary, Engine, RunConfig};
pub use error::{BackendError, DatasetError, DocumentError, EngineError, EvalError, PromptError};
pub use metrics::{ClassScores, NoAnswerPatterns, Normalizer};
pub use prompts::{ExemplarCounts, ExemplarSet, ModelKind, Seed};
pub use segment::segment_document;
pub use types::{
    validate_conversation, AlgorithmSpec, Answerability, Anomaly, Conversation, Document,
    RestrictedDocument, RestrictionMode, Sequence, Speaker, State, TurnTrace, Utterance,
    DEFAULT_NO_ANSWER_TEXT,
};

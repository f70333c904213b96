//! Generation and scoring backends.
//!
//! `Generator` produces policy completions; `Scorer` assigns each reasoning
//! step a correctness probability. Both are object-safe so the engine can
//! run against an OpenAI-compatible server or the deterministic mock
//! interchangeably.

mod http;
mod mock;

pub use http::{HttpBackend, HttpBackendConfig, ScorerWire};
pub use mock::{
    MockBackend, MockScorer, MockScript, ScriptOverride, SHAKY_STEP_PHRASE, SOUND_STEP_PHRASE,
};

use serde::{Deserialize, Serialize};

/// Token budget for full generations.
pub const MAX_GENERATION_TOKENS: u32 = 8192;

/// Token budget for forced-answer continuations.
pub const FORCED_ANSWER_TOKEN_LIMIT: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Number of samples requested; responses are index-aligned.
    pub sample_count: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Completions are truncated before the first occurrence of any entry.
    pub stop: Vec<String>,
    pub max_new_tokens: u32,
    /// Abstract restriction of the first generated token; adapters translate
    /// it into their server's bias mechanism.
    pub allowed_first_tokens: Option<Vec<String>>,
    /// Free-form label identifying what the request is for (`reason`,
    /// `rollout`, `decode`, ...).
    pub tag: String,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, sample_count: usize, tag: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            sample_count,
            temperature: 1.0,
            top_p: 0.9,
            stop: Vec::new(),
            max_new_tokens: MAX_GENERATION_TOKENS,
            allowed_first_tokens: None,
            tag: tag.into(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_stop(mut self, stop: Vec<String>) -> Self {
        self.stop = stop;
        self
    }

    pub fn with_max_new_tokens(mut self, max_new_tokens: u32) -> Self {
        self.max_new_tokens = max_new_tokens;
        self
    }

    pub fn with_allowed_first_tokens(mut self, tokens: Vec<String>) -> Self {
        self.allowed_first_tokens = Some(tokens);
        self
    }
}

/// One step-scoring request: the problem prompt plus the concatenation of
/// all steps up to and including the step being scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub prefix: String,
    /// 1-based index of the step the prefix ends at.
    pub boundary_index: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server returned status {status}: {message}")]
    Server { status: u16, message: String },
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

pub trait Generator: Send + Sync {
    /// Returns exactly `req.sample_count` completions, index-aligned with the
    /// request and truncated at the first stop sequence (stop text excluded).
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, BackendError>;
}

pub trait Scorer: Send + Sync {
    /// Returns one probability in `[0, 1]` per request, in batch order.
    fn score_steps(&self, reqs: &[ScoreRequest]) -> Result<Vec<f64>, BackendError>;
}

/// Cuts `text` before the earliest occurrence of any stop sequence.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let mut cut = text.len();
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            cut = cut.min(pos);
        }
    }
    text[..cut].to_string()
}

/// Maps a raw score into `[0, 1]`: values already in range pass through,
/// anything else is treated as a logit and squashed.
pub fn normalize_probability(raw: f64) -> f64 {
    if (0.0..=1.0).contains(&raw) {
        raw
    } else {
        1.0 / (1.0 + (-raw).exp())
    }
}

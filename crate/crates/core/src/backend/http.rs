//! Adapter for OpenAI-compatible text-completion servers.
//!
//! Generation requests map onto the completions endpoint; sample fan-out,
//! in-flight limiting, and retry with exponential backoff and jitter are
//! handled here. Prompts pass through byte-exact.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    normalize_probability, truncate_at_stop, BackendError, GenerationRequest, Generator,
    ScoreRequest, Scorer,
};

/// Wire shape used for step scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScorerWire {
    /// POST `{score_path}` with `{model, prompt, prefix, index}`, expecting
    /// `{"score": <number>}`.
    #[default]
    Scores,
    /// Reuse the completions endpoint: the served reward model emits its
    /// score as text, parsed from the first float in the completion.
    Completion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Base URL, e.g. `http://localhost:8000`.
    pub endpoint: String,
    pub model: String,
    pub auth_token: Option<String>,
    /// Maximum in-flight requests.
    pub concurrency: usize,
    /// Retries after the first attempt.
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// When true, an n-sample request is issued as n parallel single-sample
    /// wire calls reassembled by index; otherwise `n` goes on the wire.
    pub fan_out: bool,
    pub completions_path: String,
    pub score_path: String,
    pub scorer_wire: ScorerWire,
    /// Token text to server token id, used to express first-token
    /// restrictions through `logit_bias`. Tokens without an id are skipped.
    pub token_ids: HashMap<String, i64>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            auth_token: None,
            concurrency: 8,
            retries: 3,
            backoff_ms: 250,
            timeout_secs: 120,
            fan_out: true,
            completions_path: "/v1/completions".into(),
            score_path: "/score".into(),
            scorer_wire: ScorerWire::Scores,
            token_ids: HashMap::new(),
        }
    }
}

impl HttpBackendConfig {
    /// Applies the environment override for the auth token.
    pub fn apply_env(&mut self) {
        if let Ok(token) = std::env::var("STEPSEARCH_API_TOKEN") {
            if !token.is_empty() {
                self.auth_token = Some(token);
            }
        }
    }
}

/// Counting semaphore bounding in-flight wire calls.
struct Limiter {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().unwrap();
        *permits += 1;
        self.limiter.available.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        if !config.endpoint.starts_with("http://") && !config.endpoint.starts_with("https://") {
            return Err(BackendError::Config(format!(
                "endpoint must be an http(s) URL, got `{}`",
                config.endpoint
            )));
        }
        if config.model.is_empty() {
            return Err(BackendError::Config("model name is empty".into()));
        }
        if config.concurrency == 0 {
            return Err(BackendError::Config(
                "concurrency must be at least 1".into(),
            ));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        let limiter = Limiter::new(config.concurrency);
        Ok(Self {
            config,
            agent,
            limiter,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn post_with_retry(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, BackendError> {
        let url = self.url(path);
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                // Exponential backoff with multiplicative jitter in [0.5, 1.5).
                let jitter = 0.5 + unit_jitter(&url, attempt);
                let delay = self.config.backoff_ms as f64 * (1 << (attempt - 1)) as f64 * jitter;
                std::thread::sleep(Duration::from_millis(delay as u64));
            }
            let _permit = self.limiter.acquire();
            let mut request = self
                .agent
                .post(&url)
                .set("content-type", "application/json");
            if let Some(token) = &self.config.auth_token {
                request = request.set("authorization", &format!("Bearer {token}"));
            }
            match request.send_json(body.clone()) {
                Ok(response) => {
                    return response
                        .into_json::<serde_json::Value>()
                        .map_err(|e| BackendError::InvalidResponse(e.to_string()));
                }
                Err(ureq::Error::Status(status, response)) => {
                    let message = response.into_string().unwrap_or_default();
                    if retryable(status) {
                        last_error = format!("status {status}: {message}");
                        continue;
                    }
                    return Err(BackendError::Server { status, message });
                }
                Err(ureq::Error::Transport(transport)) => {
                    last_error = transport.to_string();
                    continue;
                }
            }
        }
        Err(BackendError::Unavailable {
            attempts: self.config.retries + 1,
            message: last_error,
        })
    }

    fn completion_body(&self, req: &GenerationRequest, n: usize) -> serde_json::Value {
        let mut body = json!({
            "model": self.config.model,
            "prompt": req.prompt,
            "n": n,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_new_tokens,
        });
        if !req.stop.is_empty() {
            body["stop"] = json!(req.stop);
        }
        if let Some(allowed) = &req.allowed_first_tokens {
            let bias: HashMap<String, i64> = allowed
                .iter()
                .filter_map(|token| {
                    self.config
                        .token_ids
                        .get(token)
                        .map(|id| (id.to_string(), 100))
                })
                .collect();
            if !bias.is_empty() {
                body["logit_bias"] = json!(bias);
            }
        }
        body
    }

    fn completion_texts(
        &self,
        value: &serde_json::Value,
        expected: usize,
    ) -> Result<Vec<String>, BackendError> {
        let choices = value
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| BackendError::InvalidResponse("missing `choices` array".into()))?;
        if choices.len() != expected {
            return Err(BackendError::InvalidResponse(format!(
                "expected {expected} choices, got {}",
                choices.len()
            )));
        }
        let mut texts: Vec<(usize, String)> = Vec::with_capacity(choices.len());
        for (position, choice) in choices.iter().enumerate() {
            let text = choice
                .get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| BackendError::InvalidResponse("choice without `text`".into()))?;
            let index = choice
                .get("index")
                .and_then(|i| i.as_u64())
                .map(|i| i as usize)
                .unwrap_or(position);
            texts.push((index, text.to_string()));
        }
        texts.sort_by_key(|(index, _)| *index);
        Ok(texts.into_iter().map(|(_, text)| text).collect())
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

fn unit_jitter(url: &str, attempt: u32) -> f64 {
    let mut hash = 0xcbf29ce484222325u64;
    for byte in url.bytes().chain(attempt.to_le_bytes()) {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    (hash >> 11) as f64 / (1u64 << 53) as f64
}

impl Generator for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        let texts = if self.config.fan_out && req.sample_count > 1 {
            // One wire call per sample, reassembled by request index.
            let mut slots: Vec<Option<Result<Vec<String>, BackendError>>> =
                (0..req.sample_count).map(|_| None).collect();
            std::thread::scope(|scope| {
                let mut handles = Vec::with_capacity(req.sample_count);
                for _ in 0..req.sample_count {
                    let body = self.completion_body(req, 1);
                    handles.push(scope.spawn(move || {
                        self.post_with_retry(&self.config.completions_path, &body)
                            .and_then(|value| self.completion_texts(&value, 1))
                    }));
                }
                for (index, handle) in handles.into_iter().enumerate() {
                    slots[index] = Some(handle.join().expect("wire thread panicked"));
                }
            });
            let mut texts = Vec::with_capacity(req.sample_count);
            for slot in slots {
                texts.push(slot.expect("slot filled")?.remove(0));
            }
            texts
        } else {
            let body = self.completion_body(req, req.sample_count);
            let value = self.post_with_retry(&self.config.completions_path, &body)?;
            self.completion_texts(&value, req.sample_count)?
        };
        Ok(texts
            .into_iter()
            .map(|text| truncate_at_stop(&text, &req.stop))
            .collect())
    }
}

impl Scorer for HttpBackend {
    fn score_steps(&self, reqs: &[ScoreRequest]) -> Result<Vec<f64>, BackendError> {
        let mut slots: Vec<Option<Result<f64, BackendError>>> =
            (0..reqs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(reqs.len());
            for req in reqs {
                handles.push(scope.spawn(move || self.score_one(req)));
            }
            for (index, handle) in handles.into_iter().enumerate() {
                slots[index] = Some(handle.join().expect("wire thread panicked"));
            }
        });
        let mut scores = Vec::with_capacity(reqs.len());
        for slot in slots {
            scores.push(slot.expect("slot filled")?);
        }
        Ok(scores)
    }
}

impl HttpBackend {
    fn score_one(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        match self.config.scorer_wire {
            ScorerWire::Scores => {
                let body = json!({
                    "model": self.config.model,
                    "prompt": req.prompt,
                    "prefix": req.prefix,
                    "index": req.boundary_index,
                });
                let value = self.post_with_retry(&self.config.score_path, &body)?;
                let raw = value
                    .get("score")
                    .and_then(|s| s.as_f64())
                    .ok_or_else(|| BackendError::InvalidResponse("missing `score`".into()))?;
                Ok(normalize_probability(raw))
            }
            ScorerWire::Completion => {
                let prompt = format!("{}\n\n{}", req.prompt, req.prefix);
                let body = json!({
                    "model": self.config.model,
                    "prompt": prompt,
                    "n": 1,
                    "temperature": 0.0,
                    "max_tokens": 8,
                });
                let value = self.post_with_retry(&self.config.completions_path, &body)?;
                let text = self.completion_texts(&value, 1)?.remove(0);
                let raw = parse_leading_float(&text).ok_or_else(|| {
                    BackendError::InvalidResponse(format!("no score in completion `{text}`"))
                })?;
                Ok(normalize_probability(raw))
            }
        }
    }
}

fn parse_leading_float(text: &str) -> Option<f64> {
    let trimmed = text.trim_start();
    let end = trimmed
        .char_indices()
        .take_while(|(_, c)| c.is_ascii_digit() || *c == '.' || *c == '-' || *c == '+')
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    trimmed[..end].parse().ok()
}

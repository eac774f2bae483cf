//! Text-generation and embedding providers.
//!
//! [`Gateway`] owns the prompt templates, renders requests, enforces the retry
//! budget and keeps a call log. The actual model sits behind [`Backend`]:
//! [`MockBackend`] for offline runs, [`HttpBackend`] for a remote service and
//! [`ScriptedBackend`] for tests that need canned or failing responses.
//!
//! Mock output formats, keyed by template name:
//!
//! | template          | output                                   |
//! |-------------------|------------------------------------------|
//! | `summary`         | `SUMMARY[b1|b2|...]` over `{history}`     |
//! | `paraphrase`      | `PARA[<dissent>]`                         |
//! | `counterargument` | `COUNTER[<summary>]?`                     |
//! | anything else     | `MOCK[<rendered prompt>]`                 |
//!
//! Mock embeddings use 64 buckets: the text is lowercased and split on
//! whitespace, each token adds 1 to bucket `fnv1a64(token) % 64`, and the
//! result is L2-normalized.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::EmbeddingVector;
use crate::template::{Binding, Bindings, TemplateError, TemplateSet};

pub const MOCK_DIMENSION: usize = 64;

/// Environment variable overriding the remote provider endpoint.
pub const ENDPOINT_ENV: &str = "ADVOCATE_PROVIDER_ENDPOINT";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, b| (hash ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Unnormalized token counts of the mock embedding.
pub fn mock_bucket_counts(text: &str, dimension: usize) -> Vec<f64> {
    let mut counts = vec![0.0; dimension];
    for token in text.to_lowercase().split_whitespace() {
        counts[(fnv1a64(token.as_bytes()) % dimension as u64) as usize] += 1.0;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Complete,
    Embed,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("provider failed {operation:?} after {attempts} attempt(s): {last}")]
    ProviderFailure { operation: Operation, attempts: u32, last: BackendError },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("provider configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_template_unbound(&self) -> bool {
        matches!(self, GatewayError::Template(TemplateError::UnboundPlaceholder(_)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub template_name: String,
    pub bindings: Bindings,
    pub max_length: Option<usize>,
}

impl CompletionRequest {
    pub fn new(template_name: &str) -> Self {
        Self { template_name: template_name.to_string(), bindings: Bindings::new(), max_length: None }
    }

    pub fn text(mut self, name: &str, value: impl Into<String>) -> Self {
        self.bindings.insert(name.to_string(), Binding::Text(value.into()));
        self
    }

    pub fn list(mut self, name: &str, values: Vec<String>) -> Self {
        self.bindings.insert(name.to_string(), Binding::List(values));
        self
    }

    pub fn max_length(mut self, max: usize) -> Self {
        self.max_length = Some(max);
        self
    }
}

/// What a backend receives: the raw bindings plus the rendered prompt.
#[derive(Debug, Clone, Copy)]
pub struct RenderedRequest<'a> {
    pub template_name: &'a str,
    pub bindings: &'a Bindings,
    pub prompt: &'a str,
    pub max_length: Option<usize>,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &RenderedRequest<'_>) -> Result<String, BackendError>;
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    dimension: usize,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self { dimension: MOCK_DIMENSION }
    }
}

fn binding_text(bindings: &Bindings, name: &str) -> String {
    match bindings.get(name) {
        Some(Binding::Text(t)) => t.clone(),
        Some(Binding::List(items)) => items.join("|"),
        None => String::new(),
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &RenderedRequest<'_>) -> Result<String, BackendError> {
        let b = request.bindings;
        Ok(match request.template_name {
            crate::template::SUMMARY => format!("SUMMARY[{}]", binding_text(b, "history")),
            crate::template::PARAPHRASE => format!("PARA[{}]", binding_text(b, "dissent")),
            crate::template::COUNTERARGUMENT => format!("COUNTER[{}]?", binding_text(b, "summary")),
            _ => format!("MOCK[{}]", request.prompt),
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let counts = mock_bucket_counts(text, self.dimension);
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BackendError::InvalidResponse("text has no tokens".into()));
        }
        Ok(counts.into_iter().map(|c| c / norm).collect())
    }
}

/// Replays queued completion results, then repeats a fallback. Embeddings
/// come from the mock scheme. Counts calls so tests can assert retries.
#[derive(Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<Result<String, BackendError>>>,
    fallback: Option<Result<String, BackendError>>,
    per_template: Vec<(String, String)>,
    embed_failure: Option<BackendError>,
    complete_calls: Mutex<u32>,
    mock: MockBackend,
}

impl ScriptedBackend {
    pub fn new(responses: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        Self { queue: Mutex::new(responses.into_iter().collect()), ..Self::default() }
    }

    /// Every completion returns `text`.
    pub fn fixed(text: &str) -> Self {
        Self { fallback: Some(Ok(text.to_string())), ..Self::default() }
    }

    /// Every completion fails with `error`.
    pub fn failing(error: BackendError) -> Self {
        Self { fallback: Some(Err(error)), ..Self::default() }
    }

    /// Completions for `template` always return `text`; other templates use
    /// the queue, then the fallback, then the mock.
    pub fn with_template(mut self, template: &str, text: &str) -> Self {
        self.per_template.push((template.to_string(), text.to_string()));
        self
    }

    pub fn with_fallback(mut self, fallback: Result<String, BackendError>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn with_embed_failure(mut self, error: BackendError) -> Self {
        self.embed_failure = Some(error);
        self
    }

    pub fn complete_calls(&self) -> u32 {
        *self.complete_calls.lock().unwrap()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &RenderedRequest<'_>) -> Result<String, BackendError> {
        *self.complete_calls.lock().unwrap() += 1;
        if let Some((_, text)) = self.per_template.iter().find(|(t, _)| t == request.template_name) {
            return Ok(text.clone());
        }
        if let Some(next) = self.queue.lock().unwrap().pop_front() {
            return next;
        }
        match &self.fallback {
            Some(result) => result.clone(),
            None => self.mock.complete(request),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        match &self.embed_failure {
            Some(e) => Err(e.clone()),
            None => self.mock.embed(text),
        }
    }
}

#[derive(Serialize)]
struct CompleteBody<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_length: Option<usize>,
    #[serde(skip_serializing_if = "str::is_empty")]
    model: &'a str,
}

#[derive(Deserialize)]
struct CompleteReply {
    text: String,
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    text: &'a str,
    #[serde(skip_serializing_if = "str::is_empty")]
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedReply {
    vector: Vec<f64>,
}

/// JSON-over-HTTP provider: `POST {endpoint}/complete` and `POST {endpoint}/embed`.
pub struct HttpBackend {
    endpoint: String,
    model_id: String,
    embedding_model_id: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: &str, model_id: &str, embedding_model_id: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(true).build().into();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model_id: model_id.to_string(),
            embedding_model_id: embedding_model_id.to_string(),
            agent,
        }
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}/{}", self.endpoint, path);
        let mut response = self.agent.post(&url).send_json(body).map_err(map_ureq)?;
        response.body_mut().read_json::<R>().map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

fn map_ureq(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::StatusCode(code) if code >= 500 || code == 429 => {
            BackendError::Transport(format!("http status {code}"))
        }
        ureq::Error::StatusCode(code) => BackendError::InvalidResponse(format!("http status {code}")),
        other => BackendError::Transport(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &RenderedRequest<'_>) -> Result<String, BackendError> {
        let body = CompleteBody { prompt: request.prompt, max_length: request.max_length, model: &self.model_id };
        let reply: CompleteReply = self.post("complete", &body)?;
        Ok(reply.text)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let reply: EmbedReply = self.post("embed", &EmbedBody { text, model: &self.embedding_model_id })?;
        Ok(reply.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    #[serde(alias = "http")]
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_id: String,
    pub embedding_model_id: String,
    pub timeout_secs: f64,
    pub retry_budget: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            model_id: String::new(),
            embedding_model_id: "paraphrase-multilingual-MiniLM-L12-v2".to_string(),
            timeout_secs: 30.0,
            retry_budget: 1,
        }
    }
}

impl ProviderConfig {
    /// Applies the endpoint override from the environment, if set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
            if !endpoint.trim().is_empty() {
                self.endpoint = Some(endpoint);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        if self.kind == ProviderKind::RemoteHttp && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(GatewayError::Config("remote provider requires an endpoint".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// One backend invocation, as recorded in the call log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub operation: Operation,
    pub template_name: Option<String>,
    pub attempt: u32,
    pub error: Option<String>,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    templates: TemplateSet,
    retry_budget: u32,
    calls: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, templates: TemplateSet, retry_budget: u32) -> Self {
        Self { backend, templates, retry_budget, calls: Mutex::new(Vec::new()) }
    }

    pub fn mock() -> Self {
        Self::new(Arc::new(MockBackend::default()), TemplateSet::builtin(), 1)
    }

    pub fn from_config(config: &ProviderConfig, templates: TemplateSet) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn Backend> = match config.kind {
            ProviderKind::Mock => Arc::new(MockBackend::default()),
            ProviderKind::RemoteHttp => Arc::new(HttpBackend::new(
                config.endpoint.as_deref().unwrap_or_default(),
                &config.model_id,
                &config.embedding_model_id,
                config.timeout(),
            )),
        };
        Ok(Self::new(backend, templates, config.retry_budget))
    }

    pub fn retry_budget(&self) -> u32 {
        self.retry_budget
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    fn with_retries<T>(
        &self,
        operation: Operation,
        template_name: Option<&str>,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = call();
            self.calls.lock().unwrap().push(CallRecord {
                operation,
                template_name: template_name.map(str::to_string),
                attempt,
                error: result.as_ref().err().map(ToString::to_string),
            });
            match result {
                Ok(value) => return Ok(value),
                Err(e) if e.is_transient() && attempt <= self.retry_budget => {
                    tracing::debug!(?operation, attempt, error = %e, "retrying provider call");
                }
                Err(last) => return Err(GatewayError::ProviderFailure { operation, attempts: attempt, last }),
            }
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let template = self.templates.get(&request.template_name)?;
        let prompt = template.render(&request.bindings)?;
        let rendered = RenderedRequest {
            template_name: &request.template_name,
            bindings: &request.bindings,
            prompt: &prompt,
            max_length: request.max_length,
        };
        self.with_retries(Operation::Complete, Some(&request.template_name), || {
            let text = self.backend.complete(&rendered)?;
            if text.trim().is_empty() {
                return Err(BackendError::InvalidResponse("empty completion".into()));
            }
            Ok(text.trim().to_string())
        })
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        self.with_retries(Operation::Embed, None, || {
            let components = self.backend.embed(text)?;
            EmbeddingVector::new(components).map_err(|e| BackendError::InvalidResponse(e.to_string()))
        })
    }
}

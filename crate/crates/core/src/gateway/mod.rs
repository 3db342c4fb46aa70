//! Provider-agnostic chat completion and embedding access.
//!
//! A [`Gateway`] pairs a [`ChatBackend`] with an [`EmbedBackend`] and puts an
//! optional response cache in front of both. Backends are swappable: the
//! OpenAI-compatible HTTP client for live runs, the scripted backend and the
//! hash-projection embedder for tests.

mod cache;
mod http;
pub mod mock;
mod scripted;

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::ResponseCache;
pub use http::{OpenAiBackend, RetryPolicy};
pub use mock::{HashEmbedder, LabelOracleBackend};
pub use scripted::{load_scenario, write_scenario, MatchRule, ScenarioEntry, ScriptedBackend};

pub const DEFAULT_MODEL: &str = "gpt-4o-mini-2024-07-18";
pub const DEFAULT_EMBEDDING_MODEL: &str = "all-MiniLM-L6-v2";
pub const DEFAULT_EMBEDDING_DIM: usize = 384;
pub const DEFAULT_CREDENTIAL_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: usize, message: String },
    #[error("provider rejected request with status {status}: {body}")]
    Permanent { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Check the conversation shape every request must have: one leading system
/// message, then strictly alternating user/assistant turns ending with user.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    let invalid = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
    let Some((first, rest)) = messages.split_first() else {
        return invalid("no messages");
    };
    if first.role != Role::System {
        return invalid("first message must be the system message");
    }
    if rest.is_empty() {
        return invalid("request must end with a user message");
    }
    for (i, m) in messages.iter().enumerate() {
        if m.content.is_empty() {
            return invalid(&format!("message {i} has empty content"));
        }
    }
    for (i, m) in rest.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if m.role != expected {
            return invalid(&format!("message {} should be {expected:?}", i + 1));
        }
    }
    if rest.len() % 2 == 0 {
        return invalid("request must end with a user message");
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(
        model: impl Into<String>,
        messages: Vec<ChatMessage>,
        temperature: f64,
        max_output_tokens: u32,
    ) -> Result<Self, GatewayError> {
        validate_messages(&messages)?;
        if temperature.is_nan() || temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(Self {
            model: model.into(),
            messages,
            temperature,
            max_output_tokens,
        })
    }

    /// Stable hex digest of (model, temperature, messages).
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a str,
            temperature: f64,
            messages: &'a [ChatMessage],
        }
        let key = Key {
            model: &self.model,
            temperature: self.temperature,
            messages: &self.messages,
        };
        sha256_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
    }

    pub fn last_user(&self) -> &str {
        self.messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default()
    }

    pub fn system(&self) -> &str {
        self.messages
            .first()
            .map(|m| m.content.as_str())
            .unwrap_or_default()
    }
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub from_cache: bool,
    pub latency_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Scale to unit L2 norm. A zero vector is returned unchanged.
    pub fn normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= norm);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

pub trait EmbedBackend: Send + Sync {
    fn model(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Generation settings shared by every request the gateway builds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub classify_max_tokens: u32,
    pub rewrite_max_tokens: u32,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            classify_max_tokens: 512,
            rewrite_max_tokens: 2048,
        }
    }
}

/// Per-call knobs for [`Gateway::complete_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallOptions {
    /// Mixed into the cache key so repeated runs are not served each other's
    /// answers.
    pub nonce: Option<u64>,
    /// Skip cache reads and writes entirely.
    pub bypass_cache: bool,
}

#[derive(Clone)]
pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbedBackend>,
    cache: Option<Arc<ResponseCache>>,
    settings: ChatSettings,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("settings", &self.settings)
            .field("embedding_model", &self.embedder.model())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Gateway {
    pub fn new(chat: Arc<dyn ChatBackend>, embedder: Arc<dyn EmbedBackend>) -> Self {
        Self {
            chat,
            embedder,
            cache: None,
            settings: ChatSettings::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(Arc::new(cache));
        self
    }

    pub fn with_settings(mut self, settings: ChatSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn settings(&self) -> &ChatSettings {
        &self.settings
    }

    pub fn embedding_model(&self) -> &str {
        self.embedder.model()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedder.dim()
    }

    /// Build a request with the gateway's model and temperature.
    pub fn request(
        &self,
        messages: Vec<ChatMessage>,
        max_output_tokens: u32,
    ) -> Result<ChatRequest, GatewayError> {
        ChatRequest::new(
            self.settings.model.clone(),
            messages,
            self.settings.temperature,
            max_output_tokens,
        )
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<CompletionResult, GatewayError> {
        self.complete_with(request, CallOptions::default())
    }

    pub fn complete_with(
        &self,
        request: &ChatRequest,
        options: CallOptions,
    ) -> Result<CompletionResult, GatewayError> {
        validate_messages(&request.messages)?;
        let start = Instant::now();
        let cache = self.cache.as_ref().filter(|_| !options.bypass_cache);
        let key = cache.map(|_| completion_key(request, options.nonce));
        if let (Some(cache), Some(key)) = (cache, key.as_deref()) {
            if let Some(text) = cache.get_completion(key)? {
                return Ok(CompletionResult {
                    text,
                    from_cache: true,
                    latency_ms: start.elapsed().as_millis() as u64,
                });
            }
        }
        let text = self.chat.complete(request)?;
        if let (Some(cache), Some(key)) = (cache, key.as_deref()) {
            cache.put_completion(key, &text)?;
        }
        Ok(CompletionResult {
            text,
            from_cache: false,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Embed texts, returning one unit-norm vector per text in input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
        }
        let model = self.embedder.model().to_string();
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            match &self.cache {
                Some(cache) => match cache.get_embedding(&embedding_key(&model, text))? {
                    Some(v) => out[i] = Some(v),
                    None => missing.push(i),
                },
                None => missing.push(i),
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.embedder.embed(&batch)?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::Malformed(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                let v = EmbeddingVector::new(v).normalized().values;
                if let Some(cache) = &self.cache {
                    cache.put_embedding(&embedding_key(&model, &texts[i]), &v)?;
                }
                out[i] = Some(v);
            }
        }
        let vectors: Vec<EmbeddingVector> = out
            .into_iter()
            .map(|v| EmbeddingVector::new(v.expect("every slot filled")))
            .collect();
        let dim = vectors[0].dim();
        if vectors.iter().any(|v| v.dim() != dim || dim == 0) {
            return Err(GatewayError::Malformed("embedding dimensions disagree".into()));
        }
        Ok(vectors)
    }
}

fn completion_key(request: &ChatRequest, nonce: Option<u64>) -> String {
    let fp = request.fingerprint();
    match nonce {
        None => fp,
        Some(n) => sha256_hex(format!("{fp}:{n}").as_bytes()),
    }
}

fn embedding_key(model: &str, text: &str) -> String {
    let text_hash = sha256_hex(text.as_bytes());
    sha256_hex(format!("{model}\0{text_hash}").as_bytes())
}

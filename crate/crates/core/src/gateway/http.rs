//! OpenAI-compatible HTTP backend: `POST {base}/chat/completions` and
//! `POST {base}/embeddings` with a bearer credential.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, EmbedBackend, GatewayError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt; total attempts are `max_retries + 1`.
    pub max_retries: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, retry: usize) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_delay_ms);
        let jitter = if self.base_delay_ms > 0 {
            rand::rng().random_range(0..=self.base_delay_ms)
        } else {
            0
        };
        Duration::from_millis(exp + jitter)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fail(GatewayError),
}

#[derive(Debug)]
pub struct OpenAiBackend {
    agent: ureq::Agent,
    base_url: String,
    credential: String,
    retry: RetryPolicy,
    limiter: Limiter,
    embedding_model: String,
    embedding_dim: usize,
}

impl OpenAiBackend {
    /// Read the bearer credential from `credential_env_var`.
    pub fn from_env(base_url: &str, credential_env_var: &str) -> Result<Self, GatewayError> {
        let credential = std::env::var(credential_env_var).map_err(|_| {
            GatewayError::Config(format!("environment variable {credential_env_var} is not set"))
        })?;
        Ok(Self::new(base_url, credential))
    }

    pub fn new(base_url: &str, credential: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            credential: credential.into(),
            retry: RetryPolicy::default(),
            limiter: Limiter::new(8),
            embedding_model: super::DEFAULT_EMBEDDING_MODEL.to_string(),
            embedding_dim: super::DEFAULT_EMBEDDING_DIM,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, limit: usize) -> Self {
        self.limiter = Limiter::new(limit);
        self
    }

    pub fn with_embedding_model(mut self, model: impl Into<String>, dim: usize) -> Self {
        self.embedding_model = model.into();
        self.embedding_dim = dim;
        self
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{path}", self.base_url);
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.attempt(&url, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(GatewayError::Network {
            attempts: self.retry.max_retries + 1,
            message: last,
        })
    }

    fn attempt(&self, url: &str, body: &Value) -> Attempt {
        let _permit = self.limiter.acquire();
        let sent = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {}", self.credential))
            .send_json(body);
        let mut response = match sent {
            Ok(r) => r,
            Err(ureq::Error::BadUri(u)) => {
                return Attempt::Fail(GatewayError::Config(format!("bad URL {u}")))
            }
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(GatewayError::Malformed(e.to_string())),
            },
            429 | 500..=599 => Attempt::Retry(format!("status {status}: {text}")),
            _ => Attempt::Fail(GatewayError::Permanent { status, body: text }),
        }
    }
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let value = self.post("chat/completions", &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Malformed("missing choices[0].message.content".into()))
    }
}

impl EmbedBackend for OpenAiBackend {
    fn model(&self) -> &str {
        &self.embedding_model
    }

    fn dim(&self) -> usize {
        self.embedding_dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = json!({ "model": self.embedding_model, "input": texts });
        let value = self.post("embeddings", &body)?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| GatewayError::Malformed("missing data array".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let index = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
                let vector = item["embedding"]
                    .as_array()
                    .ok_or_else(|| GatewayError::Malformed("missing embedding".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| GatewayError::Malformed("non-numeric embedding".into()))
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                Ok((index, vector))
            })
            .collect::<Result<_, GatewayError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

//! Offline backends: a hash-projection embedder and a label oracle that
//! answers classification prompts from gold labels with optional noise.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, EmbedBackend, GatewayError};

/// Bag-of-tokens embedder: each lowercase alphanumeric token adds 1 at
/// `fnv1a(token) % dim`, and the result is L2-normalized.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    model: String,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(super::DEFAULT_EMBEDDING_DIM)
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self {
            dim,
            model: format!("mock-hash-{dim}"),
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut any = false;
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
            any = true;
        }
        if !any {
            v[(fnv1a(b"") % self.dim as u64) as usize] = 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbedBackend for HashEmbedder {
    fn model(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Answers "True"/"False" for known passage texts (the final user message),
/// flipping each answer with probability `flip_prob`.
///
/// The flip for a request depends only on (seed, request fingerprint, how
/// many times that fingerprint was seen), so results are reproducible no
/// matter how concurrent callers interleave.
#[derive(Debug)]
pub struct LabelOracleBackend {
    labels: HashMap<String, bool>,
    flip_prob: f64,
    seed: u64,
    latency: Option<Duration>,
    seen: Mutex<HashMap<String, u64>>,
    calls: AtomicUsize,
}

impl LabelOracleBackend {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = (S, bool)>,
        S: Into<String>,
    {
        Self {
            labels: labels.into_iter().map(|(t, l)| (t.into(), l)).collect(),
            flip_prob: 0.0,
            seed: 0,
            latency: None,
            seen: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_noise(mut self, flip_prob: f64, seed: u64) -> Self {
        self.flip_prob = flip_prob;
        self.seed = seed;
        self
    }

    /// Sleep this long per call, to imitate network round trips.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Whether the oracle flips the `occurrence`-th (0-based) answer to the
    /// request with this fingerprint.
    pub fn flips(&self, fingerprint: &str, occurrence: u64) -> bool {
        if self.flip_prob <= 0.0 {
            return false;
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(fingerprint.as_bytes());
        h.update(occurrence.to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed).random::<f64>() < self.flip_prob
    }
}

impl ChatBackend for LabelOracleBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        let gold = *self.labels.get(request.last_user()).ok_or_else(|| {
            GatewayError::Scenario("label oracle has no label for this passage".into())
        })?;
        let fp = request.fingerprint();
        let occurrence = {
            let mut seen = self.seen.lock().unwrap();
            let n = seen.entry(fp.clone()).or_insert(0);
            let cur = *n;
            *n += 1;
            cur
        };
        let answer = gold ^ self.flips(&fp, occurrence);
        Ok(if answer { "True" } else { "False" }.to_string())
    }
}

//! Deterministic scripted chat backend.
//!
//! A scenario is a JSONL file of `{"match": {...}, "response": "..."}`
//! entries. A match is one of
//!
//! * `{"fingerprint": "<hex>"}`: exactly this request (see
//!   [`ChatRequest::fingerprint`]),
//! * any of `system_contains`, `last_user`, `last_user_contains`: a pattern
//!   over the system prompt and the final user message, tried in file order,
//! * `{"turn": n}`: the n-th (0-based) request that no keyed entry matched.
//!
//! Keyed entries win over ordered turns. Ordered scripts consume state, so a
//! backend using them must be driven from a single thread.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, GatewayError};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_user_contains: Option<String>,
}

impl MatchRule {
    pub fn fingerprint(fp: impl Into<String>) -> Self {
        Self {
            fingerprint: Some(fp.into()),
            ..Self::default()
        }
    }

    pub fn turn(n: usize) -> Self {
        Self {
            turn: Some(n),
            ..Self::default()
        }
    }

    pub fn last_user(text: impl Into<String>) -> Self {
        Self {
            last_user: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn last_user_contains(text: impl Into<String>) -> Self {
        Self {
            last_user_contains: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn and_system_contains(mut self, text: impl Into<String>) -> Self {
        self.system_contains = Some(text.into());
        self
    }

    fn is_pattern(&self) -> bool {
        self.system_contains.is_some() || self.last_user.is_some() || self.last_user_contains.is_some()
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        let last = request.last_user();
        self.system_contains
            .as_deref()
            .is_none_or(|s| request.system().contains(s))
            && self.last_user.as_deref().is_none_or(|s| last == s)
            && self.last_user_contains.as_deref().is_none_or(|s| last.contains(s))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    #[serde(rename = "match")]
    pub rule: MatchRule,
    pub response: String,
}

impl ScenarioEntry {
    pub fn new(rule: MatchRule, response: impl Into<String>) -> Self {
        Self {
            rule,
            response: response.into(),
        }
    }
}

#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_fingerprint: HashMap<String, String>,
    patterns: Vec<(MatchRule, String)>,
    turns: BTreeMap<usize, String>,
    next_turn: Mutex<usize>,
    calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: Vec<ScenarioEntry>) -> Result<Self, GatewayError> {
        let mut backend = Self::default();
        for (i, entry) in entries.into_iter().enumerate() {
            let rule = entry.rule;
            let kinds = usize::from(rule.fingerprint.is_some())
                + usize::from(rule.turn.is_some())
                + usize::from(rule.is_pattern());
            if kinds != 1 {
                return Err(GatewayError::Scenario(format!(
                    "entry {}: match needs exactly one of fingerprint, turn or a pattern",
                    i + 1
                )));
            }
            if let Some(fp) = rule.fingerprint.clone() {
                backend.by_fingerprint.insert(fp, entry.response);
            } else if let Some(turn) = rule.turn {
                if backend.turns.insert(turn, entry.response).is_some() {
                    return Err(GatewayError::Scenario(format!(
                        "entry {}: turn {turn} scripted twice",
                        i + 1
                    )));
                }
            } else {
                backend.patterns.push((rule, entry.response));
            }
        }
        Ok(backend)
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        if let Some(r) = self.by_fingerprint.get(&request.fingerprint()) {
            return Ok(r.clone());
        }
        if let Some((_, r)) = self.patterns.iter().find(|(rule, _)| rule.matches(request)) {
            return Ok(r.clone());
        }
        let mut next = self.next_turn.lock().unwrap();
        let turn = *next;
        match self.turns.get(&turn) {
            Some(r) => {
                *next += 1;
                Ok(r.clone())
            }
            None if self.turns.keys().next_back().is_none_or(|&last| turn > last) => {
                Err(GatewayError::Scenario(format!(
                    "scenario exhausted: no reply for turn {turn} ({} ordered replies); last user message: {:?}",
                    self.turns.len(),
                    truncate(request.last_user(), 80)
                )))
            }
            None => Err(GatewayError::Scenario(format!("no ordered reply for turn {turn}"))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub fn load_scenario(path: &Path) -> Result<ScriptedBackend, GatewayError> {
    let data = fs::read_to_string(path)
        .map_err(|e| GatewayError::Scenario(format!("{}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ScenarioEntry = serde_json::from_str(line)
            .map_err(|e| GatewayError::Scenario(format!("line {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    ScriptedBackend::from_entries(entries)
}

pub fn write_scenario(path: &Path, entries: &[ScenarioEntry]) -> std::io::Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

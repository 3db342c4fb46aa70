//! Greedy instruction tuning.
//!
//! Walk the shuffled training set with the incumbent instruction. Every
//! misclassified passage starts a two-turn dialogue: the model first analyzes
//! its error, then rewrites the instruction. The rewrite replaces the
//! incumbent only if its training-set F1 beats the incumbent's by at least
//! `epsilon`. Only one incumbent exists at any time.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::evaluation::{classify_one, evaluate, EvalError, EvalSettings};
use crate::exec::Execution;
use crate::gateway::{ChatMessage, Gateway, GatewayError};
use crate::prompting::{
    assemble_classification_prompt, assemble_modification_prompt, assemble_reflection_prompt,
    render_label, Instruction, InstructionOrigin, PromptError,
};
use crate::selection::{select, SelectionContext, SelectionPolicy};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_INSTRUCTION_CHAR_CAP: usize = 4000;

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error("invalid tuner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl From<crate::selection::SelectionError> for TuneError {
    fn from(e: crate::selection::SelectionError) -> Self {
        TuneError::Eval(e.into())
    }
}

/// A failed run, with the events logged before the failure.
#[derive(Debug, thiserror::Error)]
#[error("tuning aborted after {} events: {error}", events.len())]
pub struct TuneAbort {
    pub events: Vec<TuneEvent>,
    #[source]
    pub error: TuneError,
}

/// Demonstrations shown alongside the instruction while tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningDemos {
    #[default]
    ZeroShot,
    Static,
}

impl TuningDemos {
    pub fn policy(self) -> SelectionPolicy {
        match self {
            TuningDemos::ZeroShot => SelectionPolicy::ZeroShot,
            TuningDemos::Static => SelectionPolicy::static_builtin(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TuningDemos::ZeroShot => "Zero-shot",
            TuningDemos::Static => "Static",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub epsilon: f64,
    pub seed: u64,
    pub max_epochs: usize,
    /// `None` means unlimited.
    pub max_candidate_evals: Option<usize>,
    pub demos_during_tuning: TuningDemos,
    pub scoring_repeats: usize,
    pub instruction_char_cap: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            max_epochs: 1,
            max_candidate_evals: None,
            demos_during_tuning: TuningDemos::ZeroShot,
            scoring_repeats: 1,
            instruction_char_cap: DEFAULT_INSTRUCTION_CHAR_CAP,
        }
    }
}

impl TunerConfig {
    fn validate(&self) -> Result<(), TuneError> {
        let bad = |m: &str| Err(TuneError::Config(m.into()));
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return bad("epsilon must be >= 0");
        }
        if self.max_epochs == 0 || self.scoring_repeats == 0 || self.instruction_char_cap == 0 {
            return bad("max_epochs, scoring_repeats and instruction_char_cap must be positive");
        }
        if self.max_candidate_evals == Some(0) {
            return bad("max_candidate_evals must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneEvent {
    pub passage_id: String,
    pub wrong_prediction: String,
    pub rationale: String,
    pub candidate_instruction: Instruction,
    /// False when the rewrite was empty or over the length cap; such
    /// candidates are never scored.
    pub candidate_valid: bool,
    pub incumbent_f1: f64,
    pub candidate_f1: Option<f64>,
    pub accepted: bool,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub initial_instruction: Instruction,
    pub initial_f1: f64,
    pub final_instruction: Instruction,
    pub final_train_f1: f64,
    pub events: Vec<TuneEvent>,
    pub epochs_completed: usize,
    pub candidates_evaluated: usize,
    pub misclassifications: usize,
}

impl TuneResult {
    pub fn accepted(&self) -> impl Iterator<Item = &TuneEvent> {
        self.events.iter().filter(|e| e.accepted)
    }
}

/// Scores a candidate instruction; higher is better.
pub trait InstructionScorer: Sync {
    fn score(&self, instruction: &Instruction) -> Result<f64, EvalError>;
}

/// Mean training-set F1 over `repeats` evaluation runs.
pub fn score_instruction(
    gateway: &Gateway,
    instruction: &Instruction,
    demos: &SelectionPolicy,
    train: &Corpus,
    repeats: usize,
    exec: Execution,
) -> Result<f64, EvalError> {
    let ctx = SelectionContext {
        gateway,
        index: None,
        train: Some(train),
        exec,
    };
    let report = evaluate(
        gateway,
        instruction,
        demos,
        train,
        &ctx,
        EvalSettings { repeats, exec },
    )?;
    Ok(report.mean.f1)
}

struct TrainSetScorer<'a> {
    gateway: &'a Gateway,
    train: &'a Corpus,
    demos: SelectionPolicy,
    repeats: usize,
    exec: Execution,
}

impl InstructionScorer for TrainSetScorer<'_> {
    fn score(&self, instruction: &Instruction) -> Result<f64, EvalError> {
        score_instruction(
            self.gateway,
            instruction,
            &self.demos,
            self.train,
            self.repeats,
            self.exec,
        )
    }
}

pub trait Clock: Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always reports the same instant; for reproducible logs.
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

pub struct Tuner<'a> {
    gateway: &'a Gateway,
    config: TunerConfig,
    exec: Execution,
    scorer: Option<&'a dyn InstructionScorer>,
    clock: &'a dyn Clock,
}

impl<'a> Tuner<'a> {
    pub fn new(gateway: &'a Gateway, config: TunerConfig) -> Self {
        Self {
            gateway,
            config,
            exec: Execution::default(),
            scorer: None,
            clock: &SystemClock,
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// Replace training-set F1 with a custom score.
    pub fn with_scorer(mut self, scorer: &'a dyn InstructionScorer) -> Self {
        self.scorer = Some(scorer);
        self
    }

    pub fn with_clock(mut self, clock: &'a dyn Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn tune(&self, initial: &Instruction, train: &Corpus) -> Result<TuneResult, TuneAbort> {
        let mut events = Vec::new();
        match self.run(initial, train, &mut events) {
            Ok(result) => Ok(result),
            Err(error) => Err(TuneAbort { events, error }),
        }
    }

    fn run(
        &self,
        initial: &Instruction,
        train: &Corpus,
        events: &mut Vec<TuneEvent>,
    ) -> Result<TuneResult, TuneError> {
        self.config.validate()?;
        if initial.text.trim().is_empty() {
            return Err(PromptError::EmptyInstruction.into());
        }
        let cfg = &self.config;
        let demos = cfg.demos_during_tuning.policy();
        let default_scorer = TrainSetScorer {
            gateway: self.gateway,
            train,
            demos: demos.clone(),
            repeats: cfg.scoring_repeats,
            exec: self.exec,
        };
        let scorer: &dyn InstructionScorer = self.scorer.unwrap_or(&default_scorer);
        let ctx = SelectionContext {
            gateway: self.gateway,
            index: None,
            train: Some(train),
            exec: self.exec,
        };

        let initial_f1 = scorer.score(initial)?;
        let mut incumbent = initial.clone();
        let mut incumbent_f1 = initial_f1;
        let mut candidates_evaluated = 0;
        let mut misclassifications = 0;
        let mut epochs_completed = 0;

        'epochs: for epoch in 0..cfg.max_epochs {
            for &i in &shuffled_order(train.len(), cfg.seed, epoch as u64) {
                let passage = &train.passages()[i];
                let predicted = classify_one(self.gateway, &incumbent, &demos, passage, &ctx, None)?;
                if predicted.as_bool() == Some(passage.label) {
                    continue;
                }
                misclassifications += 1;
                let wrong = if predicted.raw.trim().is_empty() {
                    render_label(!passage.label).to_string()
                } else {
                    predicted.raw.clone()
                };

                let shown = select(&demos, passage, &ctx, 0)?;
                let prior = assemble_classification_prompt(&incumbent, &shown, &passage.text)?;
                let mut dialogue = assemble_reflection_prompt(&prior, &wrong, passage.label)?;
                let rationale = self.rewrite_turn(&dialogue)?;
                let mut event = TuneEvent {
                    passage_id: passage.id.clone(),
                    wrong_prediction: wrong,
                    rationale: rationale.clone(),
                    candidate_instruction: Instruction {
                        text: String::new(),
                        origin: InstructionOrigin::Tuned,
                    },
                    candidate_valid: false,
                    incumbent_f1,
                    candidate_f1: None,
                    accepted: false,
                    timestamp: self.clock.now(),
                };
                if rationale.trim().is_empty() {
                    events.push(event);
                    continue;
                }
                dialogue.push(ChatMessage::assistant(rationale));
                let dialogue = assemble_modification_prompt(&dialogue)?;
                let candidate_text = self.rewrite_turn(&dialogue)?.trim().to_string();
                event.candidate_instruction.text = candidate_text.clone();
                event.timestamp = self.clock.now();
                if candidate_text.is_empty()
                    || candidate_text.chars().count() > cfg.instruction_char_cap
                {
                    events.push(event);
                    continue;
                }
                event.candidate_valid = true;
                let candidate = event.candidate_instruction.clone();
                let candidate_f1 = scorer.score(&candidate)?;
                candidates_evaluated += 1;
                event.candidate_f1 = Some(candidate_f1);
                event.accepted = accepts(incumbent_f1, candidate_f1, cfg.epsilon);
                event.timestamp = self.clock.now();
                if event.accepted {
                    incumbent = candidate;
                    incumbent_f1 = candidate_f1;
                }
                events.push(event);
                if cfg.max_candidate_evals.is_some_and(|max| candidates_evaluated >= max) {
                    break 'epochs;
                }
            }
            epochs_completed += 1;
        }

        Ok(TuneResult {
            initial_instruction: initial.clone(),
            initial_f1,
            final_instruction: incumbent,
            final_train_f1: incumbent_f1,
            events: std::mem::take(events),
            epochs_completed,
            candidates_evaluated,
            misclassifications,
        })
    }

    fn rewrite_turn(&self, messages: &[ChatMessage]) -> Result<String, TuneError> {
        let request = self
            .gateway
            .request(messages.to_vec(), self.gateway.settings().rewrite_max_tokens)?;
        Ok(self.gateway.complete(&request)?.text)
    }
}

/// Greedy acceptance: the candidate must reach `incumbent + epsilon`.
pub fn accepts(incumbent_f1: f64, candidate_f1: f64, epsilon: f64) -> bool {
    // Tolerate representation error so that e.g. 0.70 + 0.01 vs 0.71 accepts.
    candidate_f1 >= incumbent_f1 + epsilon - 1e-12
}

/// Deterministic permutation of `0..n` for the given (seed, epoch).
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Convenience wrapper with the system clock and default execution.
pub fn tune(
    gateway: &Gateway,
    initial: &Instruction,
    train: &Corpus,
    config: TunerConfig,
) -> Result<TuneResult, TuneAbort> {
    Tuner::new(gateway, config).tune(initial, train)
}

const FINAL_HEADER: &str = "== Final instruction ==";

/// Human-readable evolution log. The final instruction is always the last
/// section, so [`read_final_instruction`] can recover it verbatim.
pub fn render_evolution(result: &TuneResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "== Initial instruction (train F1 {:.4}) ==", result.initial_f1);
    let _ = writeln!(out, "{}", result.initial_instruction.text);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "== Steps ({} misclassified passages, {} candidates scored, {} epochs completed) ==",
        result.misclassifications, result.candidates_evaluated, result.epochs_completed
    );
    let mut rewrite = 0;
    for event in &result.events {
        match (event.candidate_valid, event.candidate_f1, event.accepted) {
            (true, Some(f1), true) => {
                rewrite += 1;
                let _ = writeln!(
                    out,
                    "Rewrite {rewrite} (passage {}): F1 {:.4} -> {:.4} (dF1 {:+.4})",
                    event.passage_id,
                    event.incumbent_f1,
                    f1,
                    f1 - event.incumbent_f1
                );
                for line in event.candidate_instruction.text.lines() {
                    let _ = writeln!(out, "    {line}");
                }
            }
            (true, Some(f1), false) => {
                let _ = writeln!(
                    out,
                    "Rejected (passage {}): F1 {:.4} vs incumbent {:.4} (dF1 {:+.4})",
                    event.passage_id,
                    f1,
                    event.incumbent_f1,
                    f1 - event.incumbent_f1
                );
            }
            _ => {
                let _ = writeln!(
                    out,
                    "Skipped (passage {}): rewrite empty or over the length cap",
                    event.passage_id
                );
            }
        }
    }
    if result.events.is_empty() {
        let _ = writeln!(out, "(no rewrites proposed)");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{FINAL_HEADER}");
    let _ = writeln!(out, "train F1 {:.4}", result.final_train_f1);
    out.push_str(&result.final_instruction.text);
    out
}

pub fn export_evolution(result: &TuneResult, path: &Path) -> std::io::Result<()> {
    fs::write(path, render_evolution(result))
}

pub fn read_final_instruction(path: &Path) -> std::io::Result<String> {
    let data = fs::read_to_string(path)?;
    let (_, tail) = data.rsplit_once(FINAL_HEADER).ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, "no final instruction section")
    })?;
    let tail = tail.strip_prefix('\n').unwrap_or(tail);
    let (_, text) = tail.split_once('\n').unwrap_or(("", ""));
    Ok(text.to_string())
}

pub fn write_events_jsonl(events: &[TuneEvent], path: &Path) -> std::io::Result<()> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).expect("event serializes");
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)
}

//! Passage classification under an (instruction, selection policy) pair and
//! repeated-run metrics.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Passage};
use crate::exec::Execution;
use crate::gateway::{sha256_hex, CallOptions, Gateway, GatewayError};
use crate::prompting::{
    assemble_classification_prompt, parse_label, Instruction, ParsedLabel, PromptError,
};
use crate::selection::{select, SelectionContext, SelectionError, SelectionPolicy};

pub const DEFAULT_REPEATS: usize = 7;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("repeats must be at least 1")]
    ZeroRepeats,
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl EvalError {
    /// Errors raised before any model call because inputs were unusable.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            EvalError::EmptyDataset
                | EvalError::ZeroRepeats
                | EvalError::Selection(
                    SelectionError::MissingIndex
                        | SelectionError::MissingTrain
                        | SelectionError::EmptyIndex
                        | SelectionError::PoolTooSmall { .. }
                )
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// Invalid outputs, already counted as errors in `fp`/`fn`.
    pub invalid: u64,
}

impl ConfusionMatrix {
    /// Tally one prediction; `None` is an unparseable answer and counts
    /// against the gold label.
    pub fn record(&mut self, gold: bool, predicted: Option<bool>) {
        let predicted = match predicted {
            Some(p) => p,
            None => {
                self.invalid += 1;
                !gold
            }
        };
        match (gold, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    fn fields(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Metrics {
            accuracy: f[0],
            precision: f[1],
            recall: f[2],
            f1: f[3],
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall and F1; empty denominators give 0.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyConfusion);
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(cm.tp + cm.tn, total),
        precision,
        recall,
        f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_run: Vec<RunResult>,
    pub mean: Metrics,
    /// Sample standard deviation across runs (0 for a single run).
    pub stddev: Metrics,
    pub repeats: usize,
    pub config_fingerprint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSettings {
    pub repeats: usize,
    pub exec: Execution,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            repeats: DEFAULT_REPEATS,
            exec: Execution::default(),
        }
    }
}

/// Classify one passage. On an unparseable answer the request is retried
/// once without the cache; a second bad answer is returned as invalid.
pub fn classify_one(
    gateway: &Gateway,
    instruction: &Instruction,
    policy: &SelectionPolicy,
    passage: &Passage,
    ctx: &SelectionContext<'_>,
    nonce: Option<u64>,
) -> Result<ParsedLabel, EvalError> {
    let demos = select(policy, passage, ctx, nonce.unwrap_or(0))?;
    let messages = assemble_classification_prompt(instruction, &demos, &passage.text)?;
    let request = gateway.request(messages, gateway.settings().classify_max_tokens)?;
    let first = gateway.complete_with(
        &request,
        CallOptions {
            nonce,
            bypass_cache: false,
        },
    )?;
    let parsed = parse_label(&first.text);
    if !parsed.is_invalid() {
        return Ok(parsed);
    }
    let retry = gateway.complete_with(
        &request,
        CallOptions {
            nonce,
            bypass_cache: true,
        },
    )?;
    Ok(parse_label(&retry.text))
}

fn check_policy(policy: &SelectionPolicy, ctx: &SelectionContext<'_>) -> Result<(), EvalError> {
    match policy {
        SelectionPolicy::Similar { .. } => {
            let index = ctx.index.ok_or(SelectionError::MissingIndex)?;
            if index.is_empty() {
                return Err(SelectionError::EmptyIndex.into());
            }
            ctx.train.ok_or(SelectionError::MissingTrain)?;
        }
        SelectionPolicy::Random { k, .. } => {
            let train = ctx.train.ok_or(SelectionError::MissingTrain)?;
            if *k > train.len() {
                return Err(SelectionError::PoolTooSmall { k: *k, pool: train.len() }.into());
            }
        }
        _ => {}
    }
    Ok(())
}

/// Identifies everything that determines an evaluation's inputs.
pub fn eval_fingerprint(
    gateway: &Gateway,
    instruction: &Instruction,
    policy: &SelectionPolicy,
    dataset: &Corpus,
    repeats: usize,
) -> String {
    let ids: Vec<&str> = dataset.passages().iter().map(|p| p.id.as_str()).collect();
    let key = serde_json::json!({
        "settings": gateway.settings(),
        "embedding_model": gateway.embedding_model(),
        "instruction": instruction.text,
        "policy": policy,
        "dataset": dataset.name(),
        "passages": ids,
        "repeats": repeats,
    });
    sha256_hex(key.to_string().as_bytes())[..16].to_string()
}

/// Score every passage of `dataset` once per run, `settings.repeats` times.
///
/// Run `r` uses nonce `r` for both the cache key and random sampling, so
/// runs never reuse each other's completions.
pub fn evaluate(
    gateway: &Gateway,
    instruction: &Instruction,
    policy: &SelectionPolicy,
    dataset: &Corpus,
    ctx: &SelectionContext<'_>,
    settings: EvalSettings,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if settings.repeats == 0 {
        return Err(EvalError::ZeroRepeats);
    }
    check_policy(policy, ctx)?;
    let mut per_run = Vec::with_capacity(settings.repeats);
    for run in 0..settings.repeats as u64 {
        let predictions = settings.exec.try_map(dataset.passages(), |p| {
            classify_one(gateway, instruction, policy, p, ctx, Some(run)).map(|l| l.as_bool())
        })?;
        let mut confusion = ConfusionMatrix::default();
        for (p, pred) in dataset.passages().iter().zip(predictions) {
            confusion.record(p.label, pred);
        }
        let metrics = metrics_from_confusion(&confusion)?;
        per_run.push(RunResult { confusion, metrics });
    }
    let (mean, stddev) = summarize(&per_run);
    Ok(EvalReport {
        per_run,
        mean,
        stddev,
        repeats: settings.repeats,
        config_fingerprint: eval_fingerprint(gateway, instruction, policy, dataset, settings.repeats),
    })
}

fn summarize(runs: &[RunResult]) -> (Metrics, Metrics) {
    let n = runs.len() as f64;
    // Accumulate offsets from the first run so identical runs average to
    // exactly that run's values.
    let base = runs[0].metrics.fields();
    let mut mean = [0.0; 4];
    for r in runs {
        for ((m, v), b) in mean.iter_mut().zip(r.metrics.fields()).zip(base) {
            *m += v - b;
        }
    }
    for (m, b) in mean.iter_mut().zip(base) {
        *m = b + *m / n;
    }
    let mut var = [0.0; 4];
    if runs.len() > 1 {
        for r in runs {
            for ((s, v), m) in var.iter_mut().zip(r.metrics.fields()).zip(mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    (Metrics::from_fields(mean), Metrics::from_fields(var))
}

/// Format a ratio as a percentage with one decimal, rounding half up.
pub fn percent(x: f64) -> String {
    // The small bias absorbs binary representation error at exact halves.
    let tenths = (x * 1000.0 + 0.5 + 1e-7).floor();
    format!("{:.1}", tenths / 10.0)
}

/// `| label | Acc | Prec | Rec | F1 |` with one-decimal percentages.
pub fn table_row(label: &str, m: &Metrics) -> String {
    format!(
        "| {label} | {} | {} | {} | {} |",
        percent(m.accuracy),
        percent(m.precision),
        percent(m.recall),
        percent(m.f1)
    )
}

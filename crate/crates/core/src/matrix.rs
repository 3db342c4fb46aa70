//! The experiment grid: starting instructions × demonstration strategies,
//! optionally preceded by tuning, rendered as two result tables.
//!
//! Table 1 holds the untuned instructions, one row per test-time strategy.
//! Table 2 holds instructions tuned from each starting instruction, one row
//! per (tuning demonstrations, testing strategy) pair, below a baseline row
//! repeating the untuned zero-shot result.

use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::evaluation::{evaluate, percent, EvalSettings, Metrics};
use crate::gateway::Gateway;
use crate::prompting::Instruction;
use crate::selection::{EmbeddingIndex, SelectionContext, SelectionPolicy};
use crate::tuner::{Clock, TuneResult, Tuner, TunerConfig, TuningDemos};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedInstruction {
    pub name: String,
    pub instruction: Instruction,
}

#[derive(Clone, Debug)]
pub struct MatrixPlan {
    pub instructions: Vec<NamedInstruction>,
    pub strategies: Vec<SelectionPolicy>,
    /// Demonstration settings to tune with; empty skips Table 2.
    pub tuning: Vec<TuningDemos>,
    pub eval: EvalSettings,
    pub tuner: TunerConfig,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub instruction: String,
    /// `None` for untuned instructions.
    pub tuning: Option<TuningDemos>,
    pub strategy: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok {
        mean: Metrics,
        stddev: Metrics,
        repeats: usize,
        eval_fingerprint: String,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: CellKey,
    pub outcome: CellOutcome,
}

impl Cell {
    pub fn mean(&self) -> Option<&Metrics> {
        match &self.outcome {
            CellOutcome::Ok { mean, .. } => Some(mean),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedVariant {
    pub initial: String,
    pub tuning: TuningDemos,
    pub outcome: Result<TuneResult, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetadata {
    pub config_fingerprint: String,
    pub model: String,
    pub embedding_model: String,
    pub temperature: f64,
    pub repeats: usize,
    pub epsilon: f64,
    pub tuner_seed: u64,
    pub train_passages: usize,
    pub test_passages: usize,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub metadata: MatrixMetadata,
    pub instructions: Vec<String>,
    pub strategies: Vec<String>,
    pub tuning: Vec<TuningDemos>,
    pub cells: Vec<Cell>,
    pub tuned: Vec<TunedVariant>,
}

impl MatrixResult {
    pub fn cell(&self, instruction: &str, tuning: Option<TuningDemos>, strategy: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| {
            c.key.instruction == instruction && c.key.tuning == tuning && c.key.strategy == strategy
        })
    }

    pub fn failed_cells(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
            .count()
    }
}

/// Everything a matrix run reads besides the plan.
pub struct MatrixInputs<'a> {
    pub gateway: &'a Gateway,
    pub train: &'a Corpus,
    pub test: &'a Corpus,
    pub index: Option<&'a EmbeddingIndex>,
    pub clock: &'a dyn Clock,
}

/// Run every cell in sequence. A failing cell is recorded and the run
/// continues.
pub fn run_matrix(plan: &MatrixPlan, inputs: &MatrixInputs<'_>) -> MatrixResult {
    let started_at = inputs.clock.now();
    let ctx = SelectionContext {
        gateway: inputs.gateway,
        index: inputs.index,
        train: Some(inputs.train),
        exec: plan.eval.exec,
    };
    let run_cell = |key: CellKey, instruction: &Instruction, policy: &SelectionPolicy| {
        let outcome = match evaluate(inputs.gateway, instruction, policy, inputs.test, &ctx, plan.eval) {
            Ok(report) => CellOutcome::Ok {
                mean: report.mean,
                stddev: report.stddev,
                repeats: report.repeats,
                eval_fingerprint: report.config_fingerprint,
            },
            Err(e) => CellOutcome::Failed { error: e.to_string() },
        };
        Cell { key, outcome }
    };

    let mut cells = Vec::new();
    for named in &plan.instructions {
        for policy in &plan.strategies {
            let key = CellKey {
                instruction: named.name.clone(),
                tuning: None,
                strategy: policy.name().to_string(),
            };
            cells.push(run_cell(key, &named.instruction, policy));
        }
    }

    let mut tuned = Vec::new();
    for named in &plan.instructions {
        for &tuning in &plan.tuning {
            let config = TunerConfig {
                demos_during_tuning: tuning,
                ..plan.tuner.clone()
            };
            let result = Tuner::new(inputs.gateway, config)
                .with_execution(plan.eval.exec)
                .with_clock(inputs.clock)
                .tune(&named.instruction, inputs.train);
            for policy in &plan.strategies {
                let key = CellKey {
                    instruction: named.name.clone(),
                    tuning: Some(tuning),
                    strategy: policy.name().to_string(),
                };
                cells.push(match &result {
                    Ok(r) => run_cell(key, &r.final_instruction, policy),
                    Err(abort) => Cell {
                        key,
                        outcome: CellOutcome::Failed {
                            error: format!("tuning failed: {abort}"),
                        },
                    },
                });
            }
            tuned.push(TunedVariant {
                initial: named.name.clone(),
                tuning,
                outcome: result.map_err(|e| e.to_string()),
            });
        }
    }

    let settings = inputs.gateway.settings();
    MatrixResult {
        metadata: MatrixMetadata {
            config_fingerprint: plan.config_fingerprint.clone(),
            model: settings.model.clone(),
            embedding_model: inputs.gateway.embedding_model().to_string(),
            temperature: settings.temperature,
            repeats: plan.eval.repeats,
            epsilon: plan.tuner.epsilon,
            tuner_seed: plan.tuner.seed,
            train_passages: inputs.train.len(),
            test_passages: inputs.test.len(),
            started_at,
            finished_at: inputs.clock.now(),
        },
        instructions: plan.instructions.iter().map(|n| n.name.clone()).collect(),
        strategies: plan.strategies.iter().map(|p| p.name().to_string()).collect(),
        tuning: plan.tuning.clone(),
        cells,
        tuned,
    }
}

fn metric_cells(cell: Option<&Cell>) -> [String; 4] {
    match cell.and_then(Cell::mean) {
        Some(m) => [m.accuracy, m.precision, m.recall, m.f1].map(percent),
        None => std::array::from_fn(|_| "failed".to_string()),
    }
}

fn header_row(leading: &[&str], instructions: &[String]) -> String {
    let mut cols: Vec<String> = leading.iter().map(|s| s.to_string()).collect();
    for name in instructions {
        for m in ["Acc", "Prec", "Rec", "F1"] {
            cols.push(format!("{name} {m}"));
        }
    }
    let mut out = format!("| {} |\n", cols.join(" | "));
    out.push_str(&format!("|{}\n", " --- |".repeat(cols.len())));
    out
}

fn row(leading: &[&str], groups: impl IntoIterator<Item = [String; 4]>) -> String {
    let mut cols: Vec<String> = leading.iter().map(|s| s.to_string()).collect();
    for g in groups {
        cols.extend(g);
    }
    format!("| {} |\n", cols.join(" | "))
}

/// Untuned results: one row per strategy, one column group per instruction.
pub fn render_table1_markdown(result: &MatrixResult) -> String {
    let mut out = String::from("Results of few-shot prompting (%)\n\n");
    out.push_str(&header_row(&["Examples"], &result.instructions));
    for strategy in &result.strategies {
        let groups = result
            .instructions
            .iter()
            .map(|i| metric_cells(result.cell(i, None, strategy)));
        out.push_str(&row(&[strategy], groups));
    }
    out
}

/// Tuned results keyed by (tuning demos, testing strategy), preceded by the
/// untuned zero-shot baseline.
pub fn render_table2_markdown(result: &MatrixResult) -> String {
    let mut out = String::from("Results of automatic prompt design (%)\n\n");
    out.push_str(&header_row(&["Tuning", "Testing"], &result.instructions));
    let baseline = result
        .instructions
        .iter()
        .map(|i| metric_cells(result.cell(i, None, "Zero-shot")));
    out.push_str(&row(&["(no tuning)", "Zero-shot"], baseline));
    for &tuning in &result.tuning {
        for strategy in &result.strategies {
            let groups = result
                .instructions
                .iter()
                .map(|i| metric_cells(result.cell(i, Some(tuning), strategy)));
            out.push_str(&row(&[tuning.name(), strategy], groups));
        }
    }
    out
}

/// One CSV row per cell of the given table (1 = untuned, 2 = tuned).
pub fn render_csv(result: &MatrixResult, table: u8) -> String {
    let mut out = String::from("instruction,tuning,testing,accuracy,precision,recall,f1,status\n");
    let tunings: Vec<Option<TuningDemos>> = if table == 1 {
        vec![None]
    } else {
        result.tuning.iter().copied().map(Some).collect()
    };
    for instruction in &result.instructions {
        for &tuning in &tunings {
            for strategy in &result.strategies {
                let cell = result.cell(instruction, tuning, strategy);
                let status = match cell.map(|c| &c.outcome) {
                    Some(CellOutcome::Ok { .. }) => "ok",
                    _ => "failed",
                };
                let [a, p, r, f] = metric_cells(cell);
                let _ = writeln!(
                    out,
                    "{instruction},{},{strategy},{a},{p},{r},{f},{status}",
                    tuning.map_or("none", TuningDemos::name)
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::exec::Execution;
    use crate::gateway::{HashEmbedder, MatchRule, ScenarioEntry, ScriptedBackend};
    use crate::tuner::FixedClock;
    use std::sync::Arc;

    fn corpus(name: &str, n: usize) -> Corpus {
        Corpus::new(
            name,
            (0..n)
                .map(|i| Passage {
                    id: format!("{name}{i}"),
                    report_id: name.into(),
                    text: format!("{name} passage {i}"),
                    label: i % 2 == 0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn failed_cells_do_not_stop_the_grid() {
        let train = corpus("train", 6);
        let test = corpus("test", 4);
        let mut entries: Vec<ScenarioEntry> = train
            .passages()
            .iter()
            .chain(test.passages())
            .map(|p| ScenarioEntry::new(MatchRule::last_user(&p.text), "True"))
            .collect();
        entries.push(ScenarioEntry::new(MatchRule::last_user_contains("Your prediction"), "why"));
        entries.push(ScenarioEntry::new(MatchRule::last_user_contains("Modify"), "New rules."));
        let gw = Gateway::new(
            Arc::new(ScriptedBackend::from_entries(entries).unwrap()),
            Arc::new(HashEmbedder::default()),
        );
        let plan = MatrixPlan {
            instructions: vec![NamedInstruction {
                name: "Simple".into(),
                instruction: Instruction::simple(),
            }],
            strategies: vec![SelectionPolicy::ZeroShot, SelectionPolicy::similar()],
            tuning: vec![TuningDemos::ZeroShot],
            eval: EvalSettings {
                repeats: 2,
                exec: Execution::Sequential,
            },
            tuner: TunerConfig::default(),
            config_fingerprint: "test".into(),
        };
        let clock = FixedClock(DateTime::<Utc>::UNIX_EPOCH);
        let result = run_matrix(
            &plan,
            &MatrixInputs {
                gateway: &gw,
                train: &train,
                test: &test,
                index: None,
                clock: &clock,
            },
        );
        assert_eq!(result.cells.len(), 4);
        assert_eq!(result.failed_cells(), 2);
        let t1 = render_table1_markdown(&result);
        assert!(t1.contains("| Zero-shot | 50.0 | 50.0 | 100.0 | 66.7 |"), "{t1}");
        assert!(t1.contains("| Similar | failed | failed | failed | failed |"));
        let t2 = render_table2_markdown(&result);
        assert!(t2.contains("| (no tuning) | Zero-shot | 50.0 |"));
        assert_eq!(render_csv(&result, 1).lines().count(), 3);
        assert_eq!(render_csv(&result, 2).lines().count(), 3);
    }
}

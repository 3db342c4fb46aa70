use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use goalscan::corpus::{Corpus, Passage};
use goalscan::evaluation::EvalError;
use goalscan::gateway::{Gateway, HashEmbedder, MatchRule, Role, ScenarioEntry, ScriptedBackend};
use goalscan::prompting::Instruction;
use goalscan::tuner::{write_events_jsonl, FixedClock, InstructionScorer, TuneResult, Tuner, TunerConfig};
use goalscan::Execution;

const CANDIDATES: [(&str, f64); 4] = [
    ("Candidate A: flag only dated targets.", 0.605),
    ("Candidate B: flag dated or quantified targets.", 0.62),
    ("Candidate C: ignore aspirations without numbers.", 0.625),
    ("Candidate D: flag quantified targets and net zero pledges.", 0.64),
];

/// Twelve passages; the scenario answers four of them wrongly regardless of
/// the instruction.
fn toy_corpus() -> (Corpus, Vec<ScenarioEntry>) {
    let mut passages = Vec::new();
    let mut entries = Vec::new();
    for i in 0..12 {
        let label = i % 3 == 0;
        let text = format!("toy passage {i} about emissions planning");
        let wrong = matches!(i, 1 | 4 | 6 | 9);
        let answer = if label != wrong { "True" } else { "False" };
        entries.push(ScenarioEntry::new(MatchRule::last_user(&text), answer));
        passages.push(Passage {
            id: format!("t{i:02}"),
            report_id: format!("r{}", i / 3),
            text,
            label,
        });
    }
    (Corpus::new("toy", passages).unwrap(), entries)
}

struct TableScorer(HashMap<String, f64>);

impl InstructionScorer for TableScorer {
    fn score(&self, instruction: &Instruction) -> Result<f64, EvalError> {
        Ok(*self.0.get(&instruction.text).expect("scored instruction is scripted"))
    }
}

fn trajectory_scorer() -> TableScorer {
    let mut table: HashMap<String, f64> = CANDIDATES.iter().map(|(t, f)| (t.to_string(), *f)).collect();
    table.insert(Instruction::simple().text, 0.60);
    TableScorer(table)
}

fn trajectory_backend() -> ScriptedBackend {
    let (_, mut entries) = toy_corpus();
    for (turn, (text, _)) in CANDIDATES.iter().enumerate() {
        entries.push(ScenarioEntry::new(MatchRule::turn(2 * turn), format!("rationale {turn}")));
        entries.push(ScenarioEntry::new(MatchRule::turn(2 * turn + 1), *text));
    }
    ScriptedBackend::from_entries(entries).unwrap()
}

fn clock() -> FixedClock {
    FixedClock(DateTime::<Utc>::from_timestamp(1_700_000_000, 0).unwrap())
}

fn run_trajectory(epsilon: f64) -> TuneResult {
    let (train, _) = toy_corpus();
    let gw = Gateway::new(Arc::new(trajectory_backend()), Arc::new(HashEmbedder::default()));
    let scorer = trajectory_scorer();
    let clock = clock();
    let config = TunerConfig {
        epsilon,
        seed: 3,
        ..TunerConfig::default()
    };
    Tuner::new(&gw, config)
        .with_execution(Execution::Sequential)
        .with_scorer(&scorer)
        .with_clock(&clock)
        .tune(&Instruction::simple(), &train)
        .unwrap()
}

fn events_bytes(result: &TuneResult) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    write_events_jsonl(&result.events, &path).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn trajectory_accepts_exactly_the_margin_clearing_candidates() {
    let result = run_trajectory(0.01);
    let decisions: Vec<(f64, f64, bool)> = result
        .events
        .iter()
        .map(|e| (e.incumbent_f1, e.candidate_f1.unwrap(), e.accepted))
        .collect();
    assert_eq!(
        decisions,
        vec![(0.60, 0.605, false), (0.60, 0.62, true), (0.62, 0.625, false), (0.62, 0.64, true)]
    );
    assert_eq!(result.accepted().count(), 2);
    assert_eq!(result.final_train_f1, 0.64);
    assert_eq!(result.final_instruction.text, CANDIDATES[3].0);
}

#[test]
fn accepted_incumbents_rise_by_at_least_epsilon() {
    let result = run_trajectory(0.01);
    let mut incumbent = result.initial_f1;
    for e in result.accepted() {
        let f1 = e.candidate_f1.unwrap();
        assert!(f1 >= incumbent + 0.01 - 1e-12);
        incumbent = f1;
    }
    assert_eq!(incumbent, result.final_train_f1);
}

#[test]
fn reruns_produce_identical_event_logs() {
    assert_eq!(events_bytes(&run_trajectory(0.01)), events_bytes(&run_trajectory(0.01)));
}

#[test]
fn large_margin_rejects_small_gains() {
    let result = run_trajectory(0.5);
    assert_eq!(result.events.len(), 4);
    assert_eq!(result.accepted().count(), 0);
    assert_eq!(result.final_instruction, Instruction::simple());
}

const FINANCING_PASSAGE: &str = "Section 4 of our sustainable financing guide lists which loans qualify as green, \
and the staff committee reviews the climate strategy that supports a transition to a low carbon economy.";
const FINANCING_RATIONALE: &str = "The passage explains a financing framework and a broad strategy. It states no \
commitment, target or deadline for reducing emissions, so answering True over-weighted the general climate wording.";
const FINANCING_REWRITE: &str = "Determine if the text explicitly commits to reducing carbon emissions, reaching net \
zero, or meeting a measurable reduction target. Return \"True\" if it does, otherwise return \"False\". Focus on clear \
statements of intent or measurable goals, not general strategies.";

#[test]
fn misread_financing_passage_yields_the_scripted_rewrite() {
    let train = Corpus::new(
        "financing",
        vec![
            Passage {
                id: "fin-1".into(),
                report_id: "bank".into(),
                text: FINANCING_PASSAGE.into(),
                label: false,
            },
            Passage {
                id: "fin-2".into(),
                report_id: "bank".into(),
                text: "We will cut operational emissions 40% by 2030.".into(),
                label: true,
            },
        ],
    )
    .unwrap();
    let backend = Arc::new(
        ScriptedBackend::from_entries(vec![
            ScenarioEntry::new(MatchRule::last_user(FINANCING_PASSAGE).and_system_contains("Focus on clear"), "False"),
            ScenarioEntry::new(MatchRule::last_user(FINANCING_PASSAGE), "True"),
            ScenarioEntry::new(MatchRule::last_user_contains("40% by 2030"), "True"),
            ScenarioEntry::new(MatchRule::last_user_contains("we expect the answer to be \"False\""), FINANCING_RATIONALE),
            ScenarioEntry::new(MatchRule::last_user_contains("Modify the instruction"), FINANCING_REWRITE),
        ])
        .unwrap(),
    );
    let gw = Gateway::new(backend.clone(), Arc::new(HashEmbedder::default()));
    let clock = clock();
    let result = Tuner::new(&gw, TunerConfig::default())
        .with_execution(Execution::Sequential)
        .with_clock(&clock)
        .tune(&Instruction::simple(), &train)
        .unwrap();

    assert_eq!(result.events.len(), 1);
    let event = &result.events[0];
    assert_eq!(event.passage_id, "fin-1");
    assert_eq!(event.wrong_prediction, "True");
    assert_eq!(event.rationale, FINANCING_RATIONALE);
    assert_eq!(event.candidate_instruction.text, FINANCING_REWRITE);
    assert!(event.accepted);
    assert_eq!(result.final_train_f1, 1.0);

    // The rewrite request replays the whole exchange.
    let rewrite_request = backend
        .requests()
        .into_iter()
        .find(|r| r.last_user().starts_with("Modify the instruction"))
        .unwrap();
    let roles: Vec<Role> = rewrite_request.messages.iter().map(|m| m.role).collect();
    assert_eq!(
        roles,
        [Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant, Role::User]
    );
    assert_eq!(rewrite_request.messages[1].content, FINANCING_PASSAGE);
    assert_eq!(rewrite_request.messages[2].content, "True");
    assert_eq!(rewrite_request.messages[4].content, FINANCING_RATIONALE);
}

#[test]
fn gateway_scored_tuning_follows_real_f1() {
    // Train F1 under each instruction is computed by the default scorer from
    // scripted answers; only instructions containing "dated" fix passage 6.
    let (train, mut entries) = toy_corpus();
    let fixed = &train.passages()[6];
    entries.insert(
        0,
        ScenarioEntry::new(MatchRule::last_user(&fixed.text).and_system_contains("dated"), "True"),
    );
    entries.push(ScenarioEntry::new(MatchRule::last_user_contains("Your prediction is wrong"), "needs dates"));
    entries.push(ScenarioEntry::new(MatchRule::last_user_contains("Modify the instruction"), "Flag dated targets."));
    let gw = Gateway::new(
        Arc::new(ScriptedBackend::from_entries(entries).unwrap()),
        Arc::new(HashEmbedder::default()),
    );
    let clock = clock();
    let result = Tuner::new(&gw, TunerConfig::default())
        .with_execution(Execution::Sequential)
        .with_clock(&clock)
        .tune(&Instruction::simple(), &train)
        .unwrap();
    // Initially tp 2 fp 2 fn 2: F1 0.5. Fixing passage 6 gives tp 3 fp 2 fn 1.
    assert!((result.initial_f1 - 0.5).abs() < 1e-12);
    assert!((result.final_train_f1 - 2.0 * 3.0 / (2.0 * 3.0 + 3.0)).abs() < 1e-12);
    assert_eq!(result.accepted().count(), 1);
    assert!(result.events.iter().skip_while(|e| !e.accepted).skip(1).all(|e| !e.accepted));
}

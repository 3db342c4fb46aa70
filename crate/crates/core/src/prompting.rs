//! Chat prompt assembly for classification and instruction rewriting, label
//! parsing, and the bundled instruction/demonstration assets.

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatMessage, Role};

const SIMPLE_INSTRUCTION: &str = include_str!("../assets/simple_instruction.txt");
const EXPERT_INSTRUCTION: &str = include_str!("../assets/expert_instruction.txt");
const REFLECTION_TEXT: &str = include_str!("../assets/reflection.txt");
const MODIFICATION_TEXT: &str = include_str!("../assets/modification.txt");
const STATIC_DEMOS: &str = include_str!("../assets/static_demos.jsonl");

/// Placeholder in the reflection text replaced by the expected label.
pub const TARGET_LABEL_PLACEHOLDER: &str = "<target label>";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("passage text is empty")]
    EmptyPassage,
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("demonstration {0} has empty input text")]
    EmptyDemonstration(usize),
    #[error("reflection needs a dialogue ending with the passage user message")]
    BadDialogue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionOrigin {
    BuiltinSimple,
    BuiltinExpert,
    Tuned,
    User,
}

/// The system-prompt text defining the classification task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub origin: InstructionOrigin,
}

impl Instruction {
    pub fn new(text: impl Into<String>, origin: InstructionOrigin) -> Result<Self, PromptError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PromptError::EmptyInstruction);
        }
        Ok(Self { text, origin })
    }

    pub fn simple() -> Self {
        Self {
            text: SIMPLE_INSTRUCTION.to_string(),
            origin: InstructionOrigin::BuiltinSimple,
        }
    }

    pub fn expert() -> Self {
        Self {
            text: EXPERT_INSTRUCTION.to_string(),
            origin: InstructionOrigin::BuiltinExpert,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub input_text: String,
    pub label: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelValue {
    True,
    False,
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabel {
    pub value: LabelValue,
    pub raw: String,
}

impl ParsedLabel {
    pub fn as_bool(&self) -> Option<bool> {
        match self.value {
            LabelValue::True => Some(true),
            LabelValue::False => Some(false),
            LabelValue::Invalid => None,
        }
    }

    pub fn is_invalid(&self) -> bool {
        self.value == LabelValue::Invalid
    }
}

pub fn render_label(label: bool) -> &'static str {
    if label {
        "True"
    } else {
        "False"
    }
}

/// `[system: instruction] ++ [user: demo, assistant: label]* ++ [user: passage]`.
pub fn assemble_classification_prompt(
    instruction: &Instruction,
    demos: &[Demonstration],
    passage_text: &str,
) -> Result<Vec<ChatMessage>, PromptError> {
    if passage_text.is_empty() {
        return Err(PromptError::EmptyPassage);
    }
    if instruction.text.is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    let mut messages = Vec::with_capacity(2 + 2 * demos.len());
    messages.push(ChatMessage::system(instruction.text.clone()));
    for (i, demo) in demos.iter().enumerate() {
        if demo.input_text.is_empty() {
            return Err(PromptError::EmptyDemonstration(i));
        }
        messages.push(ChatMessage::user(demo.input_text.clone()));
        messages.push(ChatMessage::assistant(render_label(demo.label)));
    }
    messages.push(ChatMessage::user(passage_text));
    Ok(messages)
}

pub fn reflection_text(target_label: bool) -> String {
    REFLECTION_TEXT.replace(TARGET_LABEL_PLACEHOLDER, render_label(target_label))
}

/// Append the model's wrong answer and the request to analyze the error.
pub fn assemble_reflection_prompt(
    prior: &[ChatMessage],
    wrong_answer: &str,
    target_label: bool,
) -> Result<Vec<ChatMessage>, PromptError> {
    if prior.last().map(|m| m.role) != Some(Role::User) {
        return Err(PromptError::BadDialogue);
    }
    let mut messages = prior.to_vec();
    messages.push(ChatMessage::assistant(wrong_answer));
    messages.push(ChatMessage::user(reflection_text(target_label)));
    Ok(messages)
}

/// Append the request for a rewritten instruction. `dialogue` must already
/// hold the model's rationale as its last message.
pub fn assemble_modification_prompt(dialogue: &[ChatMessage]) -> Result<Vec<ChatMessage>, PromptError> {
    if dialogue.last().map(|m| m.role) != Some(Role::Assistant) {
        return Err(PromptError::BadDialogue);
    }
    let mut messages = dialogue.to_vec();
    messages.push(ChatMessage::user(MODIFICATION_TEXT));
    Ok(messages)
}

/// Trim, strip trailing `.,;:!`, lowercase; accept `true`/`false` as the
/// whole answer or as its first token.
pub fn parse_label(raw: &str) -> ParsedLabel {
    const TRAILING: &[char] = &['.', ',', ';', ':', '!'];
    let normalized = raw.trim().trim_end_matches(TRAILING).to_lowercase();
    let first = normalized
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .trim_end_matches(TRAILING);
    let value = match first {
        "true" => LabelValue::True,
        "false" => LabelValue::False,
        _ => LabelValue::Invalid,
    };
    ParsedLabel {
        value,
        raw: raw.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templates {
    pub simple: Instruction,
    pub expert: Instruction,
    pub static_demos: Vec<Demonstration>,
    pub reflection_text: String,
    pub modification_text: String,
}

pub fn builtin_templates() -> Templates {
    Templates {
        simple: Instruction::simple(),
        expert: Instruction::expert(),
        static_demos: static_demos(),
        reflection_text: REFLECTION_TEXT.to_string(),
        modification_text: MODIFICATION_TEXT.to_string(),
    }
}

pub fn static_demos() -> Vec<Demonstration> {
    STATIC_DEMOS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled demonstrations are valid JSON"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(text: &str, label: bool) -> Demonstration {
        Demonstration {
            input_text: text.into(),
            label,
        }
    }

    #[test]
    fn message_counts() {
        let i = Instruction::simple();
        let one = assemble_classification_prompt(&i, &[demo("d", true)], "p").unwrap();
        let roles: Vec<Role> = one.iter().map(|m| m.role).collect();
        assert_eq!(roles, [Role::System, Role::User, Role::Assistant, Role::User]);
        assert_eq!(one[2].content, "True");
        assert_eq!(assemble_classification_prompt(&i, &[], "p").unwrap().len(), 2);
        let five: Vec<_> = (0..5).map(|k| demo(&format!("d{k}"), k % 2 == 0)).collect();
        assert_eq!(assemble_classification_prompt(&i, &five, "p").unwrap().len(), 12);
        assert!(matches!(
            assemble_classification_prompt(&i, &[], ""),
            Err(PromptError::EmptyPassage)
        ));
    }

    #[test]
    fn reflection_substitutes_label() {
        let prior = assemble_classification_prompt(&Instruction::simple(), &[], "p").unwrap();
        let t = assemble_reflection_prompt(&prior, "False", true).unwrap();
        assert_eq!(t.len(), 4);
        assert!(t[3].content.contains(r#"the answer to be "True""#));
        let f = assemble_reflection_prompt(&prior, "True", false).unwrap();
        assert!(f[3].content.contains(r#""False""#));
        assert!(!f[3].content.contains(TARGET_LABEL_PLACEHOLDER));
    }

    #[test]
    fn modification_appends_verbatim_text() {
        let mut dialogue = assemble_classification_prompt(
            &Instruction::simple(),
            &[demo("d", false)],
            "p",
        )
        .unwrap();
        dialogue = assemble_reflection_prompt(&dialogue, "True", false).unwrap();
        dialogue.push(ChatMessage::assistant("because"));
        assert_eq!(dialogue.len(), 7);
        let m = assemble_modification_prompt(&dialogue).unwrap();
        assert_eq!(m.len(), 8);
        assert_eq!(m.last().unwrap().content, builtin_templates().modification_text);
        assert!(assemble_modification_prompt(&m).is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_label("True").value, LabelValue::True);
        assert_eq!(parse_label("  false.").value, LabelValue::False);
        assert_eq!(parse_label("FALSE!").value, LabelValue::False);
        assert_eq!(parse_label("True, the passage sets a 2030 target").value, LabelValue::True);
        assert_eq!(parse_label("The passage discusses targets").value, LabelValue::Invalid);
        assert_eq!(parse_label("").value, LabelValue::Invalid);
        assert_eq!(parse_label("truely").value, LabelValue::Invalid);
        for b in [true, false] {
            assert_eq!(parse_label(render_label(b)).as_bool(), Some(b));
        }
    }

    #[test]
    fn builtin_assets() {
        let t = builtin_templates();
        assert!(t.simple.text.starts_with("Determine if the text describes a commitment"));
        assert!(t.expert.text.starts_with("You are an information extraction tool"));
        let labels: Vec<bool> = t.static_demos.iter().map(|d| d.label).collect();
        assert_eq!(labels, [false, true, false, true, false]);
        assert!(t.reflection_text.starts_with("Your prediction is wrong, we expect"));
        assert!(t
            .modification_text
            .starts_with("Modify the instruction to improve understanding"));
    }
}

use goalscan::gateway::{ChatMessage, Role};
use goalscan::prompting::{
    assemble_classification_prompt, assemble_modification_prompt, assemble_reflection_prompt, static_demos,
    Instruction,
};

const PASSAGE: &str = include_str!("golden/passage.txt");
const RATIONALE: &str = include_str!("golden/rationale.txt");

fn transcript(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            format!("[{role}]\n{}\n\n", m.content)
        })
        .collect()
}

fn dialogues() -> [Vec<ChatMessage>; 3] {
    let cls = assemble_classification_prompt(&Instruction::simple(), &static_demos(), PASSAGE).unwrap();
    let mut refl = assemble_reflection_prompt(&cls, "True", false).unwrap();
    let ref_only = refl.clone();
    refl.push(ChatMessage::assistant(RATIONALE));
    let modif = assemble_modification_prompt(&refl).unwrap();
    [cls, ref_only, modif]
}

#[test]
fn classification_prompt_matches_golden() {
    assert_eq!(transcript(&dialogues()[0]), include_str!("golden/classification.txt"));
}

#[test]
fn reflection_prompt_matches_golden() {
    assert_eq!(transcript(&dialogues()[1]), include_str!("golden/reflection.txt"));
}

#[test]
fn modification_prompt_matches_golden() {
    assert_eq!(transcript(&dialogues()[2]), include_str!("golden/modification.txt"));
}

#[test]
fn goldens_carry_the_template_phrases() {
    let all = include_str!("golden/modification.txt");
    for phrase in [
        "Determine if the text describes a commitment",
        "Your prediction is wrong, we expect",
        "Modify the instruction to improve understanding",
    ] {
        assert!(all.contains(phrase), "{phrase}");
    }
    assert!(Instruction::expert().text.contains("You are an information extraction tool"));
}

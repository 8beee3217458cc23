use serde::{Deserialize, Serialize};

use crate::library::render_skill_body;
use crate::model::{Question, QuestionType, SkillFile};

pub const SYSTEM_PROMPT: &str =
    "You are a financial analyst answering exam questions from corporate finance, investments, derivatives, fixed income and related fields.";

pub const SKILL_PREAMBLE: &str =
    "The following skill files contain domain knowledge. Apply the procedures that match this question.";

pub const POT_INSTRUCTION: &str = "Solve the problem by writing a single Python program inside one fenced ```python code block. Do not use print(); the last line of the program must be a bare expression that evaluates to the final numeric answer.";

const MC_POT_NOTE: &str = "The value of that expression will be matched to the closest option.";
const MC_DIRECT_INSTRUCTION: &str = "Respond with only the label of the correct option.";
const OPEN_DIRECT_INSTRUCTION: &str = "Respond with only the final answer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Direct,
    Pot,
}

impl PromptMode {
    pub fn for_question(q: &Question) -> Self {
        if q.is_arithmetic {
            PromptMode::Pot
        } else {
            PromptMode::Direct
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_prompt: String,
    pub injected_paths: Vec<String>,
    pub mode: PromptMode,
}

/// One skill file as it appears inside a student prompt.
pub fn render_skill_section(path: &str, file: &SkillFile) -> String {
    format!("# Skill: {path}\n\n{}", render_skill_body(file))
}

/// Concatenates skill sections in the given order.
pub fn render_skill_sections<'a>(
    skills: impl IntoIterator<Item = (&'a str, &'a SkillFile)>,
) -> String {
    skills
        .into_iter()
        .map(|(path, file)| render_skill_section(path, file))
        .collect::<Vec<_>>()
        .join("\n")
}

fn task_prompt(q: &Question, mode: PromptMode) -> String {
    let mut out = String::new();
    if !q.context.trim().is_empty() {
        out.push_str("Context:\n");
        out.push_str(q.context.trim());
        out.push_str("\n\n");
    }
    out.push_str("Question:\n");
    out.push_str(q.text.trim());
    out.push('\n');
    if q.qtype == QuestionType::MultipleChoice {
        out.push_str("\nOptions:\n");
        for opt in &q.options {
            out.push_str(&format!("{}. {}\n", opt.label, opt.body.trim()));
        }
    }
    out.push('\n');
    match (mode, q.qtype) {
        (PromptMode::Pot, QuestionType::MultipleChoice) => {
            out.push_str(POT_INSTRUCTION);
            out.push(' ');
            out.push_str(MC_POT_NOTE);
        }
        (PromptMode::Pot, QuestionType::OpenEnded) => out.push_str(POT_INSTRUCTION),
        (PromptMode::Direct, QuestionType::MultipleChoice) => out.push_str(MC_DIRECT_INSTRUCTION),
        (PromptMode::Direct, QuestionType::OpenEnded) => out.push_str(OPEN_DIRECT_INSTRUCTION),
    }
    out
}

/// The skill-free task prompt.
pub fn baseline_prompt(q: &Question, mode: PromptMode) -> PromptBundle {
    build_prompt(q, &[], mode)
}

/// Assembles the student prompt; injected skills precede the task.
pub fn build_prompt(q: &Question, skills: &[(&str, &SkillFile)], mode: PromptMode) -> PromptBundle {
    let mut user = String::new();
    if !skills.is_empty() {
        user.push_str(SKILL_PREAMBLE);
        user.push_str("\n\n");
        user.push_str(&render_skill_sections(skills.iter().copied()));
        user.push_str("\n---\n\n");
    }
    user.push_str(&task_prompt(q, mode));
    PromptBundle {
        system_prompt: SYSTEM_PROMPT.to_string(),
        user_prompt: user,
        injected_paths: skills.iter().map(|(p, _)| p.to_string()).collect(),
        mode,
    }
}

/// Pulls the answer out of a direct-mode completion: an `Answer:` line if
/// present, else the last non-empty line.
pub fn extract_direct_answer(completion: &str) -> String {
    let lines: Vec<&str> = completion
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    for line in lines.iter().rev() {
        let lower = line.to_ascii_lowercase();
        for prefix in ["final answer:", "answer:"] {
            if let Some(pos) = lower.find(prefix) {
                return line[pos + prefix.len()..].trim().to_string();
            }
        }
    }
    lines.last().map(|l| l.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnswerOption, Difficulty, ErrorType, SkillPattern};

    fn question(arith: bool) -> Question {
        Question {
            id: "q1".into(),
            group_id: "g".into(),
            text: "What is the price of the bond?".into(),
            context: "Forward rates are 5% and 6%.".into(),
            subfield: "fixed_income".into(),
            difficulty: Difficulty::Medium,
            qtype: QuestionType::MultipleChoice,
            options: vec![
                AnswerOption::new("A", "$88.9"),
                AnswerOption::new("B", "$91.2"),
            ],
            gold: "A".into(),
            is_arithmetic: arith,
            language_tag: "en".into(),
        }
    }

    fn skill(name: &str) -> SkillFile {
        SkillFile {
            subfield: "fixed_income".into(),
            error_type: ErrorType::WrongMethodSelection,
            version: 1,
            source_question_ids: Default::default(),
            summary: String::new(),
            keywords: vec![],
            patterns: vec![SkillPattern {
                name: name.into(),
                description: "d".into(),
                when_to_use: vec![],
                procedure: vec!["step".into()],
                example: String::new(),
            }],
        }
    }

    #[test]
    fn skills_come_before_context_and_question() {
        let (a, b) = (skill("A"), skill("B"));
        let p = build_prompt(
            &question(false),
            &[("fixed_income/a.md", &a), ("common/b.md", &b)],
            PromptMode::Direct,
        );
        let u = &p.user_prompt;
        let ia = u.find("# Skill: fixed_income/a.md").unwrap();
        let ib = u.find("# Skill: common/b.md").unwrap();
        let ic = u.find("Context:").unwrap();
        let iq = u.find("Question:").unwrap();
        assert!(ia < ib && ib < ic && ic < iq);
        assert_eq!(p.injected_paths, vec!["fixed_income/a.md", "common/b.md"]);
    }

    #[test]
    fn no_skills_equals_baseline() {
        let q = question(false);
        let p = build_prompt(&q, &[], PromptMode::Direct);
        assert_eq!(p, baseline_prompt(&q, PromptMode::Direct));
        assert!(!p.user_prompt.contains("# Skill:"));
        assert!(p.user_prompt.ends_with(MC_DIRECT_INSTRUCTION));
    }

    #[test]
    fn pot_mode_requests_expression_output() {
        let q = question(true);
        let p = build_prompt(&q, &[], PromptMode::for_question(&q));
        assert_eq!(p.mode, PromptMode::Pot);
        assert!(p.user_prompt.contains("Do not use print()"));
        assert!(p.user_prompt.contains("bare expression"));
    }

    #[test]
    fn direct_answer_extraction() {
        assert_eq!(extract_direct_answer("B"), "B");
        assert_eq!(extract_direct_answer("Reasoning...\nAnswer: (C)\n"), "(C)");
        assert_eq!(
            extract_direct_answer("line one\n\n  last line  \n"),
            "last line"
        );
        assert_eq!(extract_direct_answer(""), "");
    }
}

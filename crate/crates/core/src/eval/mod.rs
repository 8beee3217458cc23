//! Per-question evaluation: prompt, student call, PoT execution, option
//! mapping and grading.

pub mod grading;
pub mod pot;
pub mod prompt;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{CompletionRequest, Gateway, Role, DEFAULT_MAX_TOKENS};
use crate::model::{
    Condition, EvalRecord, GradingRoute, PotTrace, Question, QuestionType, SkillFile, SkillLibrary,
};
use crate::selector::{resolve_paths, select_skills, Selection, SelectorSettings};

use self::grading::{
    grade_mc, judge_prompt, map_to_option, parse_option_number, parse_verdict, resolve_label,
    Verdict,
};
use self::pot::{extract_pot_code, PotExecutor};
use self::prompt::{build_prompt, extract_direct_answer, PromptMode};

pub const JUDGE_PARSE_FAILURE: &str = "judge-parse-failure";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub max_tokens: u32,
    pub workers: usize,
    /// Role asked to pick an option when no option body is numeric. `None`
    /// leaves such answers unmapped.
    pub mapper_role: Option<Role>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            workers: 4,
            mapper_role: None,
        }
    }
}

pub struct Evaluator<'a> {
    gateway: &'a Gateway,
    executor: &'a dyn PotExecutor,
    settings: EvalSettings,
    pool: rayon::ThreadPool,
}

/// Correct/total counter with the fixed two-decimal percentage rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }

    /// Percentage rounded half-up to hundredths using integer arithmetic, or
    /// "—" for an empty tally.
    pub fn render(&self) -> String {
        if self.total == 0 {
            return "—".to_string();
        }
        let (c, t) = (self.correct as u128, self.total as u128);
        let hundredths = (c * 20_000 + t) / (2 * t);
        format!("{}.{:02}", hundredths / 100, hundredths % 100)
    }
}

impl Serialize for Tally {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Tally", 3)?;
        st.serialize_field("correct", &self.correct)?;
        st.serialize_field("total", &self.total)?;
        st.serialize_field("accuracy", &self.render())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Tally {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            correct: usize,
            total: usize,
        }
        let raw = Raw::deserialize(d)?;
        Ok(Tally {
            correct: raw.correct,
            total: raw.total,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub overall: Tally,
    pub by_qtype: BTreeMap<String, Tally>,
    pub by_difficulty: BTreeMap<String, Tally>,
    pub by_subfield: BTreeMap<String, Tally>,
}

impl AccuracySummary {
    /// Records are matched to questions by id; unknown ids are ignored.
    pub fn from_records(questions: &[Question], records: &[EvalRecord]) -> Self {
        let by_id: BTreeMap<&str, &Question> =
            questions.iter().map(|q| (q.id.as_str(), q)).collect();
        let mut s = AccuracySummary::default();
        for r in records {
            let Some(q) = by_id.get(r.question_id.as_str()) else {
                continue;
            };
            s.overall.add(r.correct);
            s.by_qtype
                .entry(q.qtype.as_str().to_string())
                .or_default()
                .add(r.correct);
            s.by_difficulty
                .entry(q.difficulty.as_str().to_string())
                .or_default()
                .add(r.correct);
            s.by_subfield
                .entry(q.subfield.clone())
                .or_default()
                .add(r.correct);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    /// Parallel to `records`; empty when evaluated without a library.
    pub selections: Vec<Selection>,
    pub summary: AccuracySummary,
    pub library_version: Option<u32>,
}

impl EvalReport {
    pub fn correct_ids(&self) -> std::collections::BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.correct)
            .map(|r| r.question_id.clone())
            .collect()
    }

    /// One JSON record per line.
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// The outcome of grading one predicted answer.
struct Graded {
    correct: bool,
    issue: Option<String>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        gateway: &'a Gateway,
        executor: &'a dyn PotExecutor,
        settings: EvalSettings,
    ) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.workers.max(1))
            .build()
            .expect("worker pool");
        Self {
            gateway,
            executor,
            settings,
            pool,
        }
    }

    pub fn settings(&self) -> &EvalSettings {
        &self.settings
    }

    pub fn gateway(&self) -> &Gateway {
        self.gateway
    }

    /// Runs `f` over `items` on the worker pool, keeping input order.
    pub fn parallel_map<T: Sync, R: Send>(
        &self,
        items: &[T],
        f: impl Fn(&T) -> R + Sync + Send,
    ) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }

    /// Evaluates one question with the given files injected. Failures are
    /// captured in the record.
    pub fn evaluate_question(
        &self,
        q: &Question,
        condition: Condition,
        loaded: &[(&str, &SkillFile)],
    ) -> EvalRecord {
        let mode = PromptMode::for_question(q);
        let bundle = build_prompt(q, loaded, mode);
        let mut record = EvalRecord {
            question_id: q.id.clone(),
            condition,
            loaded_files: bundle.injected_paths.clone(),
            raw_completion: String::new(),
            extracted_answer: String::new(),
            correct: false,
            grading_route: GradingRoute::for_qtype(q.qtype),
            pot_trace: None,
            issues: Vec::new(),
        };
        let req = CompletionRequest::new(Role::Student, bundle.system_prompt, bundle.user_prompt)
            .with_max_tokens(self.settings.max_tokens);
        match self.gateway.complete(&req) {
            Ok(text) => record.raw_completion = text,
            Err(e) => {
                record.issues.push(format!("student call failed: {e}"));
                if mode == PromptMode::Pot {
                    record.pot_trace = Some(PotTrace {
                        code: String::new(),
                        result: crate::model::ExecutionResult::error(
                            crate::model::ExecErrorClass::RuntimeError,
                            "no completion to execute",
                        ),
                    });
                }
                return record;
            }
        }

        let answer = match mode {
            PromptMode::Direct => Some(extract_direct_answer(&record.raw_completion)),
            PromptMode::Pot => self.pot_answer(q, &mut record),
        };
        let Some(answer) = answer else { return record };
        record.extracted_answer = answer;
        let graded = match q.qtype {
            QuestionType::MultipleChoice => Graded {
                correct: grade_mc(&record.extracted_answer, &q.gold, &q.options),
                issue: None,
            },
            QuestionType::OpenEnded => self.grade_open(q, &record.extracted_answer),
        };
        record.correct = graded.correct;
        record.issues.extend(graded.issue);
        record
    }

    /// Executes the program in the completion and turns its value into an
    /// answer (an option label for multiple choice).
    fn pot_answer(&self, q: &Question, record: &mut EvalRecord) -> Option<String> {
        let code = extract_pot_code(&record.raw_completion);
        let result = if code.is_empty() {
            crate::model::ExecutionResult::error(
                crate::model::ExecErrorClass::RuntimeError,
                "no code in completion",
            )
        } else {
            self.executor.execute(&code)
        };
        let value = result.value().map(str::to_string);
        if let Some(class) = result.error_class() {
            record
                .issues
                .push(format!("program execution failed: {class:?}"));
        }
        record.pot_trace = Some(PotTrace { code, result });
        let value = value?;
        if q.qtype == QuestionType::OpenEnded {
            return Some(value);
        }
        let mapped = match parse_option_number(&value) {
            Some(v) => map_to_option(v, &q.options),
            None => resolve_label(&value, &q.options),
        };
        match mapped {
            Some(label) => Some(label),
            None => match self.map_with_llm(q, &value) {
                Ok(label) => Some(label),
                Err(issue) => {
                    record.extracted_answer = value;
                    record.issues.push(issue);
                    None
                }
            },
        }
    }

    fn map_with_llm(&self, q: &Question, value: &str) -> Result<String, String> {
        let Some(role) = self.settings.mapper_role else {
            return Err(format!("unmapped: value {value:?} matches no option"));
        };
        let mut user = format!("Question:\n{}\n\nOptions:\n", q.text.trim());
        for o in &q.options {
            user.push_str(&format!("{}. {}\n", o.label, o.body.trim()));
        }
        user.push_str(&format!(
            "\nA calculation produced the value {value}. Reply with only the label of the option it corresponds to."
        ));
        let req = CompletionRequest::new(role, prompt::SYSTEM_PROMPT, user);
        let reply = self
            .gateway
            .complete(&req)
            .map_err(|e| format!("unmapped: mapper call failed: {e}"))?;
        resolve_label(&extract_direct_answer(&reply), &q.options)
            .ok_or_else(|| format!("unmapped: mapper reply {:?} names no option", reply.trim()))
    }

    fn grade_open(&self, q: &Question, predicted: &str) -> Graded {
        let user = judge_prompt(&q.text, &q.context, &q.gold, predicted);
        let mut req =
            CompletionRequest::new(Role::Judge, grading::JUDGE_SYSTEM_PROMPT, user.clone());
        for attempt in 0..2 {
            if attempt == 1 {
                req.user_prompt = format!(
                    "{user}\n\nYour previous reply had no verdict line. Reply again and finish with `VERDICT: CORRECT` or `VERDICT: INCORRECT`."
                );
            }
            match self.gateway.complete(&req) {
                Ok(reply) => {
                    if let Some(v) = parse_verdict(&reply) {
                        return Graded {
                            correct: v == Verdict::Correct,
                            issue: None,
                        };
                    }
                }
                Err(e) => {
                    return Graded {
                        correct: false,
                        issue: Some(format!("judge call failed: {e}")),
                    }
                }
            }
        }
        Graded {
            correct: false,
            issue: Some(JUDGE_PARSE_FAILURE.to_string()),
        }
    }

    /// Evaluates every question, selecting skills per question when a
    /// library is given.
    pub fn evaluate_set(
        &self,
        questions: &[Question],
        library: Option<(&SkillLibrary, &SelectorSettings)>,
    ) -> EvalReport {
        let outcomes: Vec<(EvalRecord, Option<Selection>)> =
            self.parallel_map(questions, |q| match library {
                None => (
                    self.evaluate_question(q, Condition::WithoutSkills, &[]),
                    None,
                ),
                Some((lib, settings)) => {
                    let mut selection = select_skills(self.gateway, q, lib, settings);
                    let loaded = match resolve_paths(&selection.paths, lib) {
                        Ok(l) => l,
                        Err(e) => {
                            selection.issue = Some(e.to_string());
                            selection.paths.clear();
                            Vec::new()
                        }
                    };
                    (
                        self.evaluate_question(q, Condition::WithSkills, &loaded),
                        Some(selection),
                    )
                }
            });
        let (records, selections): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
        let summary = AccuracySummary::from_records(questions, &records);
        EvalReport {
            records,
            selections: selections.into_iter().flatten().collect(),
            summary,
            library_version: library.map(|(l, _)| l.library_version),
        }
    }
}

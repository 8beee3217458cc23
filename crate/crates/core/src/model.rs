//! Domain types shared by every pipeline stage, plus the canonical mapping
//! from `(subfield, error type)` to a library-relative path.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::InvalidArgument;

/// Reserved subfield scope for cross-cutting skills.
pub const COMMON_SCOPE: &str = "common";

/// Name of the navigation file at the library root.
pub const NAVIGATION_FILE: &str = "SKILL.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    #[serde(alias = "mc", alias = "multiple-choice")]
    MultipleChoice,
    #[serde(alias = "open", alias = "open-ended")]
    OpenEnded,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::MultipleChoice => "multiple_choice",
            QuestionType::OpenEnded => "open_ended",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub body: String,
}

impl AnswerOption {
    pub fn new(label: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            body: body.into(),
        }
    }
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub group_id: String,
    pub text: String,
    pub context: String,
    pub subfield: String,
    pub difficulty: Difficulty,
    pub qtype: QuestionType,
    pub options: Vec<AnswerOption>,
    pub gold: String,
    pub is_arithmetic: bool,
    pub language_tag: String,
}

impl Question {
    /// Checks the per-question invariants; returns a description of the first
    /// broken one.
    pub fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.gold.trim().is_empty() {
            return Err("empty gold answer".into());
        }
        if self.qtype == QuestionType::MultipleChoice {
            if self.options.is_empty() {
                return Err("multiple-choice question without options".into());
            }
            let mut seen = BTreeSet::new();
            for opt in &self.options {
                if !seen.insert(opt.label.as_str()) {
                    return Err(format!("duplicate option label {:?}", opt.label));
                }
            }
            if !seen.contains(self.gold.as_str()) {
                return Err(format!("gold {:?} is not an option label", self.gold));
            }
        }
        Ok(())
    }
}

/// The closed failure taxonomy used for annotation and library layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    VisualEvidence,
    WrongMethodSelection,
    ConceptConfusion,
    MissedMultiStepComputation,
    UnitCurrencyMistakes,
    MissedConstraints,
    WrongTargets,
    WrongOutputFormat,
    CodeExecutionErrors,
    Other,
}

impl ErrorType {
    pub const ALL: [ErrorType; 10] = [
        ErrorType::VisualEvidence,
        ErrorType::WrongMethodSelection,
        ErrorType::ConceptConfusion,
        ErrorType::MissedMultiStepComputation,
        ErrorType::UnitCurrencyMistakes,
        ErrorType::MissedConstraints,
        ErrorType::WrongTargets,
        ErrorType::WrongOutputFormat,
        ErrorType::CodeExecutionErrors,
        ErrorType::Other,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            ErrorType::VisualEvidence => "visual_evidence",
            ErrorType::WrongMethodSelection => "wrong_method_selection",
            ErrorType::ConceptConfusion => "concept_confusion",
            ErrorType::MissedMultiStepComputation => "missed_multi_step_computation",
            ErrorType::UnitCurrencyMistakes => "unit_currency_mistakes",
            ErrorType::MissedConstraints => "missed_constraints",
            ErrorType::WrongTargets => "wrong_targets",
            ErrorType::WrongOutputFormat => "wrong_output_format",
            ErrorType::CodeExecutionErrors => "code_execution_errors",
            ErrorType::Other => "other",
        }
    }

    /// Human-readable name, e.g. `wrong method selection`.
    pub fn display_name(self) -> String {
        self.slug().replace('_', " ")
    }

    pub fn slugs() -> Vec<String> {
        Self::ALL.iter().map(|e| e.slug().to_string()).collect()
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown error type {0:?}")]
pub struct UnknownErrorType(pub String);

impl FromStr for ErrorType {
    type Err = UnknownErrorType;

    /// Accepts only the ten canonical slugs.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorType::ALL
            .iter()
            .copied()
            .find(|e| e.slug() == s)
            .ok_or_else(|| UnknownErrorType(s.to_string()))
    }
}

/// Folds spaces, hyphens and slashes into underscores and lowercases, so that
/// `wrong method selection` and `Unit/Currency mistakes` reach their slug.
pub fn normalize_enum_token(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.trim().chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if (ch.is_whitespace() || ch == '-' || ch == '/' || ch == '_') && !out.ends_with('_')
        {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Normalizes a subfield name into its directory slug: lowercase, whitespace
/// runs become a single underscore, everything else non-alphanumeric is dropped.
pub fn slugify(raw: &str) -> Result<String, InvalidArgument> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() {
            pending_sep = true;
            continue;
        }
        let lower = ch.to_ascii_lowercase();
        if lower.is_ascii_alphanumeric() || lower == '_' {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(lower);
        }
    }
    if out.is_empty() {
        return Err(InvalidArgument(format!(
            "subfield {raw:?} is empty after normalization"
        )));
    }
    Ok(out)
}

/// Library-relative path of the skill file for `(subfield, error_type)`.
pub fn slug_path(subfield: &str, error_type: ErrorType) -> Result<String, InvalidArgument> {
    if subfield.trim().is_empty() {
        return Err(InvalidArgument("subfield must not be empty".into()));
    }
    Ok(format!("{}/{}.md", slugify(subfield)?, error_type.slug()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureAnnotation {
    pub question_id: String,
    pub subfield: String,
    pub error_type: ErrorType,
    pub root_cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SkillPattern {
    pub name: String,
    pub description: String,
    pub when_to_use: Vec<String>,
    pub procedure: Vec<String>,
    pub example: String,
}

/// All patterns for one `(subfield, error_type)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillFile {
    /// Slug-normalized subfield, or [`COMMON_SCOPE`].
    pub subfield: String,
    pub error_type: ErrorType,
    pub version: u32,
    pub source_question_ids: BTreeSet<String>,
    /// One-line scope summary surfaced in the navigation index.
    pub summary: String,
    /// Teacher-supplied routing keywords (capped at synthesis time).
    pub keywords: Vec<String>,
    pub patterns: Vec<SkillPattern>,
}

impl SkillFile {
    pub fn path(&self) -> Result<String, InvalidArgument> {
        slug_path(&self.subfield, self.error_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NavigationEntry {
    pub path: String,
    pub summary: String,
    pub keywords: Vec<String>,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NavigationIndex {
    pub entries: Vec<NavigationEntry>,
}

impl NavigationIndex {
    /// Paths in navigation order.
    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.path.as_str())
    }

    pub fn position(&self, path: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.path == path)
    }
}

/// The distilled artifact: skill files keyed by relative path.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SkillLibrary {
    pub files: BTreeMap<String, SkillFile>,
    pub navigation: NavigationIndex,
    pub library_version: u32,
}

impl SkillLibrary {
    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Distinct subfield directories, `common` excluded.
    pub fn subfields(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .files
            .values()
            .map(|f| f.subfield.as_str())
            .filter(|s| *s != COMMON_SCOPE)
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Replaces (or inserts) a file and rebuilds the navigation index.
    pub fn upsert(&mut self, path: String, file: SkillFile) {
        self.files.insert(path, file);
        self.navigation = crate::warmup::build_navigation(self.files.values());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    WithSkills,
    WithoutSkills,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingRoute {
    RuleMc,
    JudgeOpen,
}

impl GradingRoute {
    pub fn for_qtype(qtype: QuestionType) -> Self {
        match qtype {
            QuestionType::MultipleChoice => GradingRoute::RuleMc,
            QuestionType::OpenEnded => GradingRoute::JudgeOpen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecErrorClass {
    Timeout,
    SandboxViolation,
    RuntimeError,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecOutcome {
    Value {
        value: String,
    },
    Error {
        error_class: ExecErrorClass,
        message: String,
    },
}

/// Result of running one PoT program. `elapsed` is wall-clock metadata: it is
/// not serialized into reports and does not take part in equality, so records
/// stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionResult {
    #[serde(flatten)]
    pub outcome: ExecOutcome,
    #[serde(skip)]
    pub elapsed: std::time::Duration,
}

impl PartialEq for ExecutionResult {
    fn eq(&self, other: &Self) -> bool {
        self.outcome == other.outcome
    }
}

impl Eq for ExecutionResult {}

impl ExecutionResult {
    pub fn ok(value: impl Into<String>) -> Self {
        Self {
            outcome: ExecOutcome::Value {
                value: value.into(),
            },
            elapsed: std::time::Duration::ZERO,
        }
    }

    pub fn error(error_class: ExecErrorClass, message: impl Into<String>) -> Self {
        Self {
            outcome: ExecOutcome::Error {
                error_class,
                message: message.into(),
            },
            elapsed: std::time::Duration::ZERO,
        }
    }

    pub fn value(&self) -> Option<&str> {
        match &self.outcome {
            ExecOutcome::Value { value } => Some(value),
            ExecOutcome::Error { .. } => None,
        }
    }

    pub fn error_class(&self) -> Option<ExecErrorClass> {
        match &self.outcome {
            ExecOutcome::Value { .. } => None,
            ExecOutcome::Error { error_class, .. } => Some(*error_class),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotTrace {
    pub code: String,
    pub result: ExecutionResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub condition: Condition,
    pub loaded_files: Vec<String>,
    pub raw_completion: String,
    pub extracted_answer: String,
    pub correct: bool,
    pub grading_route: GradingRoute,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pot_trace: Option<PotTrace>,
    /// Non-fatal problems met along the way (gateway errors, judge parse
    /// failures, unmapped options, ...).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    File(String),
    Unattributed,
}

impl Attribution {
    pub fn file(&self) -> Option<&str> {
        match self {
            Attribution::File(p) => Some(p),
            Attribution::Unattributed => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Positive,
    Negative,
    Gap,
}

impl Bucket {
    /// The 2×2 outcome table: correct with skills → positive; wrong with
    /// skills but right without → negative; wrong under both → gap.
    pub fn classify(with_skills: bool, without_skills: bool) -> Self {
        match (with_skills, without_skills) {
            (true, _) => Bucket::Positive,
            (false, true) => Bucket::Negative,
            (false, false) => Bucket::Gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvidencePartition {
    pub q_plus: BTreeSet<String>,
    pub q_minus: BTreeSet<String>,
    pub q_gap: BTreeSet<String>,
    pub attribution: BTreeMap<String, Attribution>,
}

impl EvidencePartition {
    pub fn insert(&mut self, id: String, bucket: Bucket) {
        match bucket {
            Bucket::Positive => self.q_plus.insert(id),
            Bucket::Negative => self.q_minus.insert(id),
            Bucket::Gap => self.q_gap.insert(id),
        };
    }

    pub fn bucket_of(&self, id: &str) -> Option<Bucket> {
        if self.q_plus.contains(id) {
            Some(Bucket::Positive)
        } else if self.q_minus.contains(id) {
            Some(Bucket::Negative)
        } else if self.q_gap.contains(id) {
            Some(Bucket::Gap)
        } else {
            None
        }
    }

    pub fn sizes(&self) -> PartitionSizes {
        PartitionSizes {
            plus: self.q_plus.len(),
            minus: self.q_minus.len(),
            gap: self.q_gap.len(),
        }
    }

    /// Ids attributed to `path` within `bucket`, in id order.
    pub fn attributed(&self, bucket: Bucket, path: &str) -> Vec<String> {
        let set = match bucket {
            Bucket::Positive => &self.q_plus,
            Bucket::Negative => &self.q_minus,
            Bucket::Gap => &self.q_gap,
        };
        set.iter()
            .filter(|id| self.attribution.get(*id).and_then(Attribution::file) == Some(path))
            .cloned()
            .collect()
    }

    /// Checks disjointness, exhaustiveness against `universe`, and attribution
    /// coverage. Returns human-readable violations.
    pub fn violations(&self, universe: &BTreeSet<String>) -> Vec<String> {
        let mut out = Vec::new();
        for id in self.q_plus.intersection(&self.q_minus) {
            out.push(format!("{id} in both Q+ and Q-"));
        }
        for id in self.q_plus.intersection(&self.q_gap) {
            out.push(format!("{id} in both Q+ and Qgap"));
        }
        for id in self.q_minus.intersection(&self.q_gap) {
            out.push(format!("{id} in both Q- and Qgap"));
        }
        let union: BTreeSet<String> = self
            .q_plus
            .iter()
            .chain(&self.q_minus)
            .chain(&self.q_gap)
            .cloned()
            .collect();
        if &union != universe {
            out.push("partition union differs from the evaluated id set".into());
        }
        for id in &union {
            if !self.attribution.contains_key(id) {
                out.push(format!("{id} has no attribution entry"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub plus: usize,
    pub minus: usize,
    pub gap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePhase {
    Coverage,
    Safety,
}

/// Outcome of one verification-gate attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub file_path: String,
    pub phase: GatePhase,
    pub attempt_index: u32,
    /// Coverage: recovered/|targets|. Safety: retained/|preserve|.
    pub score: f64,
    pub threshold: f64,
    /// Safety only: negatives recovered out of the repair targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered_negatives: Option<(usize, usize)>,
    pub committed: bool,
    pub candidate_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Hex sha256 of arbitrary bytes.
pub fn digest_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

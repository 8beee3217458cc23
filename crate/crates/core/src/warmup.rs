//! Builds the initial skill library from the student's baseline failures:
//! collect, annotate, cluster by (subfield, error type), synthesize.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::eval::Evaluator;
use crate::gateway::{CompletionRequest, FieldSpec, Gateway, GatewayError, Role};
use crate::library::parse_teacher_patterns;
use crate::model::{
    slug_path, slugify, Condition, ErrorType, EvalRecord, FailureAnnotation, NavigationEntry,
    NavigationIndex, Question, QuestionType, SkillFile, SkillLibrary, SkillPattern, COMMON_SCOPE,
};

pub use crate::library::{load_library, write_library};

pub const MAX_KEYWORDS: usize = 8;

pub const TEACHER_SYSTEM_PROMPT: &str =
    "You are an expert finance instructor analysing the mistakes of a student model and writing reusable skills that prevent them.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupSettings {
    /// Clusters smaller than this produce no file.
    pub min_cluster_size: usize,
}

impl Default for WarmupSettings {
    fn default() -> Self {
        Self {
            min_cluster_size: 1,
        }
    }
}

/// A failed question together with its baseline record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub question: Question,
    pub record: EvalRecord,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMember {
    pub annotation: FailureAnnotation,
    pub question: Question,
    pub record: EvalRecord,
}

pub type ClusterKey = (String, ErrorType);

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WarmupManifest {
    pub train_questions: usize,
    pub failures: usize,
    pub annotations_kept: usize,
    pub annotations_dropped: usize,
    pub clusters: usize,
    pub clusters_below_min_size: usize,
    pub files: usize,
    pub fallback_files: Vec<String>,
    pub dropped_question_ids: Vec<String>,
}

fn describe(et: ErrorType) -> &'static str {
    match et {
        ErrorType::VisualEvidence => "misread or ignored evidence from a table, chart or figure",
        ErrorType::WrongMethodSelection => {
            "applied a formula or method that does not fit the problem"
        }
        ErrorType::ConceptConfusion => "confused two related financial concepts",
        ErrorType::MissedMultiStepComputation => {
            "dropped or botched a step of a multi-step calculation"
        }
        ErrorType::UnitCurrencyMistakes => "mixed up units, scales, percentages or currencies",
        ErrorType::MissedConstraints => "ignored a condition or constraint stated in the question",
        ErrorType::WrongTargets => "computed a different quantity from the one asked for",
        ErrorType::WrongOutputFormat => "reached the answer but reported it in the wrong form",
        ErrorType::CodeExecutionErrors => {
            "the generated program failed to run or returned no value"
        }
        ErrorType::Other => "anything that fits none of the above",
    }
}

pub(crate) fn question_block(q: &Question) -> String {
    let mut out = format!("Question id: {}\nSubfield: {}\n", q.id, q.subfield);
    if !q.context.trim().is_empty() {
        out.push_str(&format!("Context:\n{}\n", q.context.trim()));
    }
    out.push_str(&format!("Question:\n{}\n", q.text.trim()));
    if q.qtype == QuestionType::MultipleChoice {
        out.push_str("Options:\n");
        for o in &q.options {
            out.push_str(&format!("{}. {}\n", o.label, o.body.trim()));
        }
    }
    out
}

pub(crate) fn student_block(record: &EvalRecord) -> String {
    let mut out = format!(
        "Student reasoning trace:\n{}\nStudent answer: {}\n",
        record.raw_completion.trim(),
        record.extracted_answer.trim()
    );
    if let Some(trace) = &record.pot_trace {
        match trace.result.value() {
            Some(v) => out.push_str(&format!("Program result: {v}\n")),
            None => out.push_str(&format!(
                "Program result: execution failed ({:?})\n",
                trace.result.error_class()
            )),
        }
    }
    out
}

/// Evaluates every training question without skills and keeps the failures.
pub fn collect_failures(evaluator: &Evaluator<'_>, train: &[Question]) -> Vec<Failure> {
    let records = evaluator.parallel_map(train, |q| {
        evaluator.evaluate_question(q, Condition::WithoutSkills, &[])
    });
    train
        .iter()
        .zip(records)
        .filter(|(_, r)| !r.correct)
        .map(|(q, r)| Failure {
            question: q.clone(),
            record: r,
        })
        .collect()
}

pub fn annotation_prompt(q: &Question, record: &EvalRecord) -> String {
    let mut out = String::from("A student model answered the following question incorrectly.\n\n");
    out.push_str(&question_block(q));
    out.push_str(&format!("\nGround-truth answer: {}\n\n", q.gold.trim()));
    out.push_str(&student_block(record));
    out.push_str("\nClassify the failure. Choose error_type from:\n");
    for et in ErrorType::ALL {
        out.push_str(&format!("- {}: {}\n", et.slug(), describe(et)));
    }
    out.push_str(&format!(
        "\nUse the question's subfield, or \"{COMMON_SCOPE}\" when the mistake is not specific to any financial subfield (for example output format or reading visual evidence). root_cause should name the knowledge gap behind the mistake.\n\nReply with a JSON object: {{\"subfield\": \"...\", \"error_type\": \"...\", \"root_cause\": \"...\"}}"
    ));
    out
}

/// Asks the teacher to classify one failure. `None` when the reply cannot be
/// used after the structured retries; gateway errors propagate.
pub fn annotate_failure(
    gateway: &Gateway,
    q: &Question,
    record: &EvalRecord,
) -> Result<Option<FailureAnnotation>, GatewayError> {
    let schema = [
        FieldSpec::text("subfield"),
        FieldSpec::one_of("error_type", ErrorType::slugs()),
        FieldSpec::text("root_cause"),
    ];
    let req = CompletionRequest::new(
        Role::Teacher,
        TEACHER_SYSTEM_PROMPT,
        annotation_prompt(q, record),
    );
    let parsed = match gateway.complete_structured(&req, &schema) {
        Ok(p) => p,
        Err(GatewayError::StructuredParse { attempts, last, .. }) => {
            tracing::warn!(question = %q.id, attempts, reason = %last, "annotation dropped");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let subfield = match slugify(parsed.get("subfield").unwrap_or_default()) {
        Ok(s) => s,
        Err(_) => {
            tracing::warn!(question = %q.id, "annotation dropped: empty subfield");
            return Ok(None);
        }
    };
    let root_cause = parsed
        .get("root_cause")
        .unwrap_or_default()
        .trim()
        .to_string();
    if root_cause.is_empty() {
        tracing::warn!(question = %q.id, "annotation dropped: empty root cause");
        return Ok(None);
    }
    let error_type = parsed
        .get("error_type")
        .unwrap_or_default()
        .parse::<ErrorType>()
        .expect("schema restricts error_type to canonical slugs");
    Ok(Some(FailureAnnotation {
        question_id: q.id.clone(),
        subfield,
        error_type,
        root_cause,
    }))
}

/// Exact grouping by (slugged subfield, error type), in sorted key order.
pub fn cluster(members: Vec<ClusterMember>) -> BTreeMap<ClusterKey, Vec<ClusterMember>> {
    let mut out: BTreeMap<ClusterKey, Vec<ClusterMember>> = BTreeMap::new();
    for m in members {
        let Ok(slug) = slugify(&m.annotation.subfield) else {
            continue;
        };
        out.entry((slug, m.annotation.error_type))
            .or_default()
            .push(m);
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.question.id.cmp(&b.question.id));
    }
    out
}

pub const PATTERN_FORMAT: &str = "Format every pattern exactly like this:

## Pattern: <short name of the failure scenario>

**Addresses:** <the knowledge gap this pattern closes>

**When to use:**
- <trigger condition>

**Procedure:**
1. <reasoning step>

**Example:**
```
<worked example or code template>
```";

pub fn synthesis_prompt(key: &ClusterKey, members: &[ClusterMember]) -> String {
    let (subfield, et) = key;
    let mut out = format!(
        "Skill file: {}\nSubfield: {subfield}\nError type: {} ({})\n\nThe student failed the questions below in this way.\n",
        slug_path(subfield, *et).unwrap_or_default(),
        et.slug(),
        describe(*et)
    );
    for m in members {
        out.push_str("\n----\n");
        out.push_str(&question_block(&m.question));
        out.push_str(&format!(
            "Ground-truth answer: {}\n",
            m.question.gold.trim()
        ));
        out.push_str(&student_block(&m.record));
        out.push_str(&format!("Root cause: {}\n", m.annotation.root_cause.trim()));
    }
    out.push_str(
        "\n----\n\nWrite one pattern per distinct failure scenario in these cases. Merge cases that share a scenario instead of repeating a pattern name. Begin with a line `**Summary:** <one sentence on the scope of this skill>` and a line `**Keywords:** <up to 8 comma-separated subfield keywords>`.\n\n",
    );
    out.push_str(PATTERN_FORMAT);
    out
}

fn pattern_key(name: &str) -> String {
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Merges patterns whose names collide; the first occurrence keeps its
/// position and later ones contribute missing triggers, steps and examples.
pub fn merge_duplicate_patterns(patterns: Vec<SkillPattern>) -> Vec<SkillPattern> {
    let mut out: Vec<SkillPattern> = Vec::new();
    for p in patterns {
        match out
            .iter_mut()
            .find(|q| pattern_key(&q.name) == pattern_key(&p.name))
        {
            None => out.push(p),
            Some(existing) => {
                for w in p.when_to_use {
                    if !existing.when_to_use.contains(&w) {
                        existing.when_to_use.push(w);
                    }
                }
                for s in p.procedure {
                    if !existing.procedure.contains(&s) {
                        existing.procedure.push(s);
                    }
                }
                if existing.description.trim().is_empty() {
                    existing.description = p.description;
                }
                if existing.example.trim().is_empty() {
                    existing.example = p.example;
                }
            }
        }
    }
    out
}

fn usable(patterns: &[SkillPattern]) -> bool {
    !patterns.is_empty()
        && patterns
            .iter()
            .all(|p| !p.name.trim().is_empty() && !p.procedure.is_empty())
}

/// Parsed teacher patterns plus the preamble metadata.
pub struct TeacherPatterns {
    pub summary: String,
    pub keywords: Vec<String>,
    pub patterns: Vec<SkillPattern>,
    /// True when the teacher's text could not be parsed and was kept verbatim.
    pub fallback: bool,
}

fn usable_patterns(text: &str) -> Option<TeacherPatterns> {
    let (preamble, patterns) = parse_teacher_patterns(text).ok()?;
    let patterns = merge_duplicate_patterns(patterns);
    if !usable(&patterns) {
        return None;
    }
    let mut keywords: Vec<String> = Vec::new();
    for k in preamble.keywords {
        let k = k.trim().to_string();
        if !k.is_empty() && !keywords.contains(&k) {
            keywords.push(k);
        }
    }
    keywords.truncate(MAX_KEYWORDS);
    Some(TeacherPatterns {
        summary: preamble.summary,
        keywords,
        patterns,
        fallback: false,
    })
}

/// Requests pattern Markdown from the teacher, re-prompting once on a
/// response with no usable pattern sections. `Err(text)` carries the last
/// unusable reply.
pub fn request_pattern_sections(
    gateway: &Gateway,
    user_prompt: &str,
) -> Result<Result<TeacherPatterns, String>, GatewayError> {
    let mut req = CompletionRequest::new(Role::Teacher, TEACHER_SYSTEM_PROMPT, user_prompt);
    let mut last = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            req.user_prompt = format!(
                "{user_prompt}\n\nYour previous reply could not be parsed into pattern sections. Reply again using only the format above, starting each pattern with `## Pattern:`."
            );
        }
        last = gateway.complete(&req)?;
        if let Some(t) = usable_patterns(&last) {
            return Ok(Ok(t));
        }
    }
    Ok(Err(last))
}

/// Like [`request_pattern_sections`], but an unusable reply becomes a single
/// verbatim fallback pattern.
pub fn request_patterns(
    gateway: &Gateway,
    user_prompt: String,
    fallback_name: &str,
) -> Result<TeacherPatterns, GatewayError> {
    match request_pattern_sections(gateway, &user_prompt)? {
        Ok(t) => Ok(t),
        Err(last) => {
            tracing::warn!(
                pattern = fallback_name,
                "teacher output unparseable, keeping it verbatim"
            );
            Ok(TeacherPatterns {
                summary: String::new(),
                keywords: Vec::new(),
                patterns: vec![fallback_pattern(fallback_name, &last)],
                fallback: true,
            })
        }
    }
}

/// A single pattern that carries unparsed teacher text as its example.
pub fn fallback_pattern(name: &str, text: &str) -> SkillPattern {
    SkillPattern {
        name: name.to_string(),
        description: "Unstructured teacher guidance kept verbatim.".into(),
        when_to_use: vec![],
        procedure: vec![
            "Read the teacher guidance in the example and apply it to the question.".into(),
        ],
        example: text.trim().to_string(),
    }
}

/// Synthesizes the skill file for one cluster. Returns the file and whether
/// the verbatim fallback was used.
pub fn synthesize_skill_file(
    gateway: &Gateway,
    key: &ClusterKey,
    members: &[ClusterMember],
) -> Result<(SkillFile, bool), GatewayError> {
    assert!(
        !members.is_empty(),
        "cannot synthesize from an empty cluster"
    );
    let (subfield, et) = key;
    let fallback_name = format!("{} notes", et.display_name());
    let t = request_patterns(gateway, synthesis_prompt(key, members), &fallback_name)?;
    let file = SkillFile {
        subfield: subfield.clone(),
        error_type: *et,
        version: 1,
        source_question_ids: members.iter().map(|m| m.question.id.clone()).collect(),
        summary: t.summary,
        keywords: t.keywords,
        patterns: t.patterns,
    };
    Ok((file, t.fallback))
}

fn default_summary(file: &SkillFile) -> String {
    format!(
        "Patterns for {} errors in {}.",
        file.error_type.display_name(),
        file.subfield.replace('_', " ")
    )
}

/// One entry per file, sorted by path. Keywords always lead with the
/// subfield slug.
pub fn build_navigation<'a>(files: impl IntoIterator<Item = &'a SkillFile>) -> NavigationIndex {
    let mut entries: Vec<NavigationEntry> = files
        .into_iter()
        .filter_map(|f| {
            let path = f.path().ok()?;
            let slug = slugify(&f.subfield).ok()?;
            let mut keywords = vec![slug];
            for k in &f.keywords {
                let k = k.trim();
                if !k.is_empty() && !keywords.iter().any(|x| x == k) {
                    keywords.push(k.to_string());
                }
            }
            let summary = if f.summary.trim().is_empty() {
                default_summary(f)
            } else {
                f.summary.trim().to_string()
            };
            Some(NavigationEntry {
                path,
                summary,
                keywords,
                patterns: f.patterns.iter().map(|p| p.name.clone()).collect(),
            })
        })
        .collect();
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    NavigationIndex { entries }
}

/// Runs the whole warm-up phase and returns K₀ (library version 1).
pub fn run_warmup(
    evaluator: &Evaluator<'_>,
    train: &[Question],
    settings: &WarmupSettings,
) -> Result<(SkillLibrary, WarmupManifest), GatewayError> {
    let gateway = evaluator.gateway();
    let failures = collect_failures(evaluator, train);
    tracing::info!(
        train = train.len(),
        failures = failures.len(),
        "baseline failures collected"
    );

    let annotated = evaluator.parallel_map(&failures, |f| {
        annotate_failure(gateway, &f.question, &f.record)
    });
    let mut manifest = WarmupManifest {
        train_questions: train.len(),
        failures: failures.len(),
        ..WarmupManifest::default()
    };
    let mut members = Vec::new();
    for (f, a) in failures.into_iter().zip(annotated) {
        match a? {
            Some(annotation) => members.push(ClusterMember {
                annotation,
                question: f.question,
                record: f.record,
            }),
            None => manifest.dropped_question_ids.push(f.question.id),
        }
    }
    manifest.annotations_kept = members.len();
    manifest.annotations_dropped = manifest.dropped_question_ids.len();

    let clusters = cluster(members);
    manifest.clusters = clusters.len();
    let kept: Vec<(ClusterKey, Vec<ClusterMember>)> = clusters
        .into_iter()
        .filter(|(_, m)| m.len() >= settings.min_cluster_size.max(1))
        .collect();
    manifest.clusters_below_min_size = manifest.clusters - kept.len();

    let synthesized =
        evaluator.parallel_map(&kept, |(key, m)| synthesize_skill_file(gateway, key, m));
    let mut lib = SkillLibrary {
        library_version: 1,
        ..SkillLibrary::default()
    };
    for ((key, _), result) in kept.iter().zip(synthesized) {
        let (file, fallback) = result?;
        let path = slug_path(&key.0, key.1).expect("cluster keys are valid slugs");
        if fallback {
            manifest.fallback_files.push(path.clone());
        }
        lib.files.insert(path, file);
    }
    lib.navigation = build_navigation(lib.files.values());
    manifest.files = lib.files.len();
    if lib.is_empty() {
        tracing::warn!(
            failures = manifest.failures,
            "warm-up produced no skill files; the library is empty"
        );
    }
    Ok((lib, manifest))
}

/// Every question id referenced by any file.
pub fn source_ids(lib: &SkillLibrary) -> BTreeSet<String> {
    lib.files
        .values()
        .flat_map(|f| f.source_question_ids.iter().cloned())
        .collect()
}

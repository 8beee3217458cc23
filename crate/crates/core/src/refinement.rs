//! Dual-phase refinement: evidence collection and attribution, a coverage
//! phase of gated expansions, post-coverage verification, and a safety phase
//! of gated repairs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{InvalidArgument, LibraryError};
use crate::eval::prompt::render_skill_section;
use crate::eval::Evaluator;
use crate::gateway::{CompletionRequest, Gateway, Role};
use crate::library::{render_skill_file, write_library};
use crate::model::{
    digest_hex, slug_path, Attribution, Bucket, EvalRecord, EvidencePartition, GateDecision,
    GatePhase, PartitionSizes, Question, SkillFile, SkillLibrary,
};
use crate::selector::{path_re, SelectorSettings};
use crate::warmup::{
    annotate_failure, question_block, request_pattern_sections, student_block, synthesis_prompt,
    ClusterMember, PATTERN_FORMAT, TEACHER_SYSTEM_PROMPT,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Number of refinement iterations.
    pub iterations: u32,
    pub tau_cov: f64,
    pub tau_safe_retain: f64,
    /// Attempts per gate before falling back to the previous file version.
    pub n_max: u32,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            tau_cov: 0.5,
            tau_safe_retain: 0.9,
            n_max: 3,
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), InvalidArgument> {
        let frac = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(InvalidArgument(format!(
                    "{name} must lie in (0, 1], got {v}"
                )))
            }
        };
        frac("tau_cov", self.tau_cov)?;
        frac("tau_safe_retain", self.tau_safe_retain)?;
        if self.n_max == 0 {
            return Err(InvalidArgument("n_max must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(InvalidArgument("iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn threshold(&self, phase: GatePhase) -> f64 {
        match phase {
            GatePhase::Coverage => self.tau_cov,
            GatePhase::Safety => self.tau_safe_retain,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RefinementError {
    #[error(transparent)]
    Config(#[from] InvalidArgument),
    #[error(transparent)]
    Library(#[from] LibraryError),
}

/// Both evaluation conditions for every training question plus the
/// resulting partition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Evidence {
    pub partition: EvidencePartition,
    pub with_skills: BTreeMap<String, EvalRecord>,
    pub without_skills: BTreeMap<String, EvalRecord>,
}

/// Evaluates `train` with and without the library and classifies each
/// question. Attribution is left empty.
pub fn collect_evidence(
    evaluator: &Evaluator<'_>,
    train: &[Question],
    lib: &SkillLibrary,
    selector: &SelectorSettings,
) -> Evidence {
    let with = evaluator.evaluate_set(train, Some((lib, selector)));
    let without = evaluator.evaluate_set(train, None);
    let mut evidence = Evidence::default();
    for (w, wo) in with.records.into_iter().zip(without.records) {
        evidence.partition.insert(
            w.question_id.clone(),
            Bucket::classify(w.correct, wo.correct),
        );
        evidence.with_skills.insert(w.question_id.clone(), w);
        evidence.without_skills.insert(wo.question_id.clone(), wo);
    }
    evidence
}

fn outcome_text(bucket: Bucket) -> &'static str {
    match bucket {
        Bucket::Positive => "The student answered correctly with the skill files loaded.",
        Bucket::Negative => "The student answered incorrectly with the skill files loaded but correctly without them.",
        Bucket::Gap => "The student answered incorrectly both with and without the skill files.",
    }
}

pub fn attribution_prompt(
    q: &Question,
    record: &EvalRecord,
    bucket: Bucket,
    lib: &SkillLibrary,
) -> String {
    let mut out = format!("Outcome: {}\n\n", outcome_text(bucket));
    out.push_str(&question_block(q));
    out.push_str(&format!("Ground-truth answer: {}\n", q.gold.trim()));
    out.push_str(&student_block(record));
    out.push_str("\nLoaded skill files:\n\n");
    for path in &record.loaded_files {
        if let Some(file) = lib.files.get(path) {
            out.push_str(&render_skill_section(path, file));
            out.push('\n');
        }
    }
    out.push_str(
        "\nWhich single loaded file is most responsible for this outcome? Choose one of:\n",
    );
    for path in &record.loaded_files {
        out.push_str(&format!("- {path}\n"));
    }
    out.push_str("\nReply with one line of the form `FILE: <path>`.");
    out
}

/// Reads the attributed path from a teacher reply, accepting only loaded
/// files.
pub fn parse_attribution(reply: &str, loaded: &[String]) -> Attribution {
    for line in reply.lines().rev() {
        let upper = line.to_ascii_uppercase();
        if let Some(pos) = upper.find("FILE:") {
            let named = line[pos + 5..]
                .trim()
                .trim_matches(['`', '*', '"', '\'', '.', ' ']);
            if loaded.iter().any(|p| p == named) {
                return Attribution::File(named.to_string());
            }
        }
    }
    let named: BTreeSet<&str> = path_re()
        .find_iter(reply)
        .map(|m| m.as_str())
        .filter(|p| loaded.iter().any(|l| l == p))
        .collect();
    if named.len() == 1 {
        return Attribution::File(named.into_iter().next().expect("one element").to_string());
    }
    Attribution::Unattributed
}

/// Asks the teacher for the loaded file most responsible for an outcome.
/// Skill-free runs are unattributed without a call.
pub fn attribute(
    gateway: &Gateway,
    q: &Question,
    record: &EvalRecord,
    bucket: Bucket,
    lib: &SkillLibrary,
) -> Attribution {
    if record.loaded_files.is_empty() {
        return Attribution::Unattributed;
    }
    let req = CompletionRequest::new(
        Role::Teacher,
        TEACHER_SYSTEM_PROMPT,
        attribution_prompt(q, record, bucket, lib),
    );
    match gateway.complete(&req) {
        Ok(reply) => {
            let a = parse_attribution(&reply, &record.loaded_files);
            if a == Attribution::Unattributed {
                tracing::info!(question = %q.id, "attribution names no loaded file");
            }
            a
        }
        Err(e) => {
            tracing::warn!(question = %q.id, error = %e, "attribution call failed");
            Attribution::Unattributed
        }
    }
}

fn attribute_ids(
    evaluator: &Evaluator<'_>,
    ids: &[String],
    questions: &BTreeMap<&str, &Question>,
    records: &BTreeMap<String, EvalRecord>,
    partition: &EvidencePartition,
    lib: &SkillLibrary,
) -> Vec<(String, Attribution)> {
    evaluator.parallel_map(ids, |id| {
        let q = questions[id.as_str()];
        let bucket = partition.bucket_of(id).expect("id is partitioned");
        (
            id.clone(),
            attribute(evaluator.gateway(), q, &records[id], bucket, lib),
        )
    })
}

/// Scores a verification produced for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateScores {
    pub score: f64,
    pub recovered_negatives: Option<(usize, usize)>,
}

/// Coverage commits iff score ≥ τ_cov. Safety commits iff retain ≥
/// τ_safe_retain and at least one negative was recovered.
pub fn gate_accepts(phase: GatePhase, scores: &GateScores, config: &RefinementConfig) -> bool {
    let meets = scores.score >= config.threshold(phase);
    match phase {
        GatePhase::Coverage => meets,
        GatePhase::Safety => meets && scores.recovered_negatives.is_some_and(|(r, _)| r >= 1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Candidate(SkillFile),
    /// No usable candidate; the attempt counts as rejected.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub decisions: Vec<GateDecision>,
    /// The accepted candidate, if any attempt committed.
    pub committed: Option<SkillFile>,
}

/// Up to `n_max` propose → verify → gate rounds for one file. `propose`
/// receives the attempt index and the previous rejected decision.
pub fn run_gate_loop(
    path: &str,
    phase: GatePhase,
    config: &RefinementConfig,
    mut propose: impl FnMut(u32, Option<&GateDecision>) -> Proposal,
    mut verify: impl FnMut(&SkillFile) -> GateScores,
) -> GateOutcome {
    let mut decisions: Vec<GateDecision> = Vec::new();
    for attempt in 1..=config.n_max {
        let decision = match propose(attempt, decisions.last()) {
            Proposal::Failed(reason) => GateDecision {
                file_path: path.to_string(),
                phase,
                attempt_index: attempt,
                score: 0.0,
                threshold: config.threshold(phase),
                recovered_negatives: None,
                committed: false,
                candidate_digest: digest_hex(""),
                note: Some(reason),
            },
            Proposal::Candidate(candidate) => {
                let scores = verify(&candidate);
                let committed = gate_accepts(phase, &scores, config);
                let decision = GateDecision {
                    file_path: path.to_string(),
                    phase,
                    attempt_index: attempt,
                    score: scores.score,
                    threshold: config.threshold(phase),
                    recovered_negatives: scores.recovered_negatives,
                    committed,
                    candidate_digest: digest_hex(render_skill_file(&candidate)),
                    note: None,
                };
                if committed {
                    decisions.push(decision);
                    return GateOutcome {
                        decisions,
                        committed: Some(candidate),
                    };
                }
                decision
            }
        };
        decisions.push(decision);
    }
    tracing::info!(
        path,
        ?phase,
        attempts = config.n_max,
        "gate exhausted, keeping previous version"
    );
    GateOutcome {
        decisions,
        committed: None,
    }
}

fn feedback_suffix(previous: Option<&GateDecision>) -> String {
    match previous {
        None => String::new(),
        Some(d) => {
            let mut s = format!(
                "\n\nPrevious attempt {} was rejected: it scored {:.2} against a threshold of {:.2}",
                d.attempt_index, d.score, d.threshold
            );
            if let Some((r, n)) = d.recovered_negatives {
                s.push_str(&format!(" and recovered {r} of {n} regressions"));
            }
            if let Some(note) = &d.note {
                s.push_str(&format!(" ({note})"));
            }
            s.push_str(". Propose a different revision.");
            s
        }
    }
}

fn cases_block(title: &str, cases: &[(&Question, &EvalRecord)]) -> String {
    let mut out = format!("{title}\n");
    for (q, r) in cases {
        out.push_str("\n----\n");
        out.push_str(&question_block(q));
        out.push_str(&format!("Ground-truth answer: {}\n", q.gold.trim()));
        out.push_str(&student_block(r));
    }
    out.push_str("\n----\n");
    out
}

const REVISION_FORMAT_NOTE: &str = "Return the complete revised file body: a `**Summary:**` line, a `**Keywords:**` line, then every pattern including unchanged ones.";

pub fn expansion_prompt(
    path: &str,
    current: &SkillFile,
    gap: &[(&Question, &EvalRecord)],
) -> String {
    let mut out = format!(
        "Skill file: {path}\nTask: expand coverage\n\nCurrent file:\n\n{}\n",
        render_skill_file(current)
    );
    out.push_str(&cases_block(
        "The student still answers these questions incorrectly, with or without this file loaded.",
        gap,
    ));
    out.push_str("\nDiagnose why the file does not cover them: a missing procedure for an edge case, trigger conditions too narrow to fire on these questions, or a missing worked example. Then refine an existing pattern or add a new one. ");
    out.push_str(REVISION_FORMAT_NOTE);
    out.push_str("\n\n");
    out.push_str(PATTERN_FORMAT);
    out
}

pub fn repair_prompt(
    path: &str,
    current: &SkillFile,
    preserve: &[(&Question, &EvalRecord)],
    negatives: &[(&Question, &EvalRecord)],
) -> String {
    let mut out = format!(
        "Skill file: {path}\nTask: repair regressions\n\nCurrent file:\n\n{}\n",
        render_skill_file(current)
    );
    if !preserve.is_empty() {
        out.push_str(&cases_block(
            "With this file loaded the student answers these correctly. Keep the reasoning that produces these answers.",
            preserve,
        ));
    }
    out.push_str(&cases_block(
        "With this file loaded the student answers these incorrectly, although it answers them correctly without skills.",
        negatives,
    ));
    out.push_str("\nRemove or narrow the guidance that misleads the student on the regressions while keeping what works on the correct cases. ");
    out.push_str(REVISION_FORMAT_NOTE);
    out.push_str("\n\n");
    out.push_str(PATTERN_FORMAT);
    out
}

fn revise(gateway: &Gateway, current: &SkillFile, prompt: &str, new_sources: &[&str]) -> Proposal {
    match request_pattern_sections(gateway, prompt) {
        Err(e) => Proposal::Failed(format!("teacher call failed: {e}")),
        Ok(Err(_)) => Proposal::Failed("teacher revision unparseable".into()),
        Ok(Ok(t)) => {
            let mut file = current.clone();
            file.version = current.version + 1;
            file.source_question_ids
                .extend(new_sources.iter().map(|s| s.to_string()));
            if !t.summary.trim().is_empty() {
                file.summary = t.summary;
            }
            if !t.keywords.is_empty() {
                file.keywords = t.keywords;
            }
            file.patterns = t.patterns;
            Proposal::Candidate(file)
        }
    }
}

/// Teacher proposal that widens `current` to cover the gap cases.
pub fn propose_expansion(
    gateway: &Gateway,
    path: &str,
    current: &SkillFile,
    gap: &[(&Question, &EvalRecord)],
    previous: Option<&GateDecision>,
) -> Proposal {
    let prompt = expansion_prompt(path, current, gap) + &feedback_suffix(previous);
    let ids: Vec<&str> = gap.iter().map(|(q, _)| q.id.as_str()).collect();
    revise(gateway, current, &prompt, &ids)
}

/// Teacher proposal that removes the regressions while keeping positives.
pub fn propose_repair(
    gateway: &Gateway,
    path: &str,
    current: &SkillFile,
    preserve: &[(&Question, &EvalRecord)],
    negatives: &[(&Question, &EvalRecord)],
    previous: Option<&GateDecision>,
) -> Proposal {
    let prompt = repair_prompt(path, current, preserve, negatives) + &feedback_suffix(previous);
    let ids: Vec<&str> = negatives.iter().map(|(q, _)| q.id.as_str()).collect();
    revise(gateway, current, &prompt, &ids)
}

/// A new file for gap cases routed to a path the library lacks.
pub fn propose_new_file(
    gateway: &Gateway,
    path: &str,
    members: &[ClusterMember],
    previous: Option<&GateDecision>,
) -> Proposal {
    let first = &members[0].annotation;
    let key = (first.subfield.clone(), first.error_type);
    debug_assert_eq!(slug_path(&key.0, key.1).ok().as_deref(), Some(path));
    let prompt = synthesis_prompt(&key, members) + &feedback_suffix(previous);
    match request_pattern_sections(gateway, &prompt) {
        Err(e) => Proposal::Failed(format!("teacher call failed: {e}")),
        Ok(Err(_)) => Proposal::Failed("teacher synthesis unparseable".into()),
        Ok(Ok(t)) => Proposal::Candidate(SkillFile {
            subfield: key.0,
            error_type: key.1,
            version: 1,
            source_question_ids: members.iter().map(|m| m.question.id.clone()).collect(),
            summary: t.summary,
            keywords: t.keywords,
            patterns: t.patterns,
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub recovered: BTreeSet<String>,
    pub targets: usize,
    pub retained: Option<(usize, usize)>,
}

impl Verification {
    /// Recovered fraction of the targets.
    pub fn recovery(&self) -> f64 {
        if self.targets == 0 {
            0.0
        } else {
            self.recovered.len() as f64 / self.targets as f64
        }
    }

    /// Retained fraction of the preserve set; 1.0 when it is empty.
    pub fn retain(&self) -> Option<f64> {
        self.retained
            .map(|(kept, n)| if n == 0 { 1.0 } else { kept as f64 / n as f64 })
    }
}

/// Re-solves `targets` (and `preserve`, if given) with `candidate`
/// substituted at `path`. Selection runs against the overlay library.
pub fn verify_candidate(
    evaluator: &Evaluator<'_>,
    lib: &SkillLibrary,
    selector: &SelectorSettings,
    path: &str,
    candidate: &SkillFile,
    targets: &[&Question],
    preserve: Option<&[&Question]>,
) -> Verification {
    let mut overlay = lib.clone();
    overlay.upsert(path.to_string(), candidate.clone());
    let mut all: Vec<Question> = targets.iter().map(|q| (*q).clone()).collect();
    if let Some(p) = preserve {
        all.extend(p.iter().map(|q| (*q).clone()));
    }
    let report = evaluator.evaluate_set(&all, Some((&overlay, selector)));
    let correct = report.correct_ids();
    let recovered = targets
        .iter()
        .filter(|q| correct.contains(&q.id))
        .map(|q| q.id.clone())
        .collect();
    let retained = preserve.map(|p| {
        (
            p.iter().filter(|q| correct.contains(&q.id)).count(),
            p.len(),
        )
    });
    Verification {
        recovered,
        targets: targets.len(),
        retained,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PostCoverage {
    pub partition: EvidencePartition,
    /// Gap cases now solved.
    pub promoted: Vec<String>,
    /// Former positives that now fail.
    pub regressed: Vec<String>,
    /// False when no coverage update was committed and nothing was re-run.
    pub reevaluated: bool,
}

/// Re-evaluates Q⁺ ∪ Q^gap against the updated library. Solved gap cases
/// join Q̃⁺; regressed positives join Q̃⁻. Changed items are re-attributed.
pub fn post_coverage_verify(
    evaluator: &Evaluator<'_>,
    lib: &SkillLibrary,
    selector: &SelectorSettings,
    questions: &BTreeMap<&str, &Question>,
    evidence: &EvidencePartition,
) -> (PostCoverage, BTreeMap<String, EvalRecord>) {
    let ids: Vec<&String> = evidence.q_plus.iter().chain(&evidence.q_gap).collect();
    let qs: Vec<Question> = ids
        .iter()
        .map(|id| questions[id.as_str()].clone())
        .collect();
    let report = evaluator.evaluate_set(&qs, Some((lib, selector)));
    let records: BTreeMap<String, EvalRecord> = report
        .records
        .into_iter()
        .map(|r| (r.question_id.clone(), r))
        .collect();
    let mut post = PostCoverage {
        partition: evidence.clone(),
        reevaluated: true,
        ..PostCoverage::default()
    };
    for id in &evidence.q_gap {
        if records[id].correct {
            post.promoted.push(id.clone());
        }
    }
    for id in &evidence.q_plus {
        if !records[id].correct {
            post.regressed.push(id.clone());
        }
    }
    for id in &post.promoted {
        post.partition.q_gap.remove(id);
        post.partition.q_plus.insert(id.clone());
    }
    for id in &post.regressed {
        post.partition.q_plus.remove(id);
        post.partition.q_minus.insert(id.clone());
    }
    let changed: Vec<String> = post
        .promoted
        .iter()
        .chain(&post.regressed)
        .cloned()
        .collect();
    let attributions = attribute_ids(
        evaluator,
        &changed,
        questions,
        &records,
        &post.partition,
        lib,
    );
    post.partition.attribution.extend(attributions);
    (post, records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub library_version_before: u32,
    pub library_version_after: u32,
    pub evidence: EvidencePartition,
    /// Unattributed gap cases routed through a fresh annotation to a file
    /// path. This routing goes beyond attributed-only coverage and is
    /// reported separately.
    pub routed_gap_cases: BTreeMap<String, String>,
    pub unrouted_gap_cases: Vec<String>,
    pub coverage: Vec<GateDecision>,
    pub post_coverage: PostCoverage,
    pub safety: Vec<GateDecision>,
    pub unattributed_negatives: Vec<String>,
}

impl IterationReport {
    pub fn sizes_before(&self) -> PartitionSizes {
        self.evidence.sizes()
    }

    pub fn sizes_post_coverage(&self) -> PartitionSizes {
        self.post_coverage.partition.sizes()
    }

    pub fn commits(&self) -> usize {
        self.coverage
            .iter()
            .chain(&self.safety)
            .filter(|d| d.committed)
            .count()
    }
}

fn commit(lib: &mut SkillLibrary, path: &str, file: SkillFile) {
    lib.upsert(path.to_string(), file);
    lib.library_version += 1;
}

/// One pass of evidence → coverage → post-coverage verify → safety.
pub fn run_iteration(
    evaluator: &Evaluator<'_>,
    lib: &SkillLibrary,
    train: &[Question],
    config: &RefinementConfig,
    selector: &SelectorSettings,
    iteration: u32,
) -> (SkillLibrary, IterationReport) {
    let gateway = evaluator.gateway();
    let questions: BTreeMap<&str, &Question> = train.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut lib_t = lib.clone();
    let version_before = lib_t.library_version;

    // evidence and attribution
    let mut evidence = collect_evidence(evaluator, train, &lib_t, selector);
    let ids: Vec<String> = train.iter().map(|q| q.id.clone()).collect();
    let attributions = attribute_ids(
        evaluator,
        &ids,
        &questions,
        &evidence.with_skills,
        &evidence.partition,
        &lib_t,
    );
    evidence.partition.attribution.extend(attributions);
    let partition = evidence.partition.clone();
    tracing::info!(iteration, sizes = ?partition.sizes(), "evidence collected");

    // coverage targets, routing unattributed gap cases by fresh annotation
    let mut gap_by_file: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut unattributed_gap: Vec<String> = Vec::new();
    for id in &partition.q_gap {
        match partition.attribution.get(id).and_then(Attribution::file) {
            Some(p) => gap_by_file
                .entry(p.to_string())
                .or_default()
                .push(id.clone()),
            None => unattributed_gap.push(id.clone()),
        }
    }
    let annotations = evaluator.parallel_map(&unattributed_gap, |id| {
        annotate_failure(gateway, questions[id.as_str()], &evidence.with_skills[id])
    });
    let mut routed = BTreeMap::new();
    let mut unrouted = Vec::new();
    let mut new_files: BTreeMap<String, Vec<ClusterMember>> = BTreeMap::new();
    for (id, a) in unattributed_gap.iter().zip(annotations) {
        let annotation = match a {
            Ok(Some(a)) => a,
            Ok(None) => {
                unrouted.push(id.clone());
                continue;
            }
            Err(e) => {
                tracing::warn!(question = %id, error = %e, "routing annotation failed");
                unrouted.push(id.clone());
                continue;
            }
        };
        let Ok(path) = slug_path(&annotation.subfield, annotation.error_type) else {
            unrouted.push(id.clone());
            continue;
        };
        routed.insert(id.clone(), path.clone());
        if lib_t.files.contains_key(&path) {
            gap_by_file.entry(path).or_default().push(id.clone());
        } else {
            new_files.entry(path).or_default().push(ClusterMember {
                annotation,
                question: questions[id.as_str()].clone(),
                record: evidence.with_skills[id].clone(),
            });
        }
    }

    // coverage phase
    let mut coverage = Vec::new();
    let mut coverage_paths: BTreeSet<String> = gap_by_file.keys().cloned().collect();
    coverage_paths.extend(new_files.keys().cloned());
    for path in &coverage_paths {
        let mut target_ids: Vec<String> = gap_by_file.get(path).cloned().unwrap_or_default();
        if let Some(members) = new_files.get(path) {
            target_ids.extend(members.iter().map(|m| m.question.id.clone()));
        }
        target_ids.sort();
        target_ids.dedup();
        let targets: Vec<&Question> = target_ids.iter().map(|id| questions[id.as_str()]).collect();
        let cases: Vec<(&Question, &EvalRecord)> = targets
            .iter()
            .map(|q| (*q, &evidence.with_skills[&q.id]))
            .collect();
        let current = lib_t.files.get(path).cloned();
        let snapshot = lib_t.clone();
        let outcome = run_gate_loop(
            path,
            GatePhase::Coverage,
            config,
            |_, prev| match &current {
                Some(file) => propose_expansion(gateway, path, file, &cases, prev),
                None => propose_new_file(gateway, path, &new_files[path], prev),
            },
            |candidate| GateScores {
                score: verify_candidate(
                    evaluator, &snapshot, selector, path, candidate, &targets, None,
                )
                .recovery(),
                recovered_negatives: None,
            },
        );
        coverage.extend(outcome.decisions);
        if let Some(file) = outcome.committed {
            commit(&mut lib_t, path, file);
        }
    }

    // post-coverage verification
    let coverage_committed = coverage.iter().any(|d| d.committed);
    let (post, post_records) = if coverage_committed {
        post_coverage_verify(evaluator, &lib_t, selector, &questions, &partition)
    } else {
        (
            PostCoverage {
                partition: partition.clone(),
                ..PostCoverage::default()
            },
            BTreeMap::new(),
        )
    };
    let record_for = |id: &str| post_records.get(id).unwrap_or(&evidence.with_skills[id]);

    // safety phase
    let mut neg_by_file: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut unattributed_negatives = Vec::new();
    for id in &post.partition.q_minus {
        match post
            .partition
            .attribution
            .get(id)
            .and_then(Attribution::file)
        {
            Some(p) if lib_t.files.contains_key(p) => neg_by_file
                .entry(p.to_string())
                .or_default()
                .push(id.clone()),
            _ => unattributed_negatives.push(id.clone()),
        }
    }
    let mut safety = Vec::new();
    for (path, neg_ids) in &neg_by_file {
        let preserve_ids = post.partition.attributed(Bucket::Positive, path);
        let negatives: Vec<&Question> = neg_ids.iter().map(|id| questions[id.as_str()]).collect();
        let preserve: Vec<&Question> = preserve_ids
            .iter()
            .map(|id| questions[id.as_str()])
            .collect();
        let neg_cases: Vec<(&Question, &EvalRecord)> =
            negatives.iter().map(|q| (*q, record_for(&q.id))).collect();
        let keep_cases: Vec<(&Question, &EvalRecord)> =
            preserve.iter().map(|q| (*q, record_for(&q.id))).collect();
        let current = lib_t.files[path].clone();
        let snapshot = lib_t.clone();
        let outcome = run_gate_loop(
            path,
            GatePhase::Safety,
            config,
            |_, prev| propose_repair(gateway, path, &current, &keep_cases, &neg_cases, prev),
            |candidate| {
                let v = verify_candidate(
                    evaluator,
                    &snapshot,
                    selector,
                    path,
                    candidate,
                    &negatives,
                    Some(&preserve),
                );
                GateScores {
                    score: v.retain().unwrap_or(1.0),
                    recovered_negatives: Some((v.recovered.len(), v.targets)),
                }
            },
        );
        safety.extend(outcome.decisions);
        if let Some(file) = outcome.committed {
            commit(&mut lib_t, path, file);
        }
    }

    let report = IterationReport {
        iteration,
        library_version_before: version_before,
        library_version_after: lib_t.library_version,
        evidence: partition,
        routed_gap_cases: routed,
        unrouted_gap_cases: unrouted,
        coverage,
        post_coverage: post,
        safety,
        unattributed_negatives,
    };
    debug_assert_eq!(
        report.library_version_after,
        report.library_version_before + report.commits() as u32
    );
    (lib_t, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementRun {
    pub library: SkillLibrary,
    pub reports: Vec<IterationReport>,
}

/// Runs `config.iterations` iterations, writing `k{t}/` snapshots under
/// `snapshot_root` after each one when given.
pub fn run_refinement(
    evaluator: &Evaluator<'_>,
    initial: &SkillLibrary,
    train: &[Question],
    config: &RefinementConfig,
    selector: &SelectorSettings,
    snapshot_root: Option<&Path>,
) -> Result<RefinementRun, RefinementError> {
    config.validate()?;
    let mut lib = initial.clone();
    let mut reports = Vec::new();
    for t in 1..=config.iterations {
        let (next, report) = run_iteration(evaluator, &lib, train, config, selector, t);
        tracing::info!(
            iteration = t,
            commits = report.commits(),
            version = next.library_version,
            "iteration finished"
        );
        if let Some(root) = snapshot_root {
            write_library(&next, &root.join(format!("k{t}")))?;
        }
        lib = next;
        reports.push(report);
    }
    Ok(RefinementRun {
        library: lib,
        reports,
    })
}

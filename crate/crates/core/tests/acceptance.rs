//! Acceptance suite: prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Set `ASDA_BLESS=1` to regenerate the warm-up golden
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use asda::corpus::{
    filter_language, parse_corpus, partition_arithmetic, propagate_context, stratified_split,
    to_jsonl, SplitSpec,
};
use asda::eval::grading::{grade_mc, map_to_option};
use asda::eval::pot::{PotExecutor, StubSandbox};
use asda::eval::{EvalSettings, Evaluator};
use asda::gateway::{Gateway, MockBackend, MockRule, MockScript, Role};
use asda::library::{load_library, render_skill_file, validate_library, write_library};
use asda::model::{
    digest_hex, AnswerOption, Attribution, Bucket, Difficulty, ErrorType, EvidencePartition,
    GateDecision, GatePhase, Question, QuestionType, SkillFile, SkillLibrary, SkillPattern,
};
use asda::refinement::{
    collect_evidence, run_gate_loop, run_iteration, GateScores, IterationReport, PostCoverage,
    Proposal, RefinementConfig,
};
use asda::selector::SelectorSettings;
use asda::warmup::{build_navigation, run_warmup, WarmupSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/warmup24")
}

fn mock_gateway(script: MockScript) -> Gateway {
    Gateway::uniform(Arc::new(MockBackend::new(script)))
}

fn settings(workers: usize) -> EvalSettings {
    EvalSettings {
        workers,
        ..EvalSettings::default()
    }
}

fn question(id: &str, subfield: &str, text: &str) -> Question {
    Question {
        id: id.into(),
        group_id: id.into(),
        text: text.into(),
        context: String::new(),
        subfield: subfield.into(),
        difficulty: Difficulty::Medium,
        qtype: QuestionType::MultipleChoice,
        options: vec![
            AnswerOption::new("A", "first"),
            AnswerOption::new("B", "second"),
        ],
        gold: "A".into(),
        is_arithmetic: false,
        language_tag: "en".into(),
    }
}

fn pattern(name: &str, description: &str, step: &str) -> SkillPattern {
    SkillPattern {
        name: name.into(),
        description: description.into(),
        when_to_use: vec!["the question matches this scenario".into()],
        procedure: vec![step.into()],
        example: String::new(),
    }
}

fn skill_file(
    subfield: &str,
    et: ErrorType,
    sources: &[&str],
    patterns: Vec<SkillPattern>,
) -> SkillFile {
    SkillFile {
        subfield: subfield.into(),
        error_type: et,
        version: 1,
        source_question_ids: sources.iter().map(|s| s.to_string()).collect(),
        summary: format!("Guidance for {subfield}."),
        keywords: vec![subfield.replace('_', " ")],
        patterns,
    }
}

fn library_of(files: Vec<SkillFile>) -> SkillLibrary {
    let files: BTreeMap<String, SkillFile> =
        files.into_iter().map(|f| (f.path().unwrap(), f)).collect();
    SkillLibrary {
        navigation: build_navigation(files.values()),
        files,
        library_version: 1,
    }
}

/// Relative path → bytes for every file under `dir`.
fn snapshot_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

// ---------------------------------------------------------------------------
// 1. mock end-to-end warm-up

fn warmup_fixture_once(out: &Path) {
    let dir = fixture_dir();
    let corpus =
        parse_corpus(&fs::read_to_string(dir.join("corpus.jsonl")).unwrap(), &dir).unwrap();
    let gateway = mock_gateway(MockScript::load(&dir.join("script.txt")).unwrap());
    let executor = StubSandbox::load(&dir.join("pot_stub.json"))
        .unwrap()
        .into_executor();
    let evaluator = Evaluator::new(&gateway, &executor, settings(4));
    let (lib, manifest) =
        run_warmup(&evaluator, &corpus.questions, &WarmupSettings::default()).unwrap();
    assert_eq!(manifest.train_questions, 24);
    assert!(validate_library(&lib).is_empty());
    write_library(&lib, out).unwrap();
}

fn criterion_1() -> String {
    let golden = fixture_dir().join("golden");
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let start = Instant::now();
    warmup_fixture_once(&a);
    warmup_fixture_once(&b);
    let elapsed = start.elapsed();
    if std::env::var("ASDA_BLESS").is_ok_and(|v| v == "1") {
        let _ = fs::remove_dir_all(&golden);
        warmup_fixture_once(&golden);
    }
    let (sa, sb, sg) = (snapshot_dir(&a), snapshot_dir(&b), snapshot_dir(&golden));
    assert_eq!(sa, sb, "two runs differ");
    assert_eq!(
        sa.keys().collect::<Vec<_>>(),
        sg.keys().collect::<Vec<_>>(),
        "file set differs from golden"
    );
    for (path, bytes) in &sa {
        assert!(bytes == &sg[path], "{path} differs from golden");
    }
    let lib = load_library(&a).unwrap();
    let golden_lib = load_library(&golden).unwrap();
    for (path, file) in &lib.files {
        assert_eq!(
            file.patterns.len(),
            golden_lib.files[path].patterns.len(),
            "{path} pattern count"
        );
    }
    assert!(
        elapsed < Duration::from_secs(10),
        "two runs took {elapsed:?}"
    );
    format!(
        "{} files byte-identical to golden, 2 runs in {:.0?}",
        sa.len(),
        elapsed
    )
}

// ---------------------------------------------------------------------------
// 2. partition property suite

fn criterion_2() -> String {
    let lib = library_of(vec![skill_file(
        "portfolio",
        ErrorType::Other,
        &["seed"],
        vec![pattern("Any", "General guidance.", "Think.")],
    )]);
    let selector = SelectorSettings::default();
    let executor = StubSandbox::new().into_executor();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tables = 1000;
    let mut items = 0;
    for _ in 0..tables {
        let n = rng.random_range(1..=10);
        let table: Vec<(bool, bool)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let questions: Vec<Question> = (0..n)
            .map(|i| {
                question(
                    &format!("p{i:02}"),
                    "portfolio",
                    &format!("Partition item {i:02}?"),
                )
            })
            .collect();
        let mut script = MockScript::new().rule(
            MockRule::any()
                .role(Role::Selector)
                .respond("SUBFIELD: portfolio"),
        );
        for (i, (with, without)) in table.iter().enumerate() {
            let text = format!("Partition item {i:02}?");
            let ans = |ok: bool| if ok { "Answer: A" } else { "Answer: B" };
            script = script
                .rule(
                    MockRule::contains(text.clone())
                        .role(Role::Student)
                        .and("# Skill:")
                        .respond(ans(*with)),
                )
                .rule(
                    MockRule::contains(text)
                        .role(Role::Student)
                        .respond(ans(*without)),
                );
        }
        let gateway = mock_gateway(script.default_response("UNSCRIPTED"));
        let evaluator = Evaluator::new(&gateway, &executor, settings(1));
        let ev = collect_evidence(&evaluator, &questions, &lib, &selector);
        let p = &ev.partition;
        let universe: BTreeSet<String> = questions.iter().map(|q| q.id.clone()).collect();
        assert!(
            p.q_plus.is_disjoint(&p.q_minus)
                && p.q_plus.is_disjoint(&p.q_gap)
                && p.q_minus.is_disjoint(&p.q_gap)
        );
        let union: BTreeSet<String> = p
            .q_plus
            .iter()
            .chain(&p.q_minus)
            .chain(&p.q_gap)
            .cloned()
            .collect();
        assert_eq!(union, universe);
        for (q, (with, without)) in questions.iter().zip(&table) {
            let expected = match (with, without) {
                (true, _) => Bucket::Positive,
                (false, true) => Bucket::Negative,
                (false, false) => Bucket::Gap,
            };
            assert_eq!(
                p.bucket_of(&q.id),
                Some(expected),
                "{} with={with} without={without}",
                q.id
            );
            items += 1;
        }
    }
    format!("{tables} tables, {items} items, 0 violations")
}

// ---------------------------------------------------------------------------
// 3. gate semantics

fn criterion_3() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scenarios = 600;
    let mut commits = 0;
    let tmp = tempfile::tempdir().unwrap();
    for s in 0..scenarios {
        let phase = if rng.random() {
            GatePhase::Coverage
        } else {
            GatePhase::Safety
        };
        let config = RefinementConfig {
            n_max: rng.random_range(1..=5),
            tau_cov: rng.random_range(1..=8) as f64 / 8.0,
            tau_safe_retain: rng.random_range(1..=8) as f64 / 8.0,
            ..RefinementConfig::default()
        };
        let threshold = config.threshold(phase);
        let path = "fixed_income/wrong_targets.md";
        let original = skill_file(
            "fixed_income",
            ErrorType::WrongTargets,
            &["s0"],
            vec![pattern("Target", "Original.", "Step.")],
        );
        let mut lib = library_of(vec![original.clone()]);
        let dir = tmp.path().join(format!("s{s}"));
        write_library(&lib, &dir).unwrap();
        let before = fs::read(dir.join(path)).unwrap();

        let plan: Vec<(bool, f64, usize)> = (0..8)
            .map(|_| {
                (
                    rng.random_bool(0.15),
                    rng.random_range(0..=8) as f64 / 8.0,
                    rng.random_range(0..=2),
                )
            })
            .collect();
        let mut proposed = 0u32;
        let outcome = run_gate_loop(
            path,
            phase,
            &config,
            |attempt, prev| {
                proposed += 1;
                assert_eq!(attempt, proposed);
                assert_eq!(prev.is_some(), attempt > 1);
                if plan[attempt as usize - 1].0 {
                    return Proposal::Failed("no candidate".into());
                }
                let mut c = original.clone();
                c.version += attempt;
                c.patterns[0].description = format!("Attempt {attempt}.");
                Proposal::Candidate(c)
            },
            |c| {
                let (_, score, recovered) = plan[(c.version - 2) as usize];
                GateScores {
                    score,
                    recovered_negatives: (phase == GatePhase::Safety).then_some((recovered, 2)),
                }
            },
        );
        assert!(
            outcome.decisions.len() as u32 <= config.n_max,
            "attempts exceed n_max"
        );
        for (i, d) in outcome.decisions.iter().enumerate() {
            let (failed, score, recovered) = plan[i];
            let accepts =
                !failed && score >= threshold && (phase == GatePhase::Coverage || recovered >= 1);
            assert_eq!(d.committed, accepts, "decision {i} of scenario {s}");
            assert_eq!(d.attempt_index as usize, i + 1);
            assert_eq!(d.threshold, threshold);
            if d.committed {
                assert_eq!(
                    i + 1,
                    outcome.decisions.len(),
                    "loop continued after a commit"
                );
            }
        }
        let any_commit = outcome.decisions.iter().any(|d| d.committed);
        assert_eq!(any_commit, outcome.committed.is_some());
        if !any_commit {
            assert_eq!(outcome.decisions.len() as u32, config.n_max);
        }
        if let Some(file) = outcome.committed {
            lib.upsert(path.into(), file);
            commits += 1;
        }
        write_library(&lib, &dir).unwrap();
        let after = fs::read(dir.join(path)).unwrap();
        assert_eq!(
            before == after,
            !any_commit,
            "file bytes vs commit in scenario {s}"
        );
    }

    // full iterations whose every expansion fails must leave the file untouched
    let iterations = 20;
    for s in 0..iterations {
        let n_max = 1 + s % 4;
        let text = format!("Rollback item {s}?");
        let q = question("r1", "fixed_income", &text);
        let lib = library_of(vec![skill_file(
            "fixed_income",
            ErrorType::WrongTargets,
            &["s0"],
            vec![pattern("Target", "Original guidance.", "Step.")],
        )]);
        let script = MockScript::new()
            .rule(MockRule::any().role(Role::Selector).respond("SUBFIELD: fixed_income"))
            .rule(MockRule::contains(text).role(Role::Student).respond("Answer: B"))
            .rule(MockRule::contains("Task: expand coverage").role(Role::Teacher).respond(
                "## Pattern: Wider\n\n**Addresses:** More.\n\n**When to use:**\n- always\n\n**Procedure:**\n1. Try harder.\n",
            ))
            .rule(MockRule::contains("Which single loaded file").respond("FILE: fixed_income/wrong_targets.md"))
            .default_response("UNSCRIPTED");
        let gateway = mock_gateway(script);
        let executor = StubSandbox::new().into_executor();
        let evaluator = Evaluator::new(&gateway, &executor, settings(1));
        let config = RefinementConfig {
            n_max,
            ..RefinementConfig::default()
        };
        let dir = tmp.path().join(format!("it{s}"));
        write_library(&lib, &dir).unwrap();
        let before = snapshot_dir(&dir);
        let (next, report) = run_iteration(
            &evaluator,
            &lib,
            &[q],
            &config,
            &SelectorSettings::default(),
            1,
        );
        assert_eq!(report.coverage.len() as u32, n_max);
        assert!(report.coverage.iter().all(|d| !d.committed));
        write_library(&next, &dir).unwrap();
        assert_eq!(
            snapshot_dir(&dir),
            before,
            "rejected iteration changed the library"
        );
    }
    format!("{scenarios} gate scenarios ({commits} commits) + {iterations} full rollbacks, 0 violations")
}

// ---------------------------------------------------------------------------
// 4. scripted eight-question iteration trace

const PATH_A: &str = "fixed_income/wrong_method_selection.md";
const PATH_B: &str = "equity_valuation/concept_confusion.md";

const EXPAND_A: &str = "**Summary:** Bond method choice, widened.
**Keywords:** callable bonds, trees

## Pattern: Tree valuation MARK-A2

**Addresses:** Embedded options need a rate tree.

**When to use:**
- the bond has an embedded option

**Procedure:**
1. Build a binomial tree.
";

const EXPAND_B: &str = "**Summary:** Equity concepts, widened.
**Keywords:** cost of equity

## Pattern: Equity rate choice MARK-B2

**Addresses:** Equity flows use the cost of equity.

**When to use:**
- any equity valuation question

**Procedure:**
1. Pick the cost of equity.
";

const REPAIR_A: &str = "**Summary:** Bond method choice, repaired.
**Keywords:** callable bonds, trees, duration

## Pattern: Tree valuation MARK-A3

**Addresses:** Embedded options need a rate tree; plain bonds do not.

**When to use:**
- the bond has an embedded option

**Procedure:**
1. Check for an embedded option first.
2. Build a binomial tree only if one exists.
";

fn trace_questions() -> Vec<Question> {
    let layout = [
        ("q1", "fixed_income"),
        ("q2", "fixed_income"),
        ("q3", "fixed_income"),
        ("q4", "equity_valuation"),
        ("q5", "equity_valuation"),
        ("q6", "equity_valuation"),
        ("q7", "derivatives"),
        ("q8", "fixed_income"),
    ];
    layout
        .iter()
        .map(|(id, sf)| question(id, sf, &format!("Trace item {id}: which choice applies?")))
        .collect()
}

fn trace_script() -> MockScript {
    let text = |id: &str| format!("Trace item {id}: which choice applies?");
    let student = |id: &str| MockRule::contains(text(id)).role(Role::Student);
    let teacher = |needle: &str| MockRule::contains(needle).role(Role::Teacher);
    let mut s = MockScript::new();
    for (id, sf) in trace_questions()
        .iter()
        .map(|q| (q.id.clone(), q.subfield.clone()))
    {
        s = s.rule(
            MockRule::contains(text(&id))
                .role(Role::Selector)
                .respond(format!("SUBFIELD: {sf}")),
        );
    }
    s = s
        .rule(student("q1").respond("Answer: A"))
        .rule(student("q2").and("MARK-A2").respond("Answer: A"))
        .rule(student("q2").and("MARK-A3").respond("Answer: A"))
        .rule(student("q2").respond("Answer: B"))
        .rule(student("q3").and("MARK-A2").respond("Answer: B"))
        .rule(student("q3").respond("Answer: A"))
        .rule(student("q4").respond("Answer: B"))
        .rule(student("q5").respond("Answer: A"))
        .rule(student("q6").and("# Skill:").respond("Answer: B"))
        .rule(student("q6").respond("Answer: A"))
        .rule(student("q7").respond("Answer: B"))
        .rule(student("q8").respond("Answer: B"))
        .rule(
            teacher("Task: expand coverage")
                .and(format!("Skill file: {PATH_A}"))
                .respond(EXPAND_A),
        )
        .rule(
            teacher("Task: expand coverage")
                .and(format!("Skill file: {PATH_B}"))
                .respond(EXPAND_B),
        )
        .rule(
            teacher("Task: repair regressions")
                .and(format!("Skill file: {PATH_A}"))
                .respond(REPAIR_A),
        );
    for id in ["q1", "q2", "q3", "q8"] {
        s = s.rule(
            teacher("Which single loaded file")
                .and(format!("Question id: {id}\n"))
                .respond(format!("FILE: {PATH_A}")),
        );
    }
    for id in ["q4", "q5"] {
        s = s.rule(
            teacher("Which single loaded file")
                .and(format!("Question id: {id}\n"))
                .respond(format!("FILE: {PATH_B}")),
        );
    }
    s.rule(
        teacher("Which single loaded file")
            .and("Question id: q6\n")
            .respond("FILE: none"),
    )
    .rule(
        teacher("Classify the failure")
            .and("Question id: q7\n")
            .respond("not sure"),
    )
    .default_response("UNSCRIPTED")
}

fn trace_library() -> SkillLibrary {
    library_of(vec![
        skill_file(
            "fixed_income",
            ErrorType::WrongMethodSelection,
            &["a0"],
            vec![pattern(
                "Tree valuation MARK-A1",
                "Use a tree.",
                "Build a tree.",
            )],
        ),
        skill_file(
            "equity_valuation",
            ErrorType::ConceptConfusion,
            &["b0"],
            vec![pattern(
                "Equity rate MARK-B1",
                "Use the cost of equity.",
                "Pick a rate.",
            )],
        ),
    ])
}

fn revised(
    base: &SkillFile,
    version: u32,
    new_sources: &[&str],
    summary: &str,
    keywords: &[&str],
    patterns: Vec<SkillPattern>,
) -> SkillFile {
    let mut f = base.clone();
    f.version = version;
    f.source_question_ids
        .extend(new_sources.iter().map(|s| s.to_string()));
    f.summary = summary.into();
    f.keywords = keywords.iter().map(|k| k.to_string()).collect();
    f.patterns = patterns;
    f
}

fn ids(list: &[&str]) -> BTreeSet<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[allow(clippy::too_many_arguments)]
fn decision(
    path: &str,
    phase: GatePhase,
    attempt: u32,
    score: f64,
    threshold: f64,
    rec: Option<(usize, usize)>,
    committed: bool,
    file: &SkillFile,
) -> GateDecision {
    GateDecision {
        file_path: path.into(),
        phase,
        attempt_index: attempt,
        score,
        threshold,
        recovered_negatives: rec,
        committed,
        candidate_digest: digest_hex(render_skill_file(file)),
        note: None,
    }
}

fn expected_trace_report(lib: &SkillLibrary) -> (IterationReport, SkillLibrary) {
    let a1 = &lib.files[PATH_A];
    let b1 = &lib.files[PATH_B];
    let step_pattern = |name: &str, desc: &str, when: &str, steps: &[&str]| SkillPattern {
        name: name.into(),
        description: desc.into(),
        when_to_use: vec![when.into()],
        procedure: steps.iter().map(|s| s.to_string()).collect(),
        example: String::new(),
    };
    let a2 = revised(
        a1,
        2,
        &["q2", "q8"],
        "Bond method choice, widened.",
        &["callable bonds", "trees"],
        vec![step_pattern(
            "Tree valuation MARK-A2",
            "Embedded options need a rate tree.",
            "the bond has an embedded option",
            &["Build a binomial tree."],
        )],
    );
    let b2 = revised(
        b1,
        2,
        &["q4"],
        "Equity concepts, widened.",
        &["cost of equity"],
        vec![step_pattern(
            "Equity rate choice MARK-B2",
            "Equity flows use the cost of equity.",
            "any equity valuation question",
            &["Pick the cost of equity."],
        )],
    );
    let a3 = revised(
        &a2,
        3,
        &["q3"],
        "Bond method choice, repaired.",
        &["callable bonds", "trees", "duration"],
        vec![step_pattern(
            "Tree valuation MARK-A3",
            "Embedded options need a rate tree; plain bonds do not.",
            "the bond has an embedded option",
            &[
                "Check for an embedded option first.",
                "Build a binomial tree only if one exists.",
            ],
        )],
    );

    let attribution = |entries: &[(&str, Option<&str>)]| -> BTreeMap<String, Attribution> {
        entries
            .iter()
            .map(|(id, p)| {
                let a = match p {
                    Some(p) => Attribution::File(p.to_string()),
                    None => Attribution::Unattributed,
                };
                (id.to_string(), a)
            })
            .collect()
    };
    let attr = attribution(&[
        ("q1", Some(PATH_A)),
        ("q2", Some(PATH_A)),
        ("q3", Some(PATH_A)),
        ("q4", Some(PATH_B)),
        ("q5", Some(PATH_B)),
        ("q6", None),
        ("q7", None),
        ("q8", Some(PATH_A)),
    ]);
    let evidence = EvidencePartition {
        q_plus: ids(&["q1", "q3", "q5"]),
        q_minus: ids(&["q6"]),
        q_gap: ids(&["q2", "q4", "q7", "q8"]),
        attribution: attr.clone(),
    };
    let post_partition = EvidencePartition {
        q_plus: ids(&["q1", "q2", "q5"]),
        q_minus: ids(&["q3", "q6"]),
        q_gap: ids(&["q4", "q7", "q8"]),
        attribution: attr,
    };
    let c = GatePhase::Coverage;
    let report = IterationReport {
        iteration: 1,
        library_version_before: 1,
        library_version_after: 3,
        evidence,
        routed_gap_cases: BTreeMap::new(),
        unrouted_gap_cases: vec!["q7".into()],
        coverage: vec![
            decision(PATH_B, c, 1, 0.0, 0.5, None, false, &b2),
            decision(PATH_B, c, 2, 0.0, 0.5, None, false, &b2),
            decision(PATH_B, c, 3, 0.0, 0.5, None, false, &b2),
            decision(PATH_A, c, 1, 0.5, 0.5, None, true, &a2),
        ],
        post_coverage: PostCoverage {
            partition: post_partition,
            promoted: vec!["q2".into()],
            regressed: vec!["q3".into()],
            reevaluated: true,
        },
        safety: vec![decision(
            PATH_A,
            GatePhase::Safety,
            1,
            1.0,
            0.9,
            Some((1, 1)),
            true,
            &a3,
        )],
        unattributed_negatives: vec!["q6".into()],
    };
    let mut next = lib.clone();
    next.upsert(PATH_A.into(), a3);
    next.library_version = 3;
    (report, next)
}

fn criterion_4() -> String {
    let lib = trace_library();
    let questions = trace_questions();
    let gateway = mock_gateway(trace_script());
    let executor = StubSandbox::new().into_executor();
    let evaluator = Evaluator::new(&gateway, &executor, settings(4));
    let config = RefinementConfig {
        iterations: 1,
        tau_cov: 0.5,
        tau_safe_retain: 0.9,
        n_max: 3,
        seed: 0,
    };
    let (next, report) = run_iteration(
        &evaluator,
        &lib,
        &questions,
        &config,
        &SelectorSettings::default(),
        1,
    );
    let (expected_report, expected_lib) = expected_trace_report(&lib);
    assert_eq!(report, expected_report);
    assert_eq!(next, expected_lib);
    assert_eq!(
        next.files[PATH_B], lib.files[PATH_B],
        "rejected file changed"
    );
    format!(
        "report matches: {} coverage decisions, {} safety, version {} -> {}",
        report.coverage.len(),
        report.safety.len(),
        report.library_version_before,
        report.library_version_after
    )
}

// ---------------------------------------------------------------------------
// 5. split check

fn synthetic_record(
    id: usize,
    arith: bool,
    diff: &str,
    qtype: &str,
    language: &str,
) -> serde_json::Value {
    let mut v = serde_json::json!({
        "id": format!("s{id:04}"),
        "question": format!("Synthetic question {id}?"),
        "subfield": "corporate_finance",
        "difficulty": diff,
        "qtype": qtype,
        "gold": "A",
        "is_arithmetic": arith,
        "language": language,
    });
    if qtype == "multiple_choice" {
        v["options"] =
            serde_json::json!([{"label": "A", "body": "1"}, {"label": "B", "body": "2"}]);
    }
    v
}

fn criterion_5() -> String {
    let strata = [
        ("easy", "multiple_choice"),
        ("easy", "open_ended"),
        ("medium", "multiple_choice"),
        ("medium", "open_ended"),
        ("hard", "multiple_choice"),
        ("hard", "open_ended"),
    ];
    let arith_sizes = [200, 154, 99, 150, 100, 45];
    let non_sizes = [200, 150, 100, 90, 50, 40];
    assert_eq!(arith_sizes.iter().sum::<usize>(), 748);
    assert_eq!(non_sizes.iter().sum::<usize>(), 630);
    let mut lines = Vec::new();
    let mut id = 0;
    for (sizes, arith) in [(arith_sizes, true), (non_sizes, false)] {
        for ((diff, qtype), n) in strata.iter().zip(sizes) {
            for _ in 0..n {
                lines.push(synthetic_record(id, arith, diff, qtype, "en").to_string());
                id += 1;
            }
        }
    }
    // records in other languages must be dropped before splitting
    for _ in 0..37 {
        lines.push(synthetic_record(id, id % 2 == 0, "easy", "open_ended", "zh").to_string());
        id += 1;
    }
    let corpus = parse_corpus(&lines.join("\n"), Path::new("synthetic.jsonl")).unwrap();
    let english = propagate_context(&filter_language(&corpus, "en"));
    let (arith, non) = partition_arithmetic(&english);
    assert_eq!((arith.len(), non.len()), (748, 630));
    let mut out = Vec::new();
    for (part, expected) in [(&arith, (448, 300)), (&non, (378, 252))] {
        for seed in [0, 1, 42] {
            let spec = SplitSpec {
                seed,
                ..SplitSpec::default()
            };
            let split = stratified_split(part, &spec);
            assert_eq!(
                (split.train.len(), split.test.len()),
                expected,
                "seed {seed}"
            );
            assert_eq!(split.manifest.drift_correction, 0);
            for s in &split.manifest.strata {
                let ratio = s.train as f64 / s.total as f64;
                assert!(
                    (ratio - 0.6).abs() <= 1.0 / (2.0 * s.total as f64) + 1e-12,
                    "stratum {} ratio {ratio}",
                    s.stratum
                );
            }
            let train_ids: BTreeSet<&str> = split
                .train
                .questions
                .iter()
                .map(|q| q.id.as_str())
                .collect();
            assert!(split
                .test
                .questions
                .iter()
                .all(|q| !train_ids.contains(q.id.as_str())));
            // same seed, same split
            let again = stratified_split(part, &spec);
            assert_eq!(
                to_jsonl(&again.train.questions),
                to_jsonl(&split.train.questions)
            );
        }
        out.push(format!("{}/{}", expected.0, expected.1));
    }
    format!(
        "arithmetic {} and non-arithmetic {}, all strata within bound",
        out[0], out[1]
    )
}

// ---------------------------------------------------------------------------
// 6. grading unit suite

fn criterion_6() -> String {
    let abc = vec![
        AnswerOption::new("A", "Increase"),
        AnswerOption::new("B", "Decrease"),
        AnswerOption::new("C", "No change"),
    ];
    let mc_cases: &[(&str, &str, bool)] = &[
        ("B", "B", true),
        ("b", "B", true),
        ("(B)", "B", true),
        ("B.", "B", true),
        ("Answer: B", "B", true),
        ("Final answer: B", "B", true),
        ("**B**", "B", true),
        ("Option B", "B", true),
        ("B) Decrease", "B", true),
        ("Decrease", "B", true),
        ("no change", "C", true),
        ("A", "B", false),
        ("D", "B", false),
        ("", "B", false),
        ("Increase", "B", false),
    ];
    for (pred, gold, expected) in mc_cases {
        assert_eq!(
            grade_mc(pred, gold, &abc),
            *expected,
            "grade_mc({pred:?}, {gold:?})"
        );
    }

    let opts = |bodies: &[&str]| -> Vec<AnswerOption> {
        bodies
            .iter()
            .zip(["A", "B", "C", "D"])
            .map(|(b, l)| AnswerOption::new(l, *b))
            .collect()
    };
    let map_cases: Vec<(f64, Vec<AnswerOption>, Option<&str>)> = vec![
        (907.0, opts(&["$907.03", "$952.38", "$1,102.50"]), Some("A")),
        (
            1100.0,
            opts(&["$907.03", "$952.38", "$1,102.50"]),
            Some("C"),
        ),
        (5.0, opts(&["4", "6", "8"]), Some("A")),
        (7.0, opts(&["8", "6", "4"]), Some("A")),
        (7.6, opts(&["7.60%", "8.18%", "6.20%"]), Some("A")),
        (-454.55, opts(&["41.32", "200.00", "-454.55"]), Some("C")),
        (1250.0, opts(&["€1,000", "£1,500", "1,250"]), Some("C")),
        (12.0, opts(&["High", "Low"]), None),
        (3.0, opts(&["n/a", "3.1", "2.95"]), Some("C")),
        (-2.0, opts(&["\u{2212}2", "2"]), Some("A")),
    ];
    for (value, options, expected) in &map_cases {
        assert_eq!(
            map_to_option(*value, options).as_deref(),
            *expected,
            "map_to_option({value})"
        );
    }
    format!(
        "{} grade_mc cases, {} map_to_option cases",
        mc_cases.len(),
        map_cases.len()
    )
}

// ---------------------------------------------------------------------------
// 7. library round-trip

fn ten_file_library() -> SkillLibrary {
    let subfields = [
        "fixed_income",
        "equity_valuation",
        "derivatives",
        "corporate_finance",
        "common",
    ];
    let mut files = Vec::new();
    for (i, et) in ErrorType::ALL.iter().enumerate() {
        let sf = subfields[i % subfields.len()];
        let patterns = (0..=i % 3)
            .map(|j| SkillPattern {
                name: format!("Pattern {i}.{j}"),
                description: format!("Closes gap {i}.{j}."),
                when_to_use: vec![format!("trigger {j}"), "the question says *exactly*".into()],
                procedure: vec!["First step.".into(), format!("Step with `code` {j}.")],
                example: if j % 2 == 0 {
                    format!("```python\nx = {i} * {j}\nprint(x)\n```")
                } else {
                    String::new()
                },
            })
            .collect();
        let mut f = skill_file(sf, *et, &["t1", "t2"], patterns);
        f.version = 1 + (i as u32 % 3);
        files.push(f);
    }
    let mut lib = library_of(files);
    lib.library_version = 4;
    lib
}

type Corruption = (&'static str, Box<dyn Fn(&Path)>);

fn criterion_7() -> String {
    let lib = ten_file_library();
    assert_eq!(lib.files.len(), 10);
    assert!(
        validate_library(&lib).is_empty(),
        "{:?}",
        validate_library(&lib)
    );
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_library(&lib, &a).unwrap();
    let loaded = load_library(&a).unwrap();
    assert_eq!(loaded, lib);
    assert!(validate_library(&loaded).is_empty());
    write_library(&loaded, &b).unwrap();
    assert_eq!(
        snapshot_dir(&a),
        snapshot_dir(&b),
        "write -> load -> write not byte-identical"
    );

    let corruptions: Vec<Corruption> = vec![
        (
            "navigation entry removed",
            Box::new(|d: &Path| {
                let nav = fs::read_to_string(d.join("SKILL.md")).unwrap();
                let start = nav.find("## derivatives/").unwrap();
                let end = nav[start + 3..]
                    .find("\n## ")
                    .map(|e| start + 3 + e + 1)
                    .unwrap_or(nav.len());
                fs::write(
                    d.join("SKILL.md"),
                    format!("{}{}", &nav[..start], &nav[end..]),
                )
                .unwrap();
            }),
        ),
        (
            "skill file deleted",
            Box::new(|d: &Path| {
                let victim = fs::read_dir(d.join("common"))
                    .unwrap()
                    .next()
                    .unwrap()
                    .unwrap()
                    .path();
                fs::remove_file(victim).unwrap();
            }),
        ),
        (
            "file moved to another subfield",
            Box::new(|d: &Path| {
                let src = fs::read_dir(d.join("fixed_income"))
                    .unwrap()
                    .next()
                    .unwrap()
                    .unwrap()
                    .path();
                let name = src.file_name().unwrap().to_owned();
                fs::rename(&src, d.join("derivatives").join(name)).unwrap();
            }),
        ),
        (
            "procedure emptied",
            Box::new(|d: &Path| {
                let p = fs::read_dir(d.join("equity_valuation"))
                    .unwrap()
                    .next()
                    .unwrap()
                    .unwrap()
                    .path();
                let text = fs::read_to_string(&p).unwrap();
                let kept: Vec<&str> = text
                    .lines()
                    .filter(|l| !l.starts_with("1. ") && !l.starts_with("2. "))
                    .collect();
                fs::write(&p, kept.join("\n") + "\n").unwrap();
            }),
        ),
        (
            "pattern renamed without updating navigation",
            Box::new(|d: &Path| {
                let p = fs::read_dir(d.join("corporate_finance"))
                    .unwrap()
                    .next()
                    .unwrap()
                    .unwrap()
                    .path();
                let text = fs::read_to_string(&p).unwrap();
                fs::write(
                    &p,
                    text.replacen("## Pattern: Pattern", "## Pattern: Renamed", 1),
                )
                .unwrap();
            }),
        ),
    ];
    let count = corruptions.len();
    for (i, (name, corrupt)) in corruptions.into_iter().enumerate() {
        let dir = tmp.path().join(format!("bad{i}"));
        write_library(&lib, &dir).unwrap();
        corrupt(&dir);
        let bad = load_library(&dir).unwrap_or_else(|e| panic!("{name}: load failed: {e}"));
        assert!(
            !validate_library(&bad).is_empty(),
            "{name}: no violation reported"
        );
    }
    format!("10-file round-trip byte-identical, {count} corrupted variants rejected")
}

// ---------------------------------------------------------------------------
// 8. stub executor only

fn criterion_8() -> String {
    let dir = fixture_dir();
    let corpus =
        parse_corpus(&fs::read_to_string(dir.join("corpus.jsonl")).unwrap(), &dir).unwrap();
    let table: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.join("pot_stub.json")).unwrap()).unwrap();
    let gateway = mock_gateway(MockScript::load(&dir.join("script.txt")).unwrap());
    let executor = StubSandbox::load(&dir.join("pot_stub.json"))
        .unwrap()
        .into_executor();
    let evaluator = Evaluator::new(&gateway, &executor, settings(2));
    let report = evaluator.evaluate_set(&corpus.questions, None);
    let mut pot = 0;
    for (q, r) in corpus.questions.iter().zip(&report.records) {
        match &r.pot_trace {
            Some(trace) => {
                assert!(q.is_arithmetic);
                let expected = table[trace.code.trim()].as_str().unwrap();
                assert_eq!(trace.result.value(), Some(expected));
                pot += 1;
            }
            None => assert!(!q.is_arithmetic),
        }
    }
    assert!(pot > 0);
    // the stub speaks the same request/response protocol as the sandbox
    let direct = executor.execute("print('not in the table')");
    assert!(direct.value().is_none());
    format!(
        "{pot} program-of-thought items executed by the table-driven stub; no sandbox process used"
    )
}

type Criterion = (&'static str, fn() -> String);

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("mock end-to-end warm-up", criterion_1),
        ("partition property suite", criterion_2),
        ("gate semantics", criterion_3),
        ("scripted iteration trace", criterion_4),
        ("split check", criterion_5),
        ("grading unit suite", criterion_6),
        ("library round-trip", criterion_7),
        ("stub executor only", criterion_8),
    ];
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(detail) => lines.push(format!("criterion {n} PASS  {name}: {detail}")),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                let first = msg.lines().next().unwrap_or_default().to_string();
                lines.push(format!("criterion {n} FAIL  {name}: {first}"));
                failed.push(n);
            }
        }
    }
    println!();
    for l in &lines {
        println!("{l}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use asda::config::Config;
use asda::corpus::{
    filter_language, load_corpus, partition_arithmetic, propagate_context, stratified_split,
    to_jsonl, SplitSpec,
};
use asda::eval::{AccuracySummary, EvalReport, Evaluator, Tally};
use asda::gateway::Gateway;
use asda::library::{load_library, write_library};
use asda::model::{GateDecision, GatePhase, PartitionSizes, SkillLibrary};
use asda::refinement::{run_refinement, IterationReport};
use asda::warmup::{run_warmup, WarmupManifest};
use serde::{Deserialize, Serialize};

use crate::manifest::{write_json, write_text, Manifest};
use crate::RunOptions;

const SUMMARY_FILE: &str = "summary.json";

/// Config file (or defaults) with command-line overrides applied.
fn resolve_config(opts: &RunOptions) -> Result<Config> {
    let mut cfg = match &opts.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(script) = &opts.mock_script {
        cfg.use_mock_script(script);
    }
    if let Some(stub) = &opts.pot_stub {
        cfg.pot.stub_table = Some(stub.clone());
        cfg.pot.command = None;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(w) = opts.workers {
        cfg.eval.workers = w;
    }
    if let Some(mode) = &opts.mode {
        cfg.selector.mode = mode.parse()?;
    }
    if let Some(v) = opts.tau_cov {
        cfg.refine.tau_cov = v;
    }
    if let Some(v) = opts.tau_safe {
        cfg.refine.tau_safe_retain = v;
    }
    if let Some(v) = opts.n_max {
        cfg.refine.n_max = v;
    }
    if let Some(v) = opts.iterations {
        cfg.refine.iterations = v;
    }
    if cfg.roles.is_empty() {
        bail!("no model backends configured; pass --config or --mock-script");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn base_manifest(command: &str, cfg: &Config, opts: &RunOptions) -> Result<Manifest> {
    let mut m = Manifest::new(command, cfg.seed);
    m.config_digest = Some(cfg.digest());
    if let Some(p) = &opts.config {
        m.input("config", p)?;
    }
    if let Some(p) = &opts.mock_script {
        m.input("mock_script", p)?;
    }
    if let Some(p) = &opts.pot_stub {
        m.input("pot_stub", p)?;
    }
    Ok(m)
}

fn write_transcript(gateway: &Gateway, out: &Path) -> Result<()> {
    let mut text = String::new();
    for entry in gateway.canonical_transcript() {
        text.push_str(&serde_json::to_string(&entry)?);
        text.push('\n');
    }
    write_text(&out.join("transcript.jsonl"), &text)
}

pub fn split(
    corpus: &Path,
    language: &str,
    train_fraction: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        bail!("--train-fraction must lie strictly between 0 and 1");
    }
    let raw = load_corpus(corpus)?;
    let filtered = propagate_context(&filter_language(&raw, language));
    let (arith, non) = partition_arithmetic(&filtered);
    let spec = SplitSpec {
        train_fraction,
        seed,
        ..SplitSpec::default()
    };
    let mut details = serde_json::Map::new();
    details.insert("loaded".into(), raw.len().into());
    details.insert("kept_after_language_filter".into(), filtered.len().into());
    for (name, part) in [("arithmetic", &arith), ("non_arithmetic", &non)] {
        let s = stratified_split(part, &spec);
        write_text(
            &out.join(name).join("train.jsonl"),
            &to_jsonl(&s.train.questions),
        )?;
        write_text(
            &out.join(name).join("test.jsonl"),
            &to_jsonl(&s.test.questions),
        )?;
        tracing::info!(
            partition = name,
            train = s.train.len(),
            test = s.test.len(),
            "split written"
        );
        details.insert(name.into(), serde_json::to_value(&s.manifest)?);
    }
    let mut m = Manifest::new("split", seed);
    m.input("corpus", corpus)?;
    m.details = serde_json::Value::Object(details);
    m.write(out)
}

pub fn warmup(train: &Path, opts: &RunOptions) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let questions = load_corpus(train)?.questions;
    let gateway = cfg.build_gateway()?;
    let executor = cfg.build_executor()?;
    let evaluator = Evaluator::new(&gateway, executor.as_ref(), cfg.eval_settings());
    let (library, report) = run_warmup(&evaluator, &questions, &cfg.warmup_settings())?;
    write_library(&library, &opts.out.join("library"))?;
    write_transcript(&gateway, &opts.out)?;

    let mut m = base_manifest("warmup", &cfg, opts)?;
    m.input("train", train)?;
    m.library_version_out = Some(library.library_version);
    m.details = serde_json::to_value(&report)?;
    m.write(&opts.out)?;
    tracing::info!(
        files = library.files.len(),
        calls = gateway.call_count(),
        "warm-up finished"
    );
    Ok(())
}

pub fn refine(library: &Path, train: &Path, opts: &RunOptions) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let initial = load_library(library)?;
    let questions = load_corpus(train)?.questions;
    let gateway = cfg.build_gateway()?;
    let executor = cfg.build_executor()?;
    let evaluator = Evaluator::new(&gateway, executor.as_ref(), cfg.eval_settings());
    let run = run_refinement(
        &evaluator,
        &initial,
        &questions,
        &cfg.refinement(),
        &cfg.selector_settings(),
        Some(&opts.out.join("iterations")),
    )?;
    write_library(&run.library, &opts.out.join("library"))?;
    for r in &run.reports {
        write_json(
            &opts
                .out
                .join("reports")
                .join(format!("iteration_{}.json", r.iteration)),
            r,
        )?;
    }
    write_transcript(&gateway, &opts.out)?;

    let mut m = base_manifest("refine", &cfg, opts)?;
    m.input("library", library)?;
    m.input("train", train)?;
    m.library_version_in = Some(initial.library_version);
    m.library_version_out = Some(run.library.library_version);
    m.details = serde_json::to_value(
        run.reports
            .iter()
            .map(IterationCounts::from_report)
            .collect::<Vec<_>>(),
    )?;
    m.write(&opts.out)
}

/// What `summary.json` holds for an eval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_digest: String,
    pub library_version: Option<u32>,
    pub with_skills: Option<AccuracySummary>,
    pub without_skills: Option<AccuracySummary>,
    /// Overall with-skills minus without-skills accuracy, in percentage
    /// points, when both are present and non-empty.
    pub delta_pp: Option<String>,
}

fn delta_pp(with: &Tally, without: &Tally) -> Option<String> {
    let (a, b) = (with.accuracy()?, without.accuracy()?);
    Some(format!("{:+.2}", a - b))
}

fn write_report(report: &EvalReport, out: &Path, prefix: &str) -> Result<()> {
    write_text(
        &out.join(format!("{prefix}records.jsonl")),
        &report.records_jsonl(),
    )?;
    if !report.selections.is_empty() {
        let mut text = String::new();
        for (rec, sel) in report.records.iter().zip(&report.selections) {
            let line = serde_json::json!({ "question_id": rec.question_id, "selection": sel });
            text.push_str(&serde_json::to_string(&line)?);
            text.push('\n');
        }
        write_text(&out.join(format!("{prefix}selections.jsonl")), &text)?;
    }
    Ok(())
}

pub fn eval(test: &Path, library: Option<&Path>, baseline: bool, opts: &RunOptions) -> Result<()> {
    let cfg = resolve_config(opts)?;
    let questions = load_corpus(test)?.questions;
    let lib: Option<SkillLibrary> = library.map(load_library).transpose()?;
    let gateway = cfg.build_gateway()?;
    let executor = cfg.build_executor()?;
    let evaluator = Evaluator::new(&gateway, executor.as_ref(), cfg.eval_settings());
    let selector = cfg.selector_settings();

    let with = lib
        .as_ref()
        .map(|l| evaluator.evaluate_set(&questions, Some((l, &selector))));
    let without = (baseline || lib.is_none()).then(|| evaluator.evaluate_set(&questions, None));
    match (&with, &without) {
        (Some(w), Some(b)) => {
            write_report(w, &opts.out, "")?;
            write_report(b, &opts.out, "baseline_")?;
        }
        (Some(r), None) | (None, Some(r)) => write_report(r, &opts.out, "")?,
        (None, None) => unreachable!("one condition always runs"),
    }
    let summary = EvalSummary {
        config_digest: cfg.digest(),
        library_version: lib.as_ref().map(|l| l.library_version),
        delta_pp: match (&with, &without) {
            (Some(w), Some(b)) => delta_pp(&w.summary.overall, &b.summary.overall),
            _ => None,
        },
        with_skills: with.map(|r| r.summary),
        without_skills: without.map(|r| r.summary),
    };
    write_json(&opts.out.join(SUMMARY_FILE), &summary)?;
    write_transcript(&gateway, &opts.out)?;

    let mut m = base_manifest("eval", &cfg, opts)?;
    m.input("test", test)?;
    if let Some(p) = library {
        m.input("library", p)?;
    }
    m.library_version_in = summary.library_version;
    m.details =
        serde_json::json!({ "questions": questions.len(), "baseline": baseline || lib.is_none() });
    m.write(&opts.out)
}

/// Per-iteration commit and rollback counts, by file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub iteration: u32,
    pub coverage_commits: usize,
    pub coverage_rollbacks: usize,
    pub safety_commits: usize,
    pub safety_rollbacks: usize,
    pub library_version_after: u32,
    pub sizes_before: PartitionSizes,
    pub sizes_post_coverage: PartitionSizes,
}

fn commit_counts(decisions: &[GateDecision]) -> (usize, usize) {
    let mut by_file: BTreeMap<&str, bool> = BTreeMap::new();
    for d in decisions {
        *by_file.entry(&d.file_path).or_default() |= d.committed;
    }
    let commits = by_file.values().filter(|c| **c).count();
    (commits, by_file.len() - commits)
}

impl IterationCounts {
    pub fn from_report(r: &IterationReport) -> Self {
        debug_assert!(r.coverage.iter().all(|d| d.phase == GatePhase::Coverage));
        let (coverage_commits, coverage_rollbacks) = commit_counts(&r.coverage);
        let (safety_commits, safety_rollbacks) = commit_counts(&r.safety);
        Self {
            iteration: r.iteration,
            coverage_commits,
            coverage_rollbacks,
            safety_commits,
            safety_rollbacks,
            library_version_after: r.library_version_after,
            sizes_before: r.sizes_before(),
            sizes_post_coverage: r.sizes_post_coverage(),
        }
    }
}

fn tally_table(out: &mut String, title: &str, rows: &BTreeMap<String, Tally>) {
    let _ = writeln!(out, "  {title}");
    for (k, t) in rows {
        let _ = writeln!(
            out,
            "    {:<24} {:>5}/{:<5} {:>7}",
            k,
            t.correct,
            t.total,
            t.render()
        );
    }
}

fn summary_table(out: &mut String, name: &str, s: &AccuracySummary) {
    let o = &s.overall;
    let _ = writeln!(
        out,
        "{name}: {}/{} correct, accuracy {}",
        o.correct,
        o.total,
        o.render()
    );
    tally_table(out, "by question type", &s.by_qtype);
    tally_table(out, "by difficulty", &s.by_difficulty);
    tally_table(out, "by subfield", &s.by_subfield);
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn report(run: &Path) -> Result<String> {
    if !run.is_dir() {
        bail!("run directory {} does not exist", run.display());
    }
    let m = Manifest::read(run)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "command: {}  seed: {}  tool: {}",
        m.command, m.seed, m.tool_version
    );
    match m.command.as_str() {
        "eval" => {
            let s: EvalSummary = read_json(&run.join(SUMMARY_FILE))?;
            if let Some(v) = s.library_version {
                let _ = writeln!(out, "library version: {v}");
            }
            if let Some(w) = &s.with_skills {
                summary_table(&mut out, "with skills", w);
            }
            if let Some(b) = &s.without_skills {
                summary_table(&mut out, "without skills", b);
            }
            if let Some(d) = &s.delta_pp {
                let _ = writeln!(out, "delta: {d} pp");
            }
        }
        "refine" => {
            let reports_dir = run.join("reports");
            let mut t = 1;
            let _ = writeln!(
                out,
                "{:<10} {:>9} {:>9} {:>9} {:>9} {:>8}",
                "iteration", "cov+", "cov-", "safe+", "safe-", "version"
            );
            loop {
                let path = reports_dir.join(format!("iteration_{t}.json"));
                if !path.exists() {
                    break;
                }
                let r: IterationReport = read_json(&path)?;
                let c = IterationCounts::from_report(&r);
                let _ = writeln!(
                    out,
                    "{:<10} {:>9} {:>9} {:>9} {:>9} {:>8}",
                    c.iteration,
                    c.coverage_commits,
                    c.coverage_rollbacks,
                    c.safety_commits,
                    c.safety_rollbacks,
                    c.library_version_after
                );
                t += 1;
            }
            if t == 1 {
                let _ = writeln!(out, "(no iterations)");
            }
        }
        "warmup" => {
            let w: WarmupManifest = serde_json::from_value(m.details.clone())?;
            let _ = writeln!(
                out,
                "train questions: {}  failures: {}  clusters: {}  files: {}  fallback files: {}",
                w.train_questions,
                w.failures,
                w.clusters,
                w.files,
                w.fallback_files.len()
            );
        }
        _ => {
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&m.details)?);
        }
    }
    Ok(out)
}

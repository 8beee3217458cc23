//! On-disk skill library: the Markdown writer (bit-exact), a tolerant reader,
//! and structural validation.
//!
//! Layout:
//!
//! ```text
//! SKILL.md
//! common/
//!   wrong_output_format.md
//! fixed_income/
//!   wrong_method_selection.md
//! ```
//!
//! A skill file is a `---` delimited key-value front matter block followed by
//! one `## Pattern: <name>` section per pattern. `SKILL.md` holds one
//! `## <path>` section per file. Output uses `\n` newlines and never carries
//! trailing whitespace; writing a loaded library reproduces the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::LibraryError;
use crate::model::{
    slug_path, ErrorType, NavigationEntry, NavigationIndex, SkillFile, SkillLibrary, SkillPattern,
    NAVIGATION_FILE,
};

const FRONT_MATTER_FENCE: &str = "---";
const PATTERN_PREFIX: &str = "## Pattern:";
const NAVIGATION_TITLE: &str = "# Skill Navigation";
const NAVIGATION_BLURB: &str =
    "Each section maps a skill file to the subfield keywords and failure patterns it covers.";

// ---------------------------------------------------------------------------
// Canonical form

/// Collapses all whitespace (including newlines) into single spaces.
pub fn inline(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strips trailing whitespace per line and drops leading/trailing blank lines.
fn block(text: &str) -> String {
    let lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    let start = lines.iter().position(|l| !l.is_empty());
    let end = lines.iter().rposition(|l| !l.is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e].join("\n"),
        _ => String::new(),
    }
}

fn list_item(text: &str) -> String {
    inline(text)
}

/// Keywords and ids share a comma-separated front-matter line.
fn csv_item(text: &str) -> String {
    inline(&text.replace(',', " "))
}

fn canonical_pattern(p: &SkillPattern) -> SkillPattern {
    SkillPattern {
        name: inline(&p.name),
        description: inline(&p.description),
        when_to_use: p
            .when_to_use
            .iter()
            .map(|s| list_item(s))
            .filter(|s| !s.is_empty())
            .collect(),
        procedure: p
            .procedure
            .iter()
            .map(|s| list_item(s))
            .filter(|s| !s.is_empty())
            .collect(),
        example: block(&p.example),
    }
}

/// The value `load(write(file))` returns.
pub fn canonicalize(file: &SkillFile) -> SkillFile {
    SkillFile {
        subfield: inline(&file.subfield),
        error_type: file.error_type,
        version: file.version,
        source_question_ids: file
            .source_question_ids
            .iter()
            .map(|s| csv_item(s))
            .filter(|s| !s.is_empty())
            .collect(),
        summary: inline(&file.summary),
        keywords: file
            .keywords
            .iter()
            .map(|s| csv_item(s))
            .filter(|s| !s.is_empty())
            .collect(),
        patterns: file.patterns.iter().map(canonical_pattern).collect(),
    }
}

// ---------------------------------------------------------------------------
// Writers

fn push_line(out: &mut String, line: &str) {
    out.push_str(line.trim_end());
    out.push('\n');
}

fn push_kv(out: &mut String, key: &str, value: &str) {
    if value.is_empty() {
        push_line(out, &format!("{key}:"));
    } else {
        push_line(out, &format!("{key}: {value}"));
    }
}

fn render_patterns(out: &mut String, patterns: &[SkillPattern]) {
    for p in patterns {
        let p = canonical_pattern(p);
        out.push('\n');
        push_line(out, &format!("{PATTERN_PREFIX} {}", p.name));
        out.push('\n');
        push_line(out, &format!("**Addresses:** {}", p.description));
        out.push('\n');
        push_line(out, "**When to use:**");
        for item in &p.when_to_use {
            push_line(out, &format!("- {item}"));
        }
        out.push('\n');
        push_line(out, "**Procedure:**");
        for (i, step) in p.procedure.iter().enumerate() {
            push_line(out, &format!("{}. {step}", i + 1));
        }
        if !p.example.is_empty() {
            out.push('\n');
            push_line(out, "**Example:**");
            out.push('\n');
            for line in p.example.lines() {
                push_line(out, line);
            }
        }
    }
}

/// Full on-disk rendering of a skill file.
pub fn render_skill_file(file: &SkillFile) -> String {
    let f = canonicalize(file);
    let mut out = String::new();
    push_line(&mut out, FRONT_MATTER_FENCE);
    push_kv(&mut out, "subfield", &f.subfield);
    push_kv(&mut out, "error_type", f.error_type.slug());
    push_kv(&mut out, "version", &f.version.to_string());
    let ids: Vec<&str> = f.source_question_ids.iter().map(String::as_str).collect();
    push_kv(&mut out, "source_question_ids", &ids.join(", "));
    push_kv(&mut out, "summary", &f.summary);
    push_kv(&mut out, "keywords", &f.keywords.join(", "));
    push_line(&mut out, FRONT_MATTER_FENCE);
    out.push('\n');
    push_line(
        &mut out,
        &format!("# {} / {}", f.subfield, f.error_type.slug()),
    );
    render_patterns(&mut out, &f.patterns);
    out
}

/// Pattern sections only, as injected into a student prompt.
pub fn render_skill_body(file: &SkillFile) -> String {
    let mut out = String::new();
    render_patterns(&mut out, &file.patterns);
    out.trim_start_matches('\n').to_string()
}

pub fn render_navigation(lib: &SkillLibrary) -> String {
    let mut out = String::new();
    push_line(&mut out, FRONT_MATTER_FENCE);
    push_kv(
        &mut out,
        "library_version",
        &lib.library_version.to_string(),
    );
    push_line(&mut out, FRONT_MATTER_FENCE);
    out.push('\n');
    push_line(&mut out, NAVIGATION_TITLE);
    out.push('\n');
    push_line(&mut out, NAVIGATION_BLURB);
    for entry in &lib.navigation.entries {
        out.push('\n');
        push_line(&mut out, &format!("## {}", inline(&entry.path)));
        let summary = inline(&entry.summary);
        if !summary.is_empty() {
            out.push('\n');
            push_line(&mut out, &summary);
        }
        out.push('\n');
        push_line(&mut out, "**Keywords:**");
        for k in &entry.keywords {
            push_line(&mut out, &format!("- {}", list_item(k)));
        }
        out.push('\n');
        push_line(&mut out, "**Patterns:**");
        for p in &entry.patterns {
            push_line(&mut out, &format!("- {}", list_item(p)));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Readers

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn normalize_newlines(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

/// Front-matter key → (line number, value).
type FrontMatter = BTreeMap<String, (usize, String)>;

/// Splits `---` front matter off. Returns (key/value map with line numbers,
/// index of the first body line).
fn split_front_matter(lines: &[&str]) -> Result<(FrontMatter, usize), ParseError> {
    let first = lines
        .iter()
        .position(|l| !l.trim().is_empty())
        .ok_or_else(|| ParseError::new(1, "empty file"))?;
    if lines[first].trim() != FRONT_MATTER_FENCE {
        return Err(ParseError::new(first + 1, "expected `---` front matter"));
    }
    let mut map = BTreeMap::new();
    for (i, raw) in lines.iter().enumerate().skip(first + 1) {
        let line = raw.trim();
        if line == FRONT_MATTER_FENCE {
            return Ok((map, i + 1));
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| {
            ParseError::new(i + 1, format!("expected `key: value`, got {line:?}"))
        })?;
        map.insert(
            key.trim().to_ascii_lowercase(),
            (i + 1, value.trim().to_string()),
        );
    }
    Err(ParseError::new(lines.len(), "unterminated front matter"))
}

fn split_csv(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn strip_bullet(line: &str) -> Option<&str> {
    let t = line.trim_start();
    t.strip_prefix("- ")
        .or_else(|| t.strip_prefix("* "))
        .or_else(|| t.strip_prefix("+ "))
        .or_else(|| if t == "-" || t == "*" { Some("") } else { None })
}

fn strip_number(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    rest.strip_prefix(". ")
        .or_else(|| rest.strip_prefix(") "))
        .or_else(|| {
            if rest == "." || rest == ")" {
                Some("")
            } else {
                None
            }
        })
}

/// A bold marker such as `**When to use:**`, with the text following it.
fn marker(line: &str) -> Option<(String, &str)> {
    let t = line.trim();
    let rest = t.strip_prefix("**")?;
    let end = rest.find("**")?;
    let raw_label = rest[..end].trim();
    let label = raw_label.trim_end_matches(':').trim().to_ascii_lowercase();
    let mut tail = rest[end + 2..].trim();
    // `**Label**: text` style
    if !raw_label.ends_with(':') {
        tail = tail.strip_prefix(':').unwrap_or(tail).trim();
    }
    Some((label, tail))
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Description,
    WhenToUse,
    Procedure,
    Example,
    Unknown,
}

fn section_for(label: &str) -> Section {
    match label {
        "addresses" | "description" => Section::Description,
        "when to use" | "when_to_use" | "triggers" => Section::WhenToUse,
        "procedure" | "steps" => Section::Procedure,
        "example" | "worked example" | "code template" | "template" => Section::Example,
        _ => Section::Unknown,
    }
}

/// Metadata lines that may precede the first pattern in teacher output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Preamble {
    pub summary: String,
    pub keywords: Vec<String>,
}

/// Parses `## Pattern:` sections starting at `start` (0-based line index).
/// Lines before the first pattern may carry `**Summary:**` / `**Keywords:**`.
pub fn parse_pattern_sections(
    lines: &[&str],
    start: usize,
) -> Result<(Preamble, Vec<SkillPattern>), ParseError> {
    let mut preamble = Preamble::default();
    let mut patterns: Vec<SkillPattern> = Vec::new();
    let mut current: Option<(usize, SkillPattern)> = None;
    let mut section = Section::Unknown;
    let mut example_lines: Vec<&str> = Vec::new();
    let mut in_fence = false;

    fn finish(
        current: &mut Option<(usize, SkillPattern)>,
        example_lines: &mut Vec<&str>,
        patterns: &mut Vec<SkillPattern>,
    ) -> Result<(), ParseError> {
        if let Some((line, mut p)) = current.take() {
            p.example = block(&example_lines.join("\n"));
            example_lines.clear();
            p.description = inline(&p.description);
            if p.name.is_empty() {
                return Err(ParseError::new(line, "pattern without a name"));
            }
            patterns.push(p);
        }
        Ok(())
    }

    for (idx, raw) in lines.iter().enumerate().skip(start) {
        let lineno = idx + 1;
        let trimmed = raw.trim();
        if !in_fence {
            if let Some(name) = trimmed.strip_prefix(PATTERN_PREFIX) {
                finish(&mut current, &mut example_lines, &mut patterns)?;
                let p = SkillPattern {
                    name: inline(name),
                    ..SkillPattern::default()
                };
                current = Some((lineno, p));
                section = Section::Unknown;
                continue;
            }
        }
        let Some((_, pattern)) = current.as_mut() else {
            if let Some((label, tail)) = marker(trimmed) {
                match label.as_str() {
                    "summary" | "scope" => preamble.summary = inline(tail),
                    "keywords" => {
                        preamble.keywords = split_csv(tail).iter().map(|k| inline(k)).collect()
                    }
                    _ => {}
                }
            }
            continue;
        };
        if section == Section::Example {
            if trimmed.starts_with("```") || trimmed.starts_with("~~~") {
                in_fence = !in_fence;
            }
            example_lines.push(raw.trim_end());
            continue;
        }
        if let Some((label, tail)) = marker(trimmed) {
            let next = section_for(&label);
            if next != Section::Unknown {
                section = next;
                match section {
                    Section::Description => pattern.description = tail.to_string(),
                    Section::Example if !tail.is_empty() => example_lines.push(tail),
                    _ => {}
                }
                continue;
            }
        }
        if trimmed.is_empty() {
            continue;
        }
        match section {
            Section::Description => {
                pattern.description.push(' ');
                pattern.description.push_str(trimmed);
            }
            Section::WhenToUse => match strip_bullet(trimmed) {
                Some(item) => pattern.when_to_use.push(inline(item)),
                None => match pattern.when_to_use.last_mut() {
                    Some(last) => {
                        last.push(' ');
                        last.push_str(trimmed);
                    }
                    None => pattern.when_to_use.push(inline(trimmed)),
                },
            },
            Section::Procedure => match strip_number(trimmed).or_else(|| strip_bullet(trimmed)) {
                Some(item) => pattern.procedure.push(inline(item)),
                None => match pattern.procedure.last_mut() {
                    Some(last) => {
                        last.push(' ');
                        last.push_str(trimmed);
                    }
                    None => pattern.procedure.push(inline(trimmed)),
                },
            },
            Section::Example | Section::Unknown => {}
        }
    }
    finish(&mut current, &mut example_lines, &mut patterns)?;
    for p in &mut patterns {
        p.when_to_use.retain(|s| !s.is_empty());
        p.procedure.retain(|s| !s.is_empty());
    }
    Ok((preamble, patterns))
}

/// Parses teacher-authored pattern Markdown (tolerates an outer code fence).
pub fn parse_teacher_patterns(text: &str) -> Result<(Preamble, Vec<SkillPattern>), ParseError> {
    let text = normalize_newlines(text);
    let mut body = text.trim();
    if body.starts_with("```") && body.ends_with("```") && body.len() > 6 {
        let inner = &body[3..body.len() - 3];
        // drop the info string on the opening fence line
        body = inner.split_once('\n').map(|(_, rest)| rest).unwrap_or("");
    }
    let lines: Vec<&str> = body.lines().collect();
    parse_pattern_sections(&lines, 0)
}

pub fn parse_skill_file(text: &str) -> Result<SkillFile, ParseError> {
    let text = normalize_newlines(text);
    let lines: Vec<&str> = text.lines().collect();
    let (fm, body_start) = split_front_matter(&lines)?;
    let required = |key: &str| -> Result<&(usize, String), ParseError> {
        fm.get(key)
            .ok_or_else(|| ParseError::new(1, format!("front matter is missing `{key}`")))
    };
    let (_, subfield) = required("subfield")?;
    if subfield.is_empty() {
        return Err(ParseError::new(1, "empty subfield"));
    }
    let (et_line, et) = required("error_type")?;
    let error_type: ErrorType = et
        .parse()
        .map_err(|e| ParseError::new(*et_line, format!("{e}")))?;
    let (v_line, v) = required("version")?;
    let version: u32 = v
        .parse()
        .map_err(|_| ParseError::new(*v_line, format!("version {v:?} is not an integer")))?;
    let source_question_ids = fm
        .get("source_question_ids")
        .map(|(_, v)| split_csv(v).into_iter().collect())
        .unwrap_or_default();
    let summary = fm
        .get("summary")
        .map(|(_, v)| inline(v))
        .unwrap_or_default();
    let keywords = fm
        .get("keywords")
        .map(|(_, v)| split_csv(v))
        .unwrap_or_default();
    let (_, patterns) = parse_pattern_sections(&lines, body_start)?;
    Ok(SkillFile {
        subfield: subfield.clone(),
        error_type,
        version,
        source_question_ids,
        summary,
        keywords,
        patterns,
    })
}

pub fn parse_navigation(text: &str) -> Result<(u32, NavigationIndex), ParseError> {
    let text = normalize_newlines(text);
    let lines: Vec<&str> = text.lines().collect();
    let (fm, body_start) = split_front_matter(&lines)?;
    let (v_line, v) = fm
        .get("library_version")
        .ok_or_else(|| ParseError::new(1, "front matter is missing `library_version`"))?;
    let library_version: u32 = v.parse().map_err(|_| {
        ParseError::new(*v_line, format!("library_version {v:?} is not an integer"))
    })?;

    #[derive(PartialEq)]
    enum Part {
        Summary,
        Keywords,
        Patterns,
    }
    let mut entries: Vec<NavigationEntry> = Vec::new();
    let mut part = Part::Summary;
    for (idx, raw) in lines.iter().enumerate().skip(body_start) {
        let t = raw.trim();
        if let Some(path) = t.strip_prefix("## ") {
            entries.push(NavigationEntry {
                path: path.trim().to_string(),
                ..NavigationEntry::default()
            });
            part = Part::Summary;
            continue;
        }
        let Some(entry) = entries.last_mut() else {
            continue;
        };
        if t.is_empty() {
            continue;
        }
        if let Some((label, _)) = marker(t) {
            match label.as_str() {
                "keywords" => {
                    part = Part::Keywords;
                    continue;
                }
                "patterns" => {
                    part = Part::Patterns;
                    continue;
                }
                _ => {}
            }
        }
        match part {
            Part::Summary => {
                if !entry.summary.is_empty() {
                    entry.summary.push(' ');
                }
                entry.summary.push_str(t);
            }
            Part::Keywords | Part::Patterns => {
                let item = strip_bullet(t).ok_or_else(|| {
                    ParseError::new(idx + 1, format!("expected a `- ` bullet, got {t:?}"))
                })?;
                let list = if part == Part::Keywords {
                    &mut entry.keywords
                } else {
                    &mut entry.patterns
                };
                list.push(inline(item));
            }
        }
    }
    Ok((library_version, NavigationIndex { entries }))
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    DanglingReference,
    UnlistedFile,
    DuplicateEntry,
    EmptyKeywords,
    StaleEntry,
    PathMismatch,
    NotTwoLevel,
    NoPatterns,
    DuplicatePattern,
    EmptyProcedure,
    InvalidVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.path, self.kind, self.detail)
    }
}

/// Checks every library and navigation invariant. Empty means well-formed.
pub fn validate_library(lib: &SkillLibrary) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |path: &str, kind, detail: String| {
        out.push(Violation {
            path: path.to_string(),
            kind,
            detail,
        })
    };

    for (path, file) in &lib.files {
        let segments: Vec<&str> = path.split('/').collect();
        if segments.len() != 2 || segments.iter().any(|s| s.is_empty()) || !path.ends_with(".md") {
            v(
                path,
                ViolationKind::NotTwoLevel,
                "expected `<subfield>/<error_type>.md`".into(),
            );
        }
        match slug_path(&file.subfield, file.error_type) {
            Ok(expected) if expected == *path => {}
            Ok(expected) => v(
                path,
                ViolationKind::PathMismatch,
                format!("contents map to {expected}"),
            ),
            Err(e) => v(path, ViolationKind::PathMismatch, e.to_string()),
        }
        if file.version == 0 {
            v(
                path,
                ViolationKind::InvalidVersion,
                "version must be >= 1".into(),
            );
        }
        if file.patterns.is_empty() {
            v(
                path,
                ViolationKind::NoPatterns,
                "file has no patterns".into(),
            );
        }
        let mut names = BTreeSet::new();
        for p in &file.patterns {
            if !names.insert(p.name.trim().to_lowercase()) {
                v(
                    path,
                    ViolationKind::DuplicatePattern,
                    format!("pattern {:?} repeated", p.name),
                );
            }
            if p.procedure.is_empty() {
                v(
                    path,
                    ViolationKind::EmptyProcedure,
                    format!("pattern {:?} has no steps", p.name),
                );
            }
        }
    }

    let mut listed = BTreeSet::new();
    for entry in &lib.navigation.entries {
        if !listed.insert(entry.path.as_str()) {
            v(
                &entry.path,
                ViolationKind::DuplicateEntry,
                "listed more than once".into(),
            );
        }
        if entry.keywords.is_empty() {
            v(
                &entry.path,
                ViolationKind::EmptyKeywords,
                "entry has no keywords".into(),
            );
        }
        match lib.files.get(&entry.path) {
            None => v(
                &entry.path,
                ViolationKind::DanglingReference,
                "navigation points at a missing file".into(),
            ),
            Some(file) => {
                let names: Vec<String> = file.patterns.iter().map(|p| inline(&p.name)).collect();
                let listed: Vec<String> = entry.patterns.iter().map(|p| inline(p)).collect();
                if names != listed {
                    v(
                        &entry.path,
                        ViolationKind::StaleEntry,
                        "pattern list disagrees with the file".into(),
                    );
                }
            }
        }
    }
    for path in lib.files.keys() {
        if !listed.contains(path.as_str()) {
            v(
                path,
                ViolationKind::UnlistedFile,
                "file missing from navigation".into(),
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Directory I/O

/// Writes the library under `dir`. Stale `*/*.md` files from an earlier write
/// are removed so the directory mirrors the library exactly.
pub fn write_library(lib: &SkillLibrary, dir: &Path) -> Result<(), LibraryError> {
    let violations = validate_library(lib);
    if !violations.is_empty() {
        let joined: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(LibraryError::Invalid(joined.join("; ")));
    }
    fs::create_dir_all(dir).map_err(|e| LibraryError::io(dir, e))?;
    for existing in list_skill_paths(dir)? {
        if !lib.files.contains_key(&existing) {
            let p = dir.join(&existing);
            fs::remove_file(&p).map_err(|e| LibraryError::io(&p, e))?;
            if let Some(parent) = p.parent() {
                // only succeeds when empty
                let _ = fs::remove_dir(parent);
            }
        }
    }
    for (rel, file) in &lib.files {
        let p = dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| LibraryError::io(parent, e))?;
        }
        fs::write(&p, render_skill_file(file)).map_err(|e| LibraryError::io(&p, e))?;
    }
    let nav = dir.join(NAVIGATION_FILE);
    fs::write(&nav, render_navigation(lib)).map_err(|e| LibraryError::io(&nav, e))?;
    Ok(())
}

fn list_skill_paths(dir: &Path) -> Result<Vec<String>, LibraryError> {
    let mut out = Vec::new();
    let read = fs::read_dir(dir).map_err(|e| LibraryError::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| LibraryError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with('.') {
            continue;
        }
        let ft = entry
            .file_type()
            .map_err(|e| LibraryError::io(entry.path(), e))?;
        if ft.is_dir() {
            subdirs.push(entry.path());
        }
    }
    subdirs.sort();
    for sub in subdirs {
        let sub_name = sub
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        let read = fs::read_dir(&sub).map_err(|e| LibraryError::io(&sub, e))?;
        for entry in read {
            let entry = entry.map_err(|e| LibraryError::io(&sub, e))?;
            let name = entry.file_name().to_string_lossy().to_string();
            let ft = entry
                .file_type()
                .map_err(|e| LibraryError::io(entry.path(), e))?;
            if ft.is_dir() && !name.starts_with('.') {
                return Err(LibraryError::Layout {
                    path: entry.path(),
                    message: "skill libraries are two levels deep".into(),
                });
            }
            if ft.is_file() && name.ends_with(".md") {
                out.push(format!("{sub_name}/{name}"));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_library(dir: &Path) -> Result<SkillLibrary, LibraryError> {
    let nav_path = dir.join(NAVIGATION_FILE);
    if !nav_path.is_file() {
        return Err(LibraryError::Layout {
            path: dir.to_path_buf(),
            message: format!("missing {NAVIGATION_FILE}"),
        });
    }
    let nav_text = fs::read_to_string(&nav_path).map_err(|e| LibraryError::io(&nav_path, e))?;
    let (library_version, navigation) =
        parse_navigation(&nav_text).map_err(|e| LibraryError::Format {
            path: nav_path.clone(),
            line: e.line,
            message: e.message,
        })?;
    let mut files = BTreeMap::new();
    for rel in list_skill_paths(dir)? {
        let p = dir.join(&rel);
        let text = fs::read_to_string(&p).map_err(|e| LibraryError::io(&p, e))?;
        let file = parse_skill_file(&text).map_err(|e| LibraryError::Format {
            path: p.clone(),
            line: e.line,
            message: e.message,
        })?;
        files.insert(rel, file);
    }
    Ok(SkillLibrary {
        files,
        navigation,
        library_version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warmup::build_navigation;

    fn pattern(name: &str) -> SkillPattern {
        SkillPattern {
            name: name.into(),
            description: "Composes forward rates".into(),
            when_to_use: vec!["pricing with a forward curve".into()],
            procedure: vec!["list the rates".into(), "multiply discount factors".into()],
            example: "```python\nr1 = 0.05\n100 / (1 + r1)\n```".into(),
        }
    }

    fn file(subfield: &str, et: ErrorType, names: &[&str]) -> SkillFile {
        SkillFile {
            subfield: subfield.into(),
            error_type: et,
            version: 1,
            source_question_ids: ["q1".to_string(), "q2".to_string()].into_iter().collect(),
            summary: "Forward rate handling".into(),
            keywords: vec!["forward rates".into()],
            patterns: names.iter().map(|n| pattern(n)).collect(),
        }
    }

    fn two_file_library() -> SkillLibrary {
        let mut lib = SkillLibrary {
            library_version: 1,
            ..SkillLibrary::default()
        };
        for f in [
            file(
                "fixed_income",
                ErrorType::WrongMethodSelection,
                &["Forward composition"],
            ),
            file(
                "common",
                ErrorType::WrongOutputFormat,
                &["Bare label", "Units"],
            ),
        ] {
            lib.files.insert(f.path().unwrap(), f);
        }
        lib.navigation = build_navigation(lib.files.values());
        lib
    }

    #[test]
    fn skill_file_rendering_is_exact() {
        let f = file(
            "fixed_income",
            ErrorType::WrongMethodSelection,
            &["Forward composition"],
        );
        let expected = "---
subfield: fixed_income
error_type: wrong_method_selection
version: 1
source_question_ids: q1, q2
summary: Forward rate handling
keywords: forward rates
---

# fixed_income / wrong_method_selection

## Pattern: Forward composition

**Addresses:** Composes forward rates

**When to use:**
- pricing with a forward curve

**Procedure:**
1. list the rates
2. multiply discount factors

**Example:**

```python
r1 = 0.05
100 / (1 + r1)
```
";
        assert_eq!(render_skill_file(&f), expected);
        assert_eq!(parse_skill_file(expected).unwrap(), f);
    }

    #[test]
    fn well_formed_library_has_no_violations() {
        assert!(validate_library(&two_file_library()).is_empty());
    }

    #[test]
    fn dangling_navigation_entry() {
        let mut lib = two_file_library();
        lib.files.remove("common/wrong_output_format.md");
        let v = validate_library(&lib);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DanglingReference);
        assert_eq!(v[0].path, "common/wrong_output_format.md");
    }

    #[test]
    fn unlisted_file() {
        let mut lib = two_file_library();
        lib.navigation
            .entries
            .retain(|e| e.path != "common/wrong_output_format.md");
        let v = validate_library(&lib);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::UnlistedFile);
    }

    #[test]
    fn empty_library_navigation_is_header_only() {
        let lib = SkillLibrary::default();
        let text = render_navigation(&lib);
        assert_eq!(
            text,
            format!("---\nlibrary_version: 0\n---\n\n{NAVIGATION_TITLE}\n\n{NAVIGATION_BLURB}\n")
        );
        let (v, nav) = parse_navigation(&text).unwrap();
        assert_eq!(v, 0);
        assert!(nav.entries.is_empty());
    }

    #[test]
    fn tolerant_reader_accepts_crlf_and_loose_spacing() {
        let text = "\r\n---\r\nsubfield:  derivatives \r\nerror_type: concept_confusion\r\nversion: 2\r\nextra: ignored\r\n---\r\n## Pattern: Put-call parity\r\n**Addresses:** parity\r\nacross lines\r\n**When to use:**\r\n* options pricing\r\n**Procedure:**\r\n1) write parity\r\n2) solve\r\n";
        let f = parse_skill_file(text).unwrap();
        assert_eq!(f.subfield, "derivatives");
        assert_eq!(f.version, 2);
        assert_eq!(f.patterns.len(), 1);
        assert_eq!(f.patterns[0].description, "parity across lines");
        assert_eq!(f.patterns[0].when_to_use, vec!["options pricing"]);
        assert_eq!(f.patterns[0].procedure, vec!["write parity", "solve"]);
    }

    #[test]
    fn reader_rejects_bad_front_matter() {
        let err =
            parse_skill_file("---\nsubfield: x\nerror_type: nope\nversion: 1\n---\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(parse_skill_file("no front matter").is_err());
        assert!(parse_skill_file("---\nsubfield: x\n").is_err());
        assert!(
            parse_skill_file("---\nsubfield: x\nerror_type: other\nversion: one\n---\n").is_err()
        );
    }

    #[test]
    fn pattern_heading_inside_example_fence_is_kept() {
        let mut f = file("x", ErrorType::Other, &["A"]);
        f.patterns[0].example = "```\n## Pattern: not a heading\n```".into();
        let back = parse_skill_file(&render_skill_file(&f)).unwrap();
        assert_eq!(back.patterns.len(), 1);
        assert_eq!(back.patterns[0].example, f.patterns[0].example);
    }

    #[test]
    fn directory_round_trip_and_missing_navigation() {
        let dir = tempfile::tempdir().unwrap();
        let lib = two_file_library();
        write_library(&lib, dir.path()).unwrap();
        let back = load_library(dir.path()).unwrap();
        assert_eq!(back, lib);

        fs::remove_file(dir.path().join(NAVIGATION_FILE)).unwrap();
        assert!(matches!(
            load_library(dir.path()),
            Err(LibraryError::Layout { .. })
        ));
    }

    #[test]
    fn corrupted_front_matter_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_library(&two_file_library(), dir.path()).unwrap();
        let target = dir.path().join("fixed_income/wrong_method_selection.md");
        let text = fs::read_to_string(&target)
            .unwrap()
            .replace("version: 1", "version: x");
        fs::write(&target, text).unwrap();
        let err = load_library(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains("fixed_income/wrong_method_selection.md"),
            "{err}"
        );
        assert!(err.contains(":4:"), "{err}");
    }

    #[test]
    fn write_refuses_invalid_library() {
        let mut lib = two_file_library();
        lib.navigation.entries.clear();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_library(&lib, dir.path()),
            Err(LibraryError::Invalid(_))
        ));
    }

    #[test]
    fn rewrite_removes_stale_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut lib = two_file_library();
        write_library(&lib, dir.path()).unwrap();
        lib.files.remove("common/wrong_output_format.md");
        lib.navigation = build_navigation(lib.files.values());
        write_library(&lib, dir.path()).unwrap();
        assert!(!dir.path().join("common").exists());
        assert_eq!(load_library(dir.path()).unwrap(), lib);
    }

    proptest::proptest! {
        #[test]
        fn write_load_write_is_stable(
            name in "[A-Za-z][A-Za-z0-9 ,()-]{0,20}",
            desc in "[ -~\n]{0,40}",
            steps in proptest::collection::vec("[ -~]{0,30}", 1..4),
            triggers in proptest::collection::vec("[ -~\n]{0,30}", 0..3),
            example in "[a-z0-9 =+*\n]{0,40}",
            ids in proptest::collection::btree_set("[a-z0-9_ ,-]{1,6}", 0..4),
        ) {
            let steps: Vec<String> = steps.into_iter().map(|s| format!("s {s}")).collect();
            let f = SkillFile {
                subfield: "fixed_income".into(),
                error_type: ErrorType::Other,
                version: 3,
                source_question_ids: ids,
                summary: desc.clone(),
                keywords: vec![desc.clone()],
                patterns: vec![SkillPattern {
                    name,
                    description: desc,
                    when_to_use: triggers,
                    procedure: steps,
                    example,
                }],
            };
            let once = render_skill_file(&f);
            let loaded = parse_skill_file(&once).unwrap();
            proptest::prop_assert_eq!(&loaded, &canonicalize(&f));
            proptest::prop_assert_eq!(render_skill_file(&loaded), once);
        }
    }
}

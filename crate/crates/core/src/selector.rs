//! Inference-time choice of skill files and assembly of the injected text.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::InvalidArgument;
use crate::eval::prompt::render_skill_sections;
use crate::gateway::{CompletionRequest, Gateway, Role};
use crate::library::render_navigation;
use crate::model::{slugify, Question, SkillFile, SkillLibrary, COMMON_SCOPE};

pub const DEFAULT_MAX_FILES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Every file of one subfield plus all `common/` files.
    #[default]
    Bundle,
    /// An explicit list of paths named by the selector.
    PerFile,
}

impl std::str::FromStr for SelectionMode {
    type Err = InvalidArgument;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "bundle" => Ok(SelectionMode::Bundle),
            "per_file" => Ok(SelectionMode::PerFile),
            other => Err(InvalidArgument(format!("unknown selection mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorSettings {
    pub mode: SelectionMode,
    pub max_files: usize,
}

impl Default for SelectorSettings {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Bundle,
            max_files: DEFAULT_MAX_FILES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub mode: SelectionMode,
    pub paths: Vec<String>,
    /// Why the selection is empty or shorter than asked, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issue: Option<String>,
}

const SELECTOR_SYSTEM_PROMPT: &str =
    "You route finance exam questions to skill files. You only see the skill navigation table, never the files themselves.";

fn bundle_prompt(q: &Question, lib: &SkillLibrary) -> String {
    format!(
        "{}\nAvailable subfields: {}\n\nQuestion:\n{}\n\nName the single subfield whose skills best match this question. Reply with one line of the form `SUBFIELD: <name>`.",
        render_navigation(lib),
        lib.subfields().join(", "),
        q.text.trim()
    )
}

fn per_file_prompt(q: &Question, lib: &SkillLibrary) -> String {
    format!(
        "{}\nQuestion:\n{}\n\nList the skill file paths (as written in the headings above) that would help answer this question, one per line. Reply with an empty list if none apply.",
        render_navigation(lib),
        q.text.trim()
    )
}

pub(crate) fn path_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[a-z0-9_]+/[a-z0-9_]+\.md").expect("valid regex"))
}

/// Subfield named in a selector reply, if it is one the library has.
pub fn parse_subfield(reply: &str, lib: &SkillLibrary) -> Option<String> {
    let known = lib.subfields();
    let candidates = reply
        .lines()
        .rev()
        .filter_map(|l| {
            let upper = l.to_ascii_uppercase();
            upper
                .find("SUBFIELD:")
                .map(|i| l[i + "SUBFIELD:".len()..].to_string())
        })
        .chain(std::iter::once(reply.to_string()));
    for raw in candidates {
        let cleaned = raw.trim().trim_matches(['`', '*', '"', '\'', '.']);
        if let Ok(slug) = slugify(cleaned) {
            if known.contains(&slug) {
                return Some(slug);
            }
        }
    }
    None
}

/// Orders paths by navigation position and truncates to `max_files`.
fn cap_in_navigation_order(
    mut paths: Vec<String>,
    lib: &SkillLibrary,
    max_files: usize,
) -> Vec<String> {
    paths.sort_by_key(|p| lib.navigation.position(p).unwrap_or(usize::MAX));
    paths.dedup();
    paths.truncate(max_files);
    paths
}

/// Chooses the skill files to inject for `q`. Never fails: problems yield an
/// empty selection with `issue` set.
pub fn select_skills(
    gateway: &Gateway,
    q: &Question,
    lib: &SkillLibrary,
    settings: &SelectorSettings,
) -> Selection {
    let mut selection = Selection {
        mode: settings.mode,
        ..Selection::default()
    };
    if lib.is_empty() {
        return selection;
    }
    let user = match settings.mode {
        SelectionMode::Bundle => bundle_prompt(q, lib),
        SelectionMode::PerFile => per_file_prompt(q, lib),
    };
    let req = CompletionRequest::new(Role::Selector, SELECTOR_SYSTEM_PROMPT, user);
    let reply = match gateway.complete(&req) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(question = %q.id, error = %e, "selector call failed");
            selection.issue = Some(format!("selector call failed: {e}"));
            return selection;
        }
    };
    let chosen = match settings.mode {
        SelectionMode::Bundle => {
            let Some(subfield) = parse_subfield(&reply, lib) else {
                tracing::warn!(question = %q.id, "selector reply names no known subfield");
                selection.issue = Some("selector-parse-failure: no known subfield in reply".into());
                return selection;
            };
            lib.files
                .iter()
                .filter(|(_, f)| f.subfield == subfield || f.subfield == COMMON_SCOPE)
                .map(|(p, _)| p.clone())
                .collect::<Vec<_>>()
        }
        SelectionMode::PerFile => {
            let named: BTreeSet<&str> = path_re().find_iter(&reply).map(|m| m.as_str()).collect();
            let (known, unknown): (Vec<&str>, Vec<&str>) =
                named.into_iter().partition(|p| lib.files.contains_key(*p));
            if !unknown.is_empty() {
                tracing::info!(question = %q.id, dropped = ?unknown, "selector named unknown paths");
                selection.issue = Some(format!("dropped unknown paths: {}", unknown.join(", ")));
            }
            if known.is_empty()
                && unknown.is_empty()
                && !reply.trim().is_empty()
                && !looks_empty(&reply)
            {
                selection.issue = Some("selector-parse-failure: no paths in reply".into());
            }
            known.into_iter().map(str::to_string).collect()
        }
    };
    let total = chosen.len();
    selection.paths = cap_in_navigation_order(chosen, lib, settings.max_files);
    if selection.paths.len() < total {
        tracing::debug!(question = %q.id, total, kept = selection.paths.len(), "selection capped");
    }
    selection
}

fn looks_empty(reply: &str) -> bool {
    let t = reply.trim().to_ascii_lowercase();
    t == "[]" || t == "none" || t.contains("no skill") || t.contains("empty list")
}

/// Resolves paths to files in navigation order.
pub fn resolve_paths<'a>(
    paths: &[String],
    lib: &'a SkillLibrary,
) -> Result<Vec<(&'a str, &'a SkillFile)>, InvalidArgument> {
    let mut resolved = Vec::with_capacity(paths.len());
    for p in paths {
        let (key, file) = lib
            .files
            .get_key_value(p.as_str())
            .ok_or_else(|| InvalidArgument(format!("selected path {p:?} is not in the library")))?;
        resolved.push((key.as_str(), file));
    }
    resolved.sort_by_key(|(p, _)| (lib.navigation.position(p).unwrap_or(usize::MAX), *p));
    resolved.dedup_by_key(|(p, _)| *p);
    Ok(resolved)
}

/// Concatenated `# Skill: <path>` sections in navigation order.
pub fn render_injection(paths: &[String], lib: &SkillLibrary) -> Result<String, InvalidArgument> {
    Ok(render_skill_sections(resolve_paths(paths, lib)?))
}

//! Deterministic scripted backend.
//!
//! Rules are tried in declaration order; the first whose matchers all hold
//! answers the call. Rules file syntax:
//!
//! ```text
//! # comment
//! === rule
//! role: student
//! contains: forward rates
//! absent: # Skill:
//! once
//! --- response
//! B
//! === default
//! --- response
//! UNKNOWN
//! ```
//!
//! A response runs until the next line starting with `=== ` (trailing blank
//! lines dropped). A response line
//! that itself must start with `=== ` is written as `\=== `.

use std::path::Path;
use std::sync::Mutex;

use super::{fingerprint, Backend, BackendError, CompletionRequest, Role};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockRule {
    pub role: Option<Role>,
    pub fingerprint: Option<String>,
    /// Every substring must occur in the system or user prompt.
    pub contains: Vec<String>,
    /// No substring may occur.
    pub absent: Vec<String>,
    pub once: bool,
    pub response: String,
}

impl MockRule {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn contains(needle: impl Into<String>) -> Self {
        Self::any().and(needle)
    }

    pub fn role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn and(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn absent(mut self, needle: impl Into<String>) -> Self {
        self.absent.push(needle.into());
        self
    }

    pub fn fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.fingerprint = Some(fp.into());
        self
    }

    pub fn once(mut self) -> Self {
        self.once = true;
        self
    }

    pub fn respond(mut self, response: impl Into<String>) -> Self {
        self.response = response.into();
        self
    }

    fn matches(&self, req: &CompletionRequest) -> bool {
        if self.role.is_some_and(|r| r != req.role) {
            return false;
        }
        if let Some(fp) = &self.fingerprint {
            if *fp != fingerprint(req.role, &req.system_prompt, &req.user_prompt) {
                return false;
            }
        }
        let hit = |n: &String| {
            req.system_prompt.contains(n.as_str()) || req.user_prompt.contains(n.as_str())
        };
        self.contains.iter().all(hit) && !self.absent.iter().any(hit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub default: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("mock script line {line}: {message}")]
pub struct MockScriptError {
    pub line: usize,
    pub message: String,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn default_response(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }

    /// Appends another script's rules after this one's; its default applies
    /// only if this script has none.
    pub fn extend(mut self, other: MockScript) -> Self {
        self.rules.extend(other.rules);
        if self.default.is_none() {
            self.default = other.default;
        }
        self
    }

    pub fn load(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| MockScriptError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, MockScriptError> {
        enum Block {
            Rule(MockRule),
            Default,
        }
        let mut script = MockScript::new();
        let mut block: Option<Block> = None;
        let mut response: Option<Vec<String>> = None;

        let flush = |script: &mut MockScript,
                     block: Option<Block>,
                     response: Option<Vec<String>>,
                     line: usize| {
            let Some(block) = block else { return Ok(()) };
            let Some(mut lines) = response else {
                return Err(MockScriptError {
                    line,
                    message: "block has no `--- response` section".into(),
                });
            };
            while lines.last().is_some_and(|l| l.trim().is_empty()) {
                lines.pop();
            }
            let body = lines.join("\n");
            match block {
                Block::Rule(mut r) => {
                    r.response = body;
                    script.rules.push(r);
                }
                Block::Default => script.default = Some(body),
            }
            Ok(())
        };

        let text = text.replace("\r\n", "\n");
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            if let Some(kind) = raw.strip_prefix("=== ") {
                flush(&mut script, block.take(), response.take(), lineno)?;
                block = Some(match kind.trim() {
                    "rule" => Block::Rule(MockRule::any()),
                    "default" => Block::Default,
                    other => {
                        return Err(MockScriptError {
                            line: lineno,
                            message: format!("unknown block kind {other:?}"),
                        })
                    }
                });
                continue;
            }
            if let Some(lines) = response.as_mut() {
                let line = raw
                    .strip_prefix('\\')
                    .filter(|r| r.starts_with("=== "))
                    .unwrap_or(raw);
                lines.push(line.to_string());
                continue;
            }
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let Some(current) = block.as_mut() else {
                return Err(MockScriptError {
                    line: lineno,
                    message: "content outside a `=== rule` or `=== default` block".into(),
                });
            };
            if t == "--- response" {
                response = Some(Vec::new());
                continue;
            }
            let Block::Rule(rule) = current else {
                return Err(MockScriptError {
                    line: lineno,
                    message: "default blocks take only a response".into(),
                });
            };
            if t == "once" {
                rule.once = true;
                continue;
            }
            let (key, _) = t.split_once(':').ok_or_else(|| MockScriptError {
                line: lineno,
                message: format!("expected `key: value`, got {t:?}"),
            })?;
            // keep the value verbatim apart from the single separating space
            let value = raw.split_once(':').map(|(_, v)| v).unwrap_or_default();
            let value = value
                .strip_prefix(' ')
                .unwrap_or(value)
                .trim_end()
                .to_string();
            match key.trim() {
                "role" => {
                    rule.role = Some(value.parse().map_err(|m| MockScriptError {
                        line: lineno,
                        message: m,
                    })?)
                }
                "contains" => rule.contains.push(value),
                "absent" => rule.absent.push(value),
                "fingerprint" => rule.fingerprint = Some(value.trim().to_string()),
                other => {
                    return Err(MockScriptError {
                        line: lineno,
                        message: format!("unknown rule key {other:?}"),
                    })
                }
            }
        }
        let end = text.lines().count();
        flush(&mut script, block.take(), response.take(), end)?;
        Ok(script)
    }
}

/// Serves completions from a [`MockScript`].
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    consumed: Mutex<Vec<bool>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let consumed = Mutex::new(vec![false; script.rules.len()]);
        Self { script, consumed }
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut consumed = self.consumed.lock().expect("mock state poisoned");
        for (i, rule) in self.script.rules.iter().enumerate() {
            if consumed[i] || !rule.matches(req) {
                continue;
            }
            if rule.once {
                consumed[i] = true;
            }
            return Ok(rule.response.clone());
        }
        self.script.default.clone().ok_or_else(|| {
            BackendError::Fatal(format!(
                "no mock rule matched {} request {}",
                req.role,
                &req.fingerprint()[..12]
            ))
        })
    }
}

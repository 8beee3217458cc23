//! Run configuration: one TOML file with a table per role and per stage.
//!
//! ```toml
//! seed = 0
//!
//! [roles.student]
//! backend = "http-chat"
//! endpoint = "https://api.example.com/v1/chat/completions"
//! model = "small-model"
//! api_key_env = "EXAMPLE_API_KEY"
//! requests_per_minute = 60
//!
//! [roles.teacher]
//! use_role = "student"   # self-teaching: share the student's backend
//!
//! [refine]
//! tau_cov = 0.5
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::eval::pot::{PotExecutor, ProtocolExecutor, StubSandbox, SubprocessSandbox};
use crate::eval::EvalSettings;
use crate::gateway::{
    Backend, Gateway, HttpChatBackend, HttpChatConfig, MockBackend, MockScript, RateLimiter,
    RetryPolicy, Role, RoleBinding, DEFAULT_MAX_TOKENS,
};
use crate::model::digest_hex;
use crate::refinement::RefinementConfig;
use crate::selector::{SelectionMode, SelectorSettings, DEFAULT_MAX_FILES};
use crate::warmup::WarmupSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub backend: Option<BackendKind>,
    /// Reuse another role's backend instance.
    pub use_role: Option<Role>,
    pub mock_script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub headers: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub system_top_level: bool,
    pub timeout_secs: Option<u64>,
    pub requests_per_minute: Option<f64>,
    pub burst: Option<u32>,
    /// Total attempts per call.
    pub max_attempts: Option<u32>,
    pub base_delay_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub structured_retry_cap: u32,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            structured_retry_cap: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub workers: usize,
    pub max_tokens: u32,
    pub mapper_role: Option<Role>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            workers: 4,
            max_tokens: DEFAULT_MAX_TOKENS,
            mapper_role: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorSection {
    pub mode: SelectionMode,
    pub max_files: usize,
}

impl Default for SelectorSection {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Bundle,
            max_files: DEFAULT_MAX_FILES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupSection {
    pub min_cluster_size: usize,
}

impl Default for WarmupSection {
    fn default() -> Self {
        Self {
            min_cluster_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub iterations: u32,
    pub tau_cov: f64,
    pub tau_safe_retain: f64,
    pub n_max: u32,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefinementConfig::default();
        Self {
            iterations: d.iterations,
            tau_cov: d.tau_cov,
            tau_safe_retain: d.tau_safe_retain,
            n_max: d.n_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotSection {
    /// JSON table of program text → result.
    pub stub_table: Option<PathBuf>,
    /// Sandbox program and arguments; `--serve` is appended.
    pub command: Option<Vec<String>>,
    pub timeout_ms: u64,
    pub grace_ms: u64,
}

impl Default for PotSection {
    fn default() -> Self {
        Self {
            stub_table: None,
            command: None,
            timeout_ms: 10_000,
            grace_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub roles: BTreeMap<Role, RoleConfig>,
    pub gateway: GatewaySection,
    pub eval: EvalSection,
    pub selector: SelectorSection,
    pub warmup: WarmupSection,
    pub refine: RefineSection,
    pub pot: PotSection,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Loads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for role in cfg.roles.values_mut() {
            if let Some(s) = &role.mock_script {
                role.mock_script = Some(resolve(base, s));
            }
        }
        if let Some(t) = &cfg.pot.stub_table {
            cfg.pot.stub_table = Some(resolve(base, t));
        }
        Ok(cfg)
    }

    /// Points every role at one mock script, replacing earlier role tables.
    pub fn use_mock_script(&mut self, script: &Path) {
        self.roles.clear();
        self.roles.insert(
            Role::Student,
            RoleConfig {
                backend: Some(BackendKind::Mock),
                mock_script: Some(script.to_path_buf()),
                ..RoleConfig::default()
            },
        );
        for role in [Role::Teacher, Role::Judge, Role::Selector] {
            self.roles.insert(
                role,
                RoleConfig {
                    use_role: Some(Role::Student),
                    ..RoleConfig::default()
                },
            );
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.refinement()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.0))?;
        if self.selector.max_files == 0 {
            return Err(ConfigError::Invalid(
                "selector.max_files must be at least 1".into(),
            ));
        }
        if self.eval.workers == 0 {
            return Err(ConfigError::Invalid(
                "eval.workers must be at least 1".into(),
            ));
        }
        if self.pot.stub_table.is_some() && self.pot.command.is_some() {
            return Err(ConfigError::Invalid(
                "pot: set either stub_table or command, not both".into(),
            ));
        }
        if self.pot.command.as_ref().is_some_and(Vec::is_empty) {
            return Err(ConfigError::Invalid("pot.command must not be empty".into()));
        }
        for (role, rc) in &self.roles {
            match (rc.use_role, rc.backend) {
                (Some(other), _) => {
                    if other == *role {
                        return Err(ConfigError::Invalid(format!(
                            "roles.{role}: use_role points at itself"
                        )));
                    }
                    let target = self.roles.get(&other).ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "roles.{role}: use_role {other} is not configured"
                        ))
                    })?;
                    if target.use_role.is_some() {
                        return Err(ConfigError::Invalid(format!(
                            "roles.{role}: use_role must name a role with its own backend"
                        )));
                    }
                }
                (None, None) => {
                    return Err(ConfigError::Invalid(format!(
                        "roles.{role}: backend or use_role required"
                    )))
                }
                (None, Some(BackendKind::Mock)) if rc.mock_script.is_none() => {
                    return Err(ConfigError::Invalid(format!(
                        "roles.{role}: mock backend needs mock_script"
                    )))
                }
                (None, Some(BackendKind::HttpChat))
                    if rc.endpoint.is_none() || rc.model.is_none() =>
                {
                    return Err(ConfigError::Invalid(format!(
                        "roles.{role}: http-chat backend needs endpoint and model"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn refinement(&self) -> RefinementConfig {
        RefinementConfig {
            iterations: self.refine.iterations,
            tau_cov: self.refine.tau_cov,
            tau_safe_retain: self.refine.tau_safe_retain,
            n_max: self.refine.n_max,
            seed: self.seed,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            max_tokens: self.eval.max_tokens,
            workers: self.eval.workers,
            mapper_role: self.eval.mapper_role,
        }
    }

    pub fn selector_settings(&self) -> SelectorSettings {
        SelectorSettings {
            mode: self.selector.mode,
            max_files: self.selector.max_files,
        }
    }

    pub fn warmup_settings(&self) -> WarmupSettings {
        WarmupSettings {
            min_cluster_size: self.warmup.min_cluster_size,
        }
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_hex(serde_json::to_string(self).expect("config serializes"))
    }

    fn backend_for(&self, role: Role, rc: &RoleConfig) -> Result<Arc<dyn Backend>, ConfigError> {
        match rc.backend {
            Some(BackendKind::Mock) => {
                let path = rc.mock_script.as_ref().expect("validated");
                let script = MockScript::load(path).map_err(|e| ConfigError::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                Ok(Arc::new(MockBackend::new(script)))
            }
            Some(BackendKind::HttpChat) => {
                let http = HttpChatConfig {
                    endpoint: rc.endpoint.clone().expect("validated"),
                    model: rc.model.clone().expect("validated"),
                    api_key_env: rc.api_key_env.clone(),
                    headers: rc
                        .headers
                        .clone()
                        .unwrap_or_else(HttpChatConfig::default_headers),
                    system_top_level: rc.system_top_level,
                    timeout_secs: rc.timeout_secs.unwrap_or(120),
                };
                let backend = HttpChatBackend::new(http)
                    .map_err(|e| ConfigError::Invalid(format!("roles.{role}: {e}")))?;
                Ok(Arc::new(backend))
            }
            None => unreachable!("validated"),
        }
    }

    /// Builds a gateway with every configured role bound.
    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        self.validate()?;
        let mut backends: BTreeMap<Role, Arc<dyn Backend>> = BTreeMap::new();
        for (role, rc) in &self.roles {
            if rc.use_role.is_none() {
                backends.insert(*role, self.backend_for(*role, rc)?);
            }
        }
        let mut gateway =
            Gateway::new().with_structured_retry_cap(self.gateway.structured_retry_cap);
        for (role, rc) in &self.roles {
            let source = rc.use_role.unwrap_or(*role);
            let backend = backends[&source].clone();
            let own = if rc.use_role.is_some() {
                &self.roles[&source]
            } else {
                rc
            };
            let mock = own.backend == Some(BackendKind::Mock);
            let mut retry = if mock {
                RetryPolicy::immediate(1)
            } else {
                RetryPolicy::default()
            };
            if let Some(n) = rc.max_attempts.or(own.max_attempts) {
                retry.max_attempts = n.max(1);
            }
            if let Some(ms) = rc.base_delay_ms.or(own.base_delay_ms) {
                retry.base_delay = Duration::from_millis(ms);
            }
            let mut binding = RoleBinding::new(backend).with_retry(retry);
            if let Some(rpm) = rc.requests_per_minute.or(own.requests_per_minute) {
                binding = binding
                    .with_limiter(RateLimiter::new(rpm, rc.burst.or(own.burst).unwrap_or(1)));
            }
            gateway.bind(*role, binding);
        }
        Ok(gateway)
    }

    /// The configured program executor. With neither a stub table nor a
    /// command, every program fails as a runtime error.
    pub fn build_executor(&self) -> Result<Box<dyn PotExecutor>, ConfigError> {
        let timeout = Duration::from_millis(self.pot.timeout_ms);
        let grace = Duration::from_millis(self.pot.grace_ms);
        if let Some(cmd) = &self.pot.command {
            return Ok(Box::new(
                ProtocolExecutor::new(SubprocessSandbox::new(cmd.clone()))
                    .with_timeout(timeout, grace),
            ));
        }
        let stub = match &self.pot.stub_table {
            Some(p) => StubSandbox::load(p).map_err(|message| ConfigError::Parse {
                path: p.clone(),
                message,
            })?,
            None => StubSandbox::new(),
        };
        Ok(Box::new(
            ProtocolExecutor::new(stub).with_timeout(timeout, grace),
        ))
    }
}

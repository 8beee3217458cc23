//! Program-of-Thought execution.
//!
//! Programs run out of process behind a line-delimited JSON protocol:
//! `{"id","code","timeout_ms"}` in, `{"id","status","value","message"}` out,
//! with `status` one of `ok | timeout | violation | error`. The sandbox binary
//! is started with `--serve`. [`StubSandbox`] speaks the same protocol from a
//! code → result table so nothing here needs the real sandbox.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{ExecErrorClass, ExecutionResult};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_GRACE: Duration = Duration::from_millis(500);
/// Responses longer than this are treated as protocol errors.
pub const OUTPUT_CAP: usize = 64 * 1024;

/// Content of the last fenced code block, or the whole completion trimmed
/// when there is no fence.
pub fn extract_pot_code(completion: &str) -> String {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in completion.lines() {
        let t = line.trim_start();
        if t.starts_with("```") || t.starts_with("~~~") {
            match current.take() {
                Some(block) => blocks.push(block),
                None => current = Some(Vec::new()),
            }
            continue;
        }
        if let Some(block) = current.as_mut() {
            block.push(line);
        }
    }
    // an unterminated trailing fence still counts
    if let Some(block) = current {
        blocks.push(block);
    }
    match blocks.last() {
        Some(block) => block.join("\n").trim().to_string(),
        None => completion.trim().to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub id: String,
    pub code: String,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxStatus {
    Ok,
    Timeout,
    Violation,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxResponse {
    pub id: String,
    pub status: SandboxStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl SandboxResponse {
    pub fn into_result(self) -> ExecutionResult {
        let message = self.message.unwrap_or_default();
        match self.status {
            SandboxStatus::Ok => match self.value {
                Some(v) => ExecutionResult::ok(v),
                None => ExecutionResult::error(
                    ExecErrorClass::ProtocolError,
                    "ok response without a value",
                ),
            },
            SandboxStatus::Timeout => ExecutionResult::error(ExecErrorClass::Timeout, message),
            SandboxStatus::Violation => {
                ExecutionResult::error(ExecErrorClass::SandboxViolation, message)
            }
            SandboxStatus::Error => ExecutionResult::error(ExecErrorClass::RuntimeError, message),
        }
    }
}

pub trait PotExecutor: Send + Sync {
    fn execute(&self, code: &str) -> ExecutionResult;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// No response before the deadline; the worker has been killed.
    Timeout,
    Io(String),
}

/// Carries one request line to a sandbox and returns its response line.
pub trait SandboxTransport: Send + Sync {
    fn exchange(&self, request_line: &str, deadline: Duration) -> Result<String, TransportError>;
}

/// Client side of the protocol over any transport.
pub struct ProtocolExecutor<T> {
    transport: T,
    timeout: Duration,
    grace: Duration,
    next_id: AtomicU64,
}

impl<T: SandboxTransport> ProtocolExecutor<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            timeout: DEFAULT_TIMEOUT,
            grace: DEFAULT_GRACE,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration, grace: Duration) -> Self {
        self.timeout = timeout;
        self.grace = grace;
        self
    }

    fn run(&self, code: &str) -> ExecutionResult {
        if code.trim().is_empty() {
            return ExecutionResult::error(ExecErrorClass::RuntimeError, "no code to execute");
        }
        let id = format!("pot-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let request = SandboxRequest {
            id: id.clone(),
            code: code.to_string(),
            timeout_ms: self.timeout.as_millis() as u64,
        };
        let line = serde_json::to_string(&request).expect("request serializes");
        let reply = match self.transport.exchange(&line, self.timeout + self.grace) {
            Ok(reply) => reply,
            Err(TransportError::Timeout) => {
                return ExecutionResult::error(
                    ExecErrorClass::Timeout,
                    "no response before the deadline",
                )
            }
            Err(TransportError::Io(m)) => {
                return ExecutionResult::error(ExecErrorClass::ProtocolError, m)
            }
        };
        if reply.len() > OUTPUT_CAP {
            return ExecutionResult::error(
                ExecErrorClass::ProtocolError,
                "response exceeds the output cap",
            );
        }
        let response: SandboxResponse = match serde_json::from_str(reply.trim()) {
            Ok(r) => r,
            Err(e) => {
                return ExecutionResult::error(
                    ExecErrorClass::ProtocolError,
                    format!("bad response: {e}"),
                )
            }
        };
        if response.id != id {
            return ExecutionResult::error(
                ExecErrorClass::ProtocolError,
                format!("response id {:?} does not echo {id:?}", response.id),
            );
        }
        response.into_result()
    }
}

impl<T: SandboxTransport> PotExecutor for ProtocolExecutor<T> {
    fn execute(&self, code: &str) -> ExecutionResult {
        let start = Instant::now();
        let mut result = self.run(code);
        result.elapsed = start.elapsed();
        result
    }
}

/// One row of the stub table: either a bare value (status ok) or a full
/// response shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StubEntry {
    Value(String),
    Response {
        status: SandboxStatus,
        #[serde(default)]
        value: Option<String>,
        #[serde(default)]
        message: Option<String>,
    },
}

/// Table-driven sandbox keyed by trimmed program text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StubSandbox {
    table: BTreeMap<String, StubEntry>,
}

impl StubSandbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(mut self, code: &str, value: &str) -> Self {
        self.table
            .insert(code.trim().to_string(), StubEntry::Value(value.to_string()));
        self
    }

    pub fn status(mut self, code: &str, status: SandboxStatus, message: &str) -> Self {
        self.table.insert(
            code.trim().to_string(),
            StubEntry::Response {
                status,
                value: None,
                message: Some(message.to_string()),
            },
        );
        self
    }

    /// Loads a JSON object mapping program text to a [`StubEntry`].
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let raw: BTreeMap<String, StubEntry> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self {
            table: raw
                .into_iter()
                .map(|(k, v)| (k.trim().to_string(), v))
                .collect(),
        })
    }

    pub fn respond(&self, req: &SandboxRequest) -> SandboxResponse {
        match self.table.get(req.code.trim()) {
            Some(StubEntry::Value(v)) => SandboxResponse {
                id: req.id.clone(),
                status: SandboxStatus::Ok,
                value: Some(v.clone()),
                message: None,
            },
            Some(StubEntry::Response {
                status,
                value,
                message,
            }) => SandboxResponse {
                id: req.id.clone(),
                status: *status,
                value: value.clone(),
                message: message.clone(),
            },
            None => SandboxResponse {
                id: req.id.clone(),
                status: SandboxStatus::Error,
                value: None,
                message: Some("program not in stub table".into()),
            },
        }
    }

    pub fn into_executor(self) -> ProtocolExecutor<StubSandbox> {
        ProtocolExecutor::new(self)
    }
}

impl SandboxTransport for StubSandbox {
    fn exchange(&self, request_line: &str, _deadline: Duration) -> Result<String, TransportError> {
        let req: SandboxRequest =
            serde_json::from_str(request_line).map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(serde_json::to_string(&self.respond(&req)).expect("response serializes"))
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Worker {
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Pool of long-lived sandbox child processes, one request in flight each.
/// A worker that misses its deadline is killed and replaced on next use.
pub struct SubprocessSandbox {
    command: Vec<String>,
    idle: Mutex<Vec<Worker>>,
}

impl SubprocessSandbox {
    /// `command` is the program and its arguments; `--serve` is appended.
    pub fn new(command: Vec<String>) -> Self {
        assert!(!command.is_empty(), "sandbox command must not be empty");
        Self {
            command,
            idle: Mutex::new(Vec::new()),
        }
    }

    fn spawn(&self) -> Result<Worker, TransportError> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg("--serve")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| TransportError::Io(format!("spawning sandbox: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl SandboxTransport for SubprocessSandbox {
    fn exchange(&self, request_line: &str, deadline: Duration) -> Result<String, TransportError> {
        let pooled = self.idle.lock().expect("sandbox pool poisoned").pop();
        let mut worker = match pooled {
            Some(w) => w,
            None => self.spawn()?,
        };
        let write = writeln!(worker.stdin, "{request_line}").and_then(|_| worker.stdin.flush());
        if let Err(e) = write {
            worker.kill();
            return Err(TransportError::Io(format!("writing to sandbox: {e}")));
        }
        match worker.lines.recv_timeout(deadline) {
            Ok(line) => {
                self.idle
                    .lock()
                    .expect("sandbox pool poisoned")
                    .push(worker);
                Ok(line)
            }
            Err(RecvTimeoutError::Timeout) => {
                worker.kill();
                Err(TransportError::Timeout)
            }
            Err(RecvTimeoutError::Disconnected) => {
                worker.kill();
                Err(TransportError::Io(
                    "sandbox exited without responding".into(),
                ))
            }
        }
    }
}

impl Drop for SubprocessSandbox {
    fn drop(&mut self) {
        if let Ok(mut idle) = self.idle.lock() {
            for w in idle.drain(..) {
                w.kill();
            }
        }
    }
}

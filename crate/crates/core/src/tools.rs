//! LLM-facing tools over sessions and the workspace: schemas, argument
//! validation and text rendering. Failures come back as tool-error text.

use std::path::PathBuf;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tracing::debug;

use crate::llm::ToolSchema;
use crate::session::{
    BreakpointSpec, ControlAction, DebugSession, InspectKind, InspectQuery, SessionError, SessionId, SessionRegistry,
    StartRequest,
};
use crate::workspace::{render_entries, Workspace, WorkspaceError};

pub const DEBUG_START_SESSION: &str = "debug_start_session";
pub const DEBUG_CONTROL: &str = "debug_control";
pub const DEBUG_INSPECT: &str = "debug_inspect";
pub const DEBUG_BREAKPOINT: &str = "debug_breakpoint";
pub const READ_FILE: &str = "read_file";
pub const GREP: &str = "grep";
pub const LIST_DIR: &str = "list_dir";

pub const DEBUG_TOOLS: [&str; 4] = [DEBUG_START_SESSION, DEBUG_CONTROL, DEBUG_INSPECT, DEBUG_BREAKPOINT];
pub const WORKSPACE_TOOLS: [&str; 3] = [READ_FILE, GREP, LIST_DIR];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub text: String,
    pub is_error: bool,
}

impl ToolOutput {
    pub fn ok(text: impl Into<String>) -> Self {
        ToolOutput {
            text: text.into(),
            is_error: false,
        }
    }

    pub fn error(text: impl std::fmt::Display) -> Self {
        ToolOutput {
            text: format!("error: {text}"),
            is_error: true,
        }
    }
}

/// Parses tool arguments; the error names the offending field.
pub fn parse_args<T: DeserializeOwned>(tool: &str, arguments: &str) -> Result<T, ToolOutput> {
    let text = if arguments.trim().is_empty() { "{}" } else { arguments };
    serde_json::from_str(text).map_err(|e| ToolOutput::error(format!("invalid arguments for {tool}: {e}")))
}

pub fn unknown_tool(name: &str, valid: &[String]) -> ToolOutput {
    ToolOutput::error(format!("unknown tool `{name}`; valid tools are: {}", valid.join(", ")))
}

/// Prompt-facing one-liners for each tool.
pub fn short_description(name: &str) -> &'static str {
    match name {
        DEBUG_START_SESSION => "Start session with test and breakpoints",
        DEBUG_INSPECT => "Inspect variables, evaluate expressions, view stack",
        DEBUG_CONTROL => "Step through code, continue, terminate",
        DEBUG_BREAKPOINT => "Add or remove breakpoints",
        READ_FILE => "Read source code for context",
        GREP => "Search the repository with a regular expression",
        LIST_DIR => "List a directory",
        _ => "",
    }
}

pub fn debug_tool_schemas() -> Vec<ToolSchema> {
    vec![
        ToolSchema::new(
            DEBUG_START_SESSION,
            "Launch the failing test or script under the debugger, set a breakpoint at the start of the test \
             function plus any initial breakpoints, and run to the first stop. Replaces any open session.",
            json!({
                "type": "object",
                "properties": {
                    "test": {"type": "string", "description": "Test node id (path::[Class::]test_name) or script path relative to the repository root"},
                    "initial_breakpoints": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {"file": {"type": "string"}, "line": {"type": "integer", "minimum": 1}},
                            "required": ["file", "line"]
                        }
                    },
                    "focus_path": {"type": "string", "description": "File the investigation is about"},
                    "timeout_s": {"type": "integer", "minimum": 1}
                },
                "required": ["test"],
                "additionalProperties": false
            }),
        ),
        ToolSchema::new(
            DEBUG_CONTROL,
            "Resume the paused program: continue to the next breakpoint, step over, step into, step out, or terminate \
             the session. Returns the new location with surrounding source and breakpoint markers.",
            json!({
                "type": "object",
                "properties": {
                    "action": {"type": "string", "enum": ["continue", "step_over", "step_into", "step_out", "terminate"]}
                },
                "required": ["action"],
                "additionalProperties": false
            }),
        ),
        ToolSchema::new(
            DEBUG_INSPECT,
            "Query the paused program: local variables, the value of an expression, the call stack, or the fields of an object.",
            json!({
                "type": "object",
                "properties": {
                    "kind": {"type": "string", "enum": ["locals", "expression", "stack", "fields"]},
                    "expression": {"type": "string", "description": "Required for expression and fields"},
                    "depth_limit": {"type": "integer", "minimum": 1, "maximum": 3, "description": "Nesting depth for fields (default 1)"}
                },
                "required": ["kind"],
                "additionalProperties": false
            }),
        ),
        ToolSchema::new(
            DEBUG_BREAKPOINT,
            "Set, remove or list breakpoints. Set takes a file and line, or a method name (optionally qualified, \
             e.g. Class.method or module.function) which breaks at the first line of its body.",
            json!({
                "type": "object",
                "properties": {
                    "operation": {"type": "string", "enum": ["set", "remove", "list"]},
                    "file": {"type": "string"},
                    "line": {"type": "integer", "minimum": 1},
                    "method": {"type": "string"},
                    "id": {"type": "integer", "minimum": 1}
                },
                "required": ["operation"],
                "additionalProperties": false
            }),
        ),
    ]
}

pub fn workspace_tool_schemas() -> Vec<ToolSchema> {
    vec![
        ToolSchema::new(
            READ_FILE,
            "Read a file from the repository with line numbers (at most 400 lines per call).",
            json!({
                "type": "object",
                "properties": {
                    "path": {"type": "string"},
                    "start_line": {"type": "integer", "minimum": 1},
                    "end_line": {"type": "integer", "minimum": 1}
                },
                "required": ["path"],
                "additionalProperties": false
            }),
        ),
        ToolSchema::new(
            GREP,
            "Search text files for a regular expression; returns path:line: text (at most 200 matches).",
            json!({
                "type": "object",
                "properties": {
                    "pattern": {"type": "string"},
                    "path": {"type": "string", "description": "Optional file or directory to search under"}
                },
                "required": ["pattern"],
                "additionalProperties": false
            }),
        ),
        ToolSchema::new(
            LIST_DIR,
            "List the entries of a directory in the repository.",
            json!({
                "type": "object",
                "properties": {"path": {"type": "string"}},
                "additionalProperties": false
            }),
        ),
    ]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReadFileArgs {
    path: String,
    start_line: Option<u32>,
    end_line: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrepArgs {
    pattern: String,
    path: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ListDirArgs {
    #[serde(default)]
    path: String,
}

/// Runs one of the read-only workspace tools.
pub fn dispatch_workspace(ws: &Workspace, name: &str, arguments: &str) -> Option<ToolOutput> {
    let out = match name {
        READ_FILE => match parse_args::<ReadFileArgs>(name, arguments) {
            Ok(a) => render_ws(ws.read_file(&a.path, a.start_line, a.end_line).map(|s| ws.render_slice(&s))),
            Err(e) => e,
        },
        GREP => match parse_args::<GrepArgs>(name, arguments) {
            Ok(a) => render_ws(ws.grep(&a.pattern, a.path.as_deref()).map(|m| ws.render_matches(&m))),
            Err(e) => e,
        },
        LIST_DIR => match parse_args::<ListDirArgs>(name, arguments) {
            Ok(a) => render_ws(ws.list_dir(&a.path).map(|e| render_entries(&e))),
            Err(e) => e,
        },
        _ => return None,
    };
    Some(out)
}

fn render_ws(r: Result<String, WorkspaceError>) -> ToolOutput {
    match r {
        Ok(text) => ToolOutput::ok(text),
        Err(e) => ToolOutput::error(e),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BreakpointArg {
    file: PathBuf,
    line: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StartArgs {
    test: String,
    #[serde(default)]
    initial_breakpoints: Vec<BreakpointArg>,
    focus_path: Option<PathBuf>,
    timeout_s: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlArgs {
    action: ControlAction,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InspectArgs {
    kind: InspectKind,
    expression: Option<String>,
    depth_limit: Option<u8>,
}

#[derive(Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum BreakpointOp {
    Set,
    Remove,
    List,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BreakpointArgs {
    operation: BreakpointOp,
    file: Option<PathBuf>,
    line: Option<u32>,
    method: Option<String>,
    id: Option<u32>,
}

/// What happened to debugger sessions over a toolbox's lifetime.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionLedger {
    pub started: usize,
    pub start_failures: Vec<String>,
    /// Set when a live session's process died or stopped responding.
    pub died: Option<String>,
}

/// The four debugger tools bound to one repository. Holds at most one open
/// session; starting another closes the previous one.
pub struct DebugToolbox {
    workspace: Workspace,
    sessions: SessionRegistry,
    current: Option<SessionId>,
    pub interpreter_cmd: String,
    pub default_timeout: Duration,
    ledger: SessionLedger,
}

impl DebugToolbox {
    pub fn new(workspace: Workspace) -> Self {
        DebugToolbox {
            workspace,
            sessions: SessionRegistry::new(),
            current: None,
            interpreter_cmd: crate::driver::DEFAULT_INTERPRETER.to_string(),
            default_timeout: Duration::from_secs(30),
            ledger: SessionLedger::default(),
        }
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn ledger(&self) -> &SessionLedger {
        &self.ledger
    }

    pub fn has_session(&self) -> bool {
        self.current.is_some()
    }

    /// Closes every session this toolbox opened.
    pub fn close(&mut self) {
        self.sessions.close_all();
        self.current = None;
    }

    pub fn dispatch(&mut self, name: &str, arguments: &str) -> Option<ToolOutput> {
        let out = match name {
            DEBUG_START_SESSION => parse_args::<StartArgs>(name, arguments).map(|a| self.start(a)),
            DEBUG_CONTROL => parse_args::<ControlArgs>(name, arguments).map(|a| self.control(a)),
            DEBUG_INSPECT => parse_args::<InspectArgs>(name, arguments).map(|a| self.inspect(a)),
            DEBUG_BREAKPOINT => parse_args::<BreakpointArgs>(name, arguments).map(|a| self.breakpoint(a)),
            _ => return dispatch_workspace(&self.workspace, name, arguments),
        };
        Some(out.unwrap_or_else(|e| e))
    }

    fn start(&mut self, a: StartArgs) -> ToolOutput {
        if let Some(id) = self.current.take() {
            self.sessions.close(id);
        }
        let req = StartRequest {
            workdir: self.workspace.root().to_path_buf(),
            test: a.test,
            initial_breakpoints: a.initial_breakpoints.into_iter().map(|b| (b.file, b.line)).collect(),
            focus_path: a.focus_path,
            timeout: a.timeout_s.map(Duration::from_secs).unwrap_or(self.default_timeout),
            interpreter_cmd: self.interpreter_cmd.clone(),
        };
        match DebugSession::start(&req) {
            Ok((session, snapshot)) => {
                self.ledger.started += 1;
                let id = self.sessions.insert(session);
                self.current = Some(id);
                debug!(session = %id, "session started");
                ToolOutput::ok(format!("Session {id} started.\n{}", snapshot.render()))
            }
            Err(e) => {
                self.ledger.start_failures.push(e.to_string());
                ToolOutput::error(e)
            }
        }
    }

    fn with_session<T>(&mut self, f: impl FnOnce(&mut DebugSession) -> Result<T, SessionError>) -> Result<T, ToolOutput> {
        let Some(id) = self.current else {
            return Err(ToolOutput::error("no debug session is open; call debug_start_session first"));
        };
        let Some(shared) = self.sessions.get(id) else {
            self.current = None;
            return Err(ToolOutput::error("no debug session is open; call debug_start_session first"));
        };
        let result = {
            let mut session = shared.lock().unwrap_or_else(|e| e.into_inner());
            f(&mut session)
        };
        result.map_err(|e| {
            if matches!(e, SessionError::ProcessExited(_) | SessionError::DriverTimeout(_)) {
                self.ledger.died = Some(e.to_string());
                self.sessions.close(id);
                self.current = None;
            }
            ToolOutput::error(e)
        })
    }

    fn control(&mut self, a: ControlArgs) -> ToolOutput {
        let terminate = a.action == ControlAction::Terminate;
        let out = self.with_session(|s| s.control(a.action)).map(|snap| ToolOutput::ok(snap.render()));
        if terminate {
            if let Some(id) = self.current.take() {
                self.sessions.close(id);
            }
        }
        out.unwrap_or_else(|e| e)
    }

    fn inspect(&mut self, a: InspectArgs) -> ToolOutput {
        let query = InspectQuery {
            kind: a.kind,
            expression: a.expression,
            depth_limit: a.depth_limit,
        };
        self.with_session(|s| s.inspect(&query))
            .map(|r| ToolOutput::ok(r.rendered))
            .unwrap_or_else(|e| e)
    }

    fn breakpoint(&mut self, a: BreakpointArgs) -> ToolOutput {
        let result = match a.operation {
            BreakpointOp::Set => {
                let spec = match (a.method, a.file, a.line) {
                    (Some(method), _, _) => BreakpointSpec::Method { method },
                    (None, Some(file), Some(line)) => BreakpointSpec::Line { file, line },
                    _ => return ToolOutput::error("set needs either `method` or both `file` and `line`"),
                };
                self.with_session(|s| {
                    let b = s.set_breakpoint(spec)?;
                    let at = b.resolved_file.strip_prefix(s.workdir()).unwrap_or(&b.resolved_file).display().to_string();
                    Ok(format!("Breakpoint {} set at {}:{}", b.id, at, b.resolved_line))
                })
            }
            BreakpointOp::Remove => {
                let Some(id) = a.id else {
                    return ToolOutput::error("remove needs `id`");
                };
                self.with_session(|s| s.remove_breakpoint(id).map(|_| format!("Breakpoint {id} removed")))
            }
            BreakpointOp::List => self.with_session(|s| {
                let list = s.list_breakpoints()?;
                if list.is_empty() {
                    return Ok("No breakpoints.".to_string());
                }
                Ok(list
                    .iter()
                    .map(|b| {
                        let at = b.resolved_file.strip_prefix(s.workdir()).unwrap_or(&b.resolved_file).display().to_string();
                        let what = match &b.spec {
                            BreakpointSpec::Method { method } => format!(" ({method})"),
                            BreakpointSpec::Line { .. } => String::new(),
                        };
                        let off = if b.enabled { "" } else { " [disabled]" };
                        format!("{}: {}:{}{}{}", b.id, at, b.resolved_line, what, off)
                    })
                    .collect::<Vec<_>>()
                    .join("\n"))
            }),
        };
        result.map(ToolOutput::ok).unwrap_or_else(|e| e)
    }
}

impl Drop for DebugToolbox {
    fn drop(&mut self) {
        self.close();
    }
}

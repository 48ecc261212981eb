//! Stateful debugging sessions: atomic start, execution control, state
//! inspection and breakpoint management on top of a [`DebugChannel`].

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::driver::{
    BreakEvent, DebugChannel, DebugCommand, DebuggerBackend, DriverError, DriverState, FrameLocation,
    LaunchMode, LaunchSpec, PdbBackend, RawResponse,
};
use crate::pysource;

/// Lines shown either side of the current line in a snapshot.
pub const CONTEXT_RADIUS: u32 = 5;
/// Cap on the LLM-facing rendering of an inspect result.
pub const INSPECT_CAP: usize = 16 * 1024;
const OUTPUT_EXCERPT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionId(pub u64);

impl SessionId {
    fn next() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        SessionId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StartFailure {
    TargetNotFound,
    SpawnFailed,
    StartupTimeout,
    BreakpointUnresolvable,
}

impl fmt::Display for StartFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("debugger session failed ({reason}): {detail}")]
    StartFailed { reason: StartFailure, detail: String },
    #[error("illegal in current state: {0}")]
    IllegalState(String),
    #[error("the program has finished; start a new session")]
    SessionEnded,
    #[error("debugger did not respond within {0:?}")]
    DriverTimeout(Duration),
    #[error("debuggee exited: {0}")]
    ProcessExited(String),
    #[error("evaluation error: {0}")]
    EvaluationError(String),
    #[error("breakpoint unresolvable: {0}")]
    BreakpointUnresolvable(String),
    #[error("no breakpoint with id {0}")]
    UnknownBreakpoint(u32),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unexpected debugger output: {0}")]
    Protocol(String),
}

impl SessionError {
    fn start(reason: StartFailure, detail: impl Into<String>) -> Self {
        SessionError::StartFailed {
            reason,
            detail: detail.into(),
        }
    }
}

impl From<DriverError> for SessionError {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::DriverTimeout(d) => SessionError::DriverTimeout(d),
            DriverError::ProcessExited(out) => SessionError::ProcessExited(out),
            DriverError::IllegalState(DriverState::Finished) => SessionError::SessionEnded,
            DriverError::IllegalState(s) => SessionError::IllegalState(format!("debugger is {s}")),
            DriverError::ParseAmbiguous(t) => SessionError::Protocol(t),
            other => SessionError::Protocol(other.to_string()),
        }
    }
}

/// What a breakpoint was asked for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BreakpointSpec {
    Line { file: PathBuf, line: u32 },
    Method { method: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub id: u32,
    #[serde(flatten)]
    pub spec: BreakpointSpec,
    /// Where the debugger actually placed it (absolute path).
    pub resolved_file: PathBuf,
    pub resolved_line: u32,
    pub enabled: bool,
}

impl Breakpoint {
    fn describe(&self, workdir: &Path) -> String {
        let at = format!("{}:{}", display_path(&self.resolved_file, workdir), self.resolved_line);
        let mut s = match &self.spec {
            BreakpointSpec::Line { .. } => format!("#{} {at}", self.id),
            BreakpointSpec::Method { method } => format!("#{} {method} ({at})", self.id),
        };
        if !self.enabled {
            s.push_str(" [disabled]");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartRequest {
    pub workdir: PathBuf,
    /// Test node id (`path::[Class::]name`) or script path, relative to `workdir`.
    pub test: String,
    #[serde(default)]
    pub initial_breakpoints: Vec<(PathBuf, u32)>,
    #[serde(default)]
    pub focus_path: Option<PathBuf>,
    pub timeout: Duration,
    pub interpreter_cmd: String,
}

impl StartRequest {
    pub fn new(workdir: impl Into<PathBuf>, test: impl Into<String>) -> Self {
        StartRequest {
            workdir: workdir.into(),
            test: test.into(),
            initial_breakpoints: Vec::new(),
            focus_path: None,
            timeout: Duration::from_secs(30),
            interpreter_cmd: crate::driver::DEFAULT_INTERPRETER.to_string(),
        }
    }

    pub fn breakpoint(mut self, file: impl Into<PathBuf>, line: u32) -> Self {
        self.initial_breakpoints.push((file.into(), line));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLine {
    pub number: u32,
    pub text: String,
    pub is_breakpoint: bool,
    pub is_current: bool,
}

/// A failing test reported by the test runner before it exited.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFailure {
    pub file: String,
    pub line: u32,
    pub exception_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub event: BreakEvent,
    pub location: Option<FrameLocation>,
    pub context_lines: Vec<ContextLine>,
    pub active_breakpoints: Vec<Breakpoint>,
    /// Program output printed since the previous stop, tail only.
    pub output: String,
    pub test_failure: Option<TestFailure>,
    #[serde(skip)]
    workdir: PathBuf,
}

impl SessionSnapshot {
    pub fn render(&self) -> String {
        let mut out = String::new();
        match &self.event {
            BreakEvent::RunCompleted => {
                out.push_str("Program finished. The session has ended.\n");
                if let Some(f) = &self.test_failure {
                    let _ = writeln!(out, "Test failed: {} at {}:{}", f.exception_type, f.file, f.line);
                }
            }
            BreakEvent::ExceptionRaised {
                location,
                exception_type,
                exception_message,
            } => {
                let _ = writeln!(
                    out,
                    "Uncaught {}: {}\nPost-mortem at {}:{} in {}(). Inspect works; only terminate is allowed.",
                    exception_type,
                    exception_message,
                    display_path(&location.file, &self.workdir),
                    location.line,
                    location.function
                );
            }
            BreakEvent::BreakpointHit { location } | BreakEvent::StepPause { location } => {
                let how = if matches!(self.event, BreakEvent::BreakpointHit { .. }) {
                    "Breakpoint hit"
                } else {
                    "Paused"
                };
                let _ = writeln!(
                    out,
                    "{how} at {}:{} in {}()",
                    display_path(&location.file, &self.workdir),
                    location.line,
                    location.function
                );
            }
        }
        if !self.output.trim().is_empty() {
            let _ = writeln!(out, "Output:\n{}", self.output.trim_end());
        }
        if !self.context_lines.is_empty() {
            out.push('\n');
            for l in &self.context_lines {
                let marker = match (l.is_breakpoint, l.is_current) {
                    (true, true) => "B>",
                    (false, true) => " >",
                    (true, false) => "B ",
                    (false, false) => "  ",
                };
                let _ = writeln!(out, "{marker}{:>5}  {}", l.number, l.text);
            }
        }
        if !self.active_breakpoints.is_empty() {
            let list: Vec<String> = self.active_breakpoints.iter().map(|b| b.describe(&self.workdir)).collect();
            let _ = writeln!(out, "\nBreakpoints: {}", list.join(", "));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InspectKind {
    Locals,
    Expression,
    Stack,
    Fields,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectQuery {
    pub kind: InspectKind,
    #[serde(default)]
    pub expression: Option<String>,
    #[serde(default)]
    pub depth_limit: Option<u8>,
}

impl InspectQuery {
    pub fn locals() -> Self {
        InspectQuery {
            kind: InspectKind::Locals,
            expression: None,
            depth_limit: None,
        }
    }

    pub fn stack() -> Self {
        InspectQuery {
            kind: InspectKind::Stack,
            ..Self::locals()
        }
    }

    pub fn expression(expr: impl Into<String>) -> Self {
        InspectQuery {
            kind: InspectKind::Expression,
            expression: Some(expr.into()),
            depth_limit: None,
        }
    }

    pub fn fields(expr: impl Into<String>, depth: u8) -> Self {
        InspectQuery {
            kind: InspectKind::Fields,
            expression: Some(expr.into()),
            depth_limit: Some(depth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectResult {
    pub kind: InspectKind,
    pub rendered: String,
    pub bindings: Vec<(String, String)>,
    pub frames: Vec<FrameLocation>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Continue,
    StepOver,
    StepInto,
    StepOut,
    Terminate,
}

pub struct DebugSession {
    id: SessionId,
    backend: Arc<dyn DebuggerBackend>,
    channel: Box<dyn DebugChannel>,
    breakpoints: Vec<Breakpoint>,
    paused_at: Option<FrameLocation>,
    last_event: Option<BreakEvent>,
    at_return: bool,
    last_command_was_continue: bool,
    workdir: PathBuf,
    launch: LaunchSpec,
    closed: bool,
}

impl fmt::Debug for DebugSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DebugSession")
            .field("id", &self.id)
            .field("pid", &self.channel.pid())
            .field("paused_at", &self.paused_at)
            .field("breakpoints", &self.breakpoints.len())
            .finish()
    }
}

fn display_path(path: &Path, workdir: &Path) -> String {
    path.strip_prefix(workdir).unwrap_or(path).display().to_string()
}

fn failure_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^(\S+\.py):(\d+): ([A-Za-z_][\w.]*)\s*$").unwrap())
}

/// The `path:line: ExceptionType` line pytest prints for the first failure.
pub fn parse_test_failure(text: &str) -> Option<TestFailure> {
    let c = failure_line_re().captures_iter(text).last()?;
    Some(TestFailure {
        file: c[1].to_string(),
        line: c[2].parse().ok()?,
        exception_type: c[3].to_string(),
    })
}

/// Program output in a stop response: everything before the frame header.
fn program_output(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().collect();
    if let Some(pos) = lines.iter().rposition(|l| l.starts_with("> ") || l.contains(" > /")) {
        if let Some(prefix) = lines[pos].find("> ").filter(|p| *p > 0) {
            // Frame header glued to the end of a line of program output.
            let head = lines[pos][..prefix].trim_end();
            lines.truncate(pos);
            if !head.is_empty() {
                lines.push(head);
            }
        } else {
            lines.truncate(pos);
        }
    }
    lines.retain(|l| !matches!(l.trim(), "--Return--" | "--Call--"));
    let joined = lines.join("\n");
    match joined.char_indices().rev().nth(OUTPUT_EXCERPT) {
        Some((i, _)) => format!("[...]{}", &joined[i..]),
        None => joined,
    }
}

/// Caps text at `cap` bytes on a char boundary.
fn cap_text(text: &str, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text.to_string(), false);
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    (format!("{}\n[... truncated ...]", &text[..end]), true)
}

struct ResolvedTarget {
    mode: LaunchMode,
    default_breakpoint: Option<(PathBuf, u32)>,
}

/// Checks that `test` names a runnable script or test function under `workdir`.
pub fn check_target(workdir: &Path, test: &str) -> Result<(), SessionError> {
    let workdir = workdir
        .canonicalize()
        .map_err(|_| SessionError::start(StartFailure::TargetNotFound, format!("{} does not exist", workdir.display())))?;
    resolve_target(&workdir, test).map(|_| ())
}

fn resolve_target(workdir: &Path, test: &str) -> Result<ResolvedTarget, SessionError> {
    let test = test.trim();
    if test.is_empty() {
        return Err(SessionError::start(StartFailure::TargetNotFound, "no test or script given"));
    }
    let mode = LaunchMode::infer(test);
    match mode {
        LaunchMode::Script => {
            if !workdir.join(test).is_file() {
                return Err(SessionError::start(
                    StartFailure::TargetNotFound,
                    format!("script {test} not found in {}", workdir.display()),
                ));
            }
            Ok(ResolvedTarget {
                mode,
                default_breakpoint: None,
            })
        }
        LaunchMode::PytestNode => {
            if !crate::driver::pdb::is_valid_node_id(test) {
                return Err(SessionError::start(
                    StartFailure::TargetNotFound,
                    format!("{test} is not a test id of the form path::[Class::]test_name"),
                ));
            }
            let mut parts = test.split("::");
            let file = workdir.join(parts.next().unwrap_or_default());
            let scopes: Vec<&str> = parts.map(|p| p.split('[').next().unwrap_or(p)).collect();
            let source = std::fs::read_to_string(&file).map_err(|_| {
                SessionError::start(StartFailure::TargetNotFound, format!("test file {} not found", file.display()))
            })?;
            let def = pysource::find_in_file(&file, &scopes).into_iter().next().ok_or_else(|| {
                SessionError::start(
                    StartFailure::TargetNotFound,
                    format!("no test function {} in {}", scopes.join("::"), display_path(&file, workdir)),
                )
            })?;
            let line = pysource::first_body_line(&source, def.line).ok_or_else(|| {
                SessionError::start(
                    StartFailure::BreakpointUnresolvable,
                    format!("test function {} has no body line", scopes.join("::")),
                )
            })?;
            Ok(ResolvedTarget {
                mode,
                default_breakpoint: Some((file, line)),
            })
        }
    }
}

fn line_count(file: &Path) -> Option<u32> {
    std::fs::read_to_string(file).ok().map(|s| s.lines().count() as u32)
}

impl DebugSession {
    /// Start with the pdb backend.
    pub fn start(req: &StartRequest) -> Result<(DebugSession, SessionSnapshot), SessionError> {
        Self::start_with(Arc::new(PdbBackend::new()), req)
    }

    /// Verify target, spawn, set breakpoints, continue once. Any failure tears
    /// the child down before returning.
    pub fn start_with(
        backend: Arc<dyn DebuggerBackend>,
        req: &StartRequest,
    ) -> Result<(DebugSession, SessionSnapshot), SessionError> {
        let workdir = req.workdir.canonicalize().map_err(|e| {
            SessionError::start(
                StartFailure::TargetNotFound,
                format!("working directory {}: {e}", req.workdir.display()),
            )
        })?;
        let target = resolve_target(&workdir, &req.test)?;
        let launch = LaunchSpec {
            workdir: workdir.clone(),
            mode: target.mode,
            target: req.test.trim().to_string(),
            interpreter_cmd: req.interpreter_cmd.clone(),
            timeout: req.timeout,
        };
        backend.prepare(&launch).map_err(|e| match e {
            DriverError::TargetNotLoadable(m) => SessionError::start(StartFailure::TargetNotFound, m),
            other => SessionError::start(StartFailure::SpawnFailed, other.to_string()),
        })?;

        let (channel, first) = backend.spawn(&launch).map_err(|e| match e {
            DriverError::StartupTimeout { waited, output } => SessionError::start(
                StartFailure::StartupTimeout,
                format!("no debugger prompt after {waited:?}; output: {}", output.trim()),
            ),
            other => SessionError::start(StartFailure::SpawnFailed, other.to_string()),
        })?;
        let mut session = DebugSession {
            id: SessionId::next(),
            backend,
            channel,
            breakpoints: Vec::new(),
            paused_at: None,
            last_event: None,
            at_return: false,
            last_command_was_continue: false,
            workdir,
            launch,
            closed: false,
        };
        debug!(session = %session.id, pid = ?session.channel.pid(), "debuggee started");

        match session.finish_start(req, target.default_breakpoint, first) {
            Ok(snapshot) => Ok((session, snapshot)),
            Err(e) => {
                session.close();
                Err(e)
            }
        }
    }

    fn finish_start(
        &mut self,
        req: &StartRequest,
        default_breakpoint: Option<(PathBuf, u32)>,
        first: RawResponse,
    ) -> Result<SessionSnapshot, SessionError> {
        let wanted = default_breakpoint.into_iter().chain(req.initial_breakpoints.iter().cloned());
        for (file, line) in wanted {
            let spec = BreakpointSpec::Line { file, line };
            self.set_breakpoint(spec).map_err(|e| match e {
                SessionError::BreakpointUnresolvable(m) => SessionError::start(StartFailure::BreakpointUnresolvable, m),
                other => SessionError::start(StartFailure::BreakpointUnresolvable, other.to_string()),
            })?;
        }
        if self.breakpoints.is_empty() {
            let event = self
                .backend
                .classify_event(&first)
                .map_err(|e| SessionError::start(StartFailure::StartupTimeout, e.to_string()))?;
            return Ok(self.record(event, &first));
        }
        self.run_control(DebugCommand::Continue).map_err(|e| {
            SessionError::start(StartFailure::StartupTimeout, format!("program did not reach a stop: {e}"))
        })
    }

    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn launch(&self) -> &LaunchSpec {
        &self.launch
    }

    pub fn pid(&self) -> Option<u32> {
        self.channel.pid()
    }

    pub fn paused_at(&self) -> Option<&FrameLocation> {
        self.paused_at.as_ref()
    }

    pub fn last_event(&self) -> Option<&BreakEvent> {
        self.last_event.as_ref()
    }

    pub fn breakpoints(&self) -> &[Breakpoint] {
        &self.breakpoints
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// True when stopped on a function-return event.
    pub fn at_return(&self) -> bool {
        self.at_return
    }

    fn timeout(&self) -> Duration {
        self.launch.timeout
    }

    fn ensure_live(&self) -> Result<(), SessionError> {
        if self.closed {
            return Err(SessionError::IllegalState("session is closed".into()));
        }
        match self.channel.state() {
            DriverState::Finished => Err(SessionError::SessionEnded),
            DriverState::Dead => Err(SessionError::ProcessExited("debuggee is gone".into())),
            DriverState::AtPrompt => Ok(()),
            s => Err(SessionError::IllegalState(format!("debugger is {s}"))),
        }
    }

    fn send(&mut self, command: &DebugCommand) -> Result<RawResponse, SessionError> {
        let line = self.backend.render(command);
        let timeout = self.timeout();
        Ok(self.channel.send_command(&line, timeout)?)
    }

    fn record(&mut self, mut event: BreakEvent, response: &RawResponse) -> SessionSnapshot {
        if let BreakEvent::StepPause { location } = &event {
            if self.breakpoints.iter().any(|b| b.resolved_file == location.file && b.resolved_line == location.line)
                && self.last_command_was_continue
            {
                event = BreakEvent::BreakpointHit {
                    location: location.clone(),
                };
            }
        }
        self.at_return = event.location().is_some() && self.backend.is_return_stop(response.protocol_text());
        self.paused_at = event.location().cloned();
        self.last_event = Some(event.clone());
        let text = response.protocol_text();
        let test_failure = match (&event, self.launch.mode) {
            (BreakEvent::RunCompleted, LaunchMode::PytestNode) => parse_test_failure(text),
            _ => None,
        };
        self.snapshot_for(event, program_output(text), test_failure)
    }

    fn snapshot_for(&self, event: BreakEvent, output: String, test_failure: Option<TestFailure>) -> SessionSnapshot {
        let location = event.location().cloned();
        let context_lines = location.as_ref().map(|l| self.context(l)).unwrap_or_default();
        SessionSnapshot {
            event,
            location,
            context_lines,
            active_breakpoints: self.breakpoints.clone(),
            output,
            test_failure,
            workdir: self.workdir.clone(),
        }
    }

    fn context(&self, location: &FrameLocation) -> Vec<ContextLine> {
        let Ok(source) = std::fs::read_to_string(&location.file) else {
            return Vec::new();
        };
        let lines: Vec<&str> = source.lines().collect();
        if location.line as usize > lines.len() {
            return Vec::new();
        }
        let first = location.line.saturating_sub(CONTEXT_RADIUS).max(1);
        let last = (location.line + CONTEXT_RADIUS).min(lines.len() as u32);
        (first..=last)
            .map(|n| ContextLine {
                number: n,
                text: lines[n as usize - 1].to_string(),
                is_breakpoint: self
                    .breakpoints
                    .iter()
                    .any(|b| b.resolved_file == location.file && b.resolved_line == n),
                is_current: n == location.line,
            })
            .collect()
    }

    /// Snapshot of the current stop without moving.
    pub fn snapshot(&self) -> Option<SessionSnapshot> {
        let event = self.last_event.clone()?;
        Some(self.snapshot_for(event, String::new(), None))
    }

    fn run_control(&mut self, command: DebugCommand) -> Result<SessionSnapshot, SessionError> {
        self.last_command_was_continue = command == DebugCommand::Continue;
        let mut response = self.send(&command)?;
        if self.backend.is_launcher_stop(response.protocol_text()) {
            let output = program_output(response.protocol_text());
            response = self.send(&DebugCommand::Continue)?;
            if !output.is_empty() {
                response = RawResponse::new(format!("{output}\n{}", response.text));
            }
        }
        let event = self.backend.classify_event(&response)?;
        Ok(self.record(event, &response))
    }

    pub fn control(&mut self, action: ControlAction) -> Result<SessionSnapshot, SessionError> {
        if action == ControlAction::Terminate {
            self.close();
            return Ok(self.snapshot_for(BreakEvent::RunCompleted, "Session terminated.".into(), None));
        }
        self.ensure_live()?;
        if self.channel.post_mortem() {
            return Err(SessionError::IllegalState(
                "stopped in post-mortem after an uncaught exception; only inspect and terminate work".into(),
            ));
        }
        if self.paused_at.is_none() {
            return Err(SessionError::IllegalState("not paused".into()));
        }
        match action {
            ControlAction::Continue => self.run_control(DebugCommand::Continue),
            ControlAction::StepOver => self.run_control(DebugCommand::StepOver),
            ControlAction::StepInto => self.run_control(DebugCommand::StepInto),
            ControlAction::StepOut => {
                if self.at_return {
                    return self.run_control(DebugCommand::StepOver);
                }
                let frame = self.paused_at.as_ref().map(|l| (l.file.clone(), l.function.clone()));
                let snap = self.run_control(DebugCommand::StepOut)?;
                // `r` stops on the return event of the same frame; one more
                // step lands in the caller.
                let same_frame = snap
                    .location
                    .as_ref()
                    .is_some_and(|l| Some((l.file.clone(), l.function.clone())) == frame);
                if self.at_return && same_frame {
                    self.run_control(DebugCommand::StepOver)
                } else {
                    Ok(snap)
                }
            }
            ControlAction::Terminate => unreachable!(),
        }
    }

    pub fn inspect(&mut self, query: &InspectQuery) -> Result<InspectResult, SessionError> {
        self.ensure_live()?;
        if self.paused_at.is_none() {
            return Err(SessionError::IllegalState("not paused".into()));
        }
        let expression = || {
            query
                .expression
                .as_deref()
                .map(str::trim)
                .filter(|e| !e.is_empty())
                .ok_or_else(|| SessionError::InvalidRequest("expression is required".into()))
        };
        let (rendered, bindings, frames, truncated) = match query.kind {
            InspectKind::Locals => {
                let resp = self.send(&DebugCommand::Locals)?;
                let bindings = self.backend.parse_bindings(&resp.text).map_err(SessionError::EvaluationError)?;
                let rendered = if bindings.is_empty() {
                    "(no local variables)".to_string()
                } else {
                    bindings.iter().map(|(k, v)| format!("{k} = {v}")).collect::<Vec<_>>().join("\n")
                };
                (rendered, bindings, Vec::new(), false)
            }
            InspectKind::Expression => {
                let expr = expression()?;
                if expr.contains('\n') {
                    return Err(SessionError::InvalidRequest("expression must be a single line".into()));
                }
                let resp = self.send(&DebugCommand::Evaluate(expr.to_string()))?;
                if let Some(err) = self.backend.evaluation_error(&resp.text) {
                    return Err(SessionError::EvaluationError(err));
                }
                let text = resp.text.trim_end().to_string();
                let rendered = if text.is_empty() { "(no output)".to_string() } else { text };
                (rendered, Vec::new(), Vec::new(), resp.truncated)
            }
            InspectKind::Stack => {
                let resp = self.send(&DebugCommand::Where)?;
                let frames = self.backend.parse_stack(resp.protocol_text());
                if frames.is_empty() {
                    return Err(SessionError::Protocol(resp.text));
                }
                let rendered = frames
                    .iter()
                    .enumerate()
                    .map(|(i, f)| format!("#{i} {}:{} in {}()", display_path(&f.file, &self.workdir), f.line, f.function))
                    .collect::<Vec<_>>()
                    .join("\n");
                (rendered, Vec::new(), frames, resp.truncated)
            }
            InspectKind::Fields => {
                let expr = expression()?;
                let depth = query.depth_limit.unwrap_or(1);
                if !(1..=3).contains(&depth) {
                    return Err(SessionError::InvalidRequest(format!("depth_limit must be 1..3, got {depth}")));
                }
                let resp = self.send(&DebugCommand::Fields {
                    expression: expr.to_string(),
                    depth,
                })?;
                let bindings = self.backend.parse_bindings(&resp.text).map_err(SessionError::EvaluationError)?;
                let rendered = if bindings.is_empty() {
                    format!("{expr} has no fields")
                } else {
                    bindings.iter().map(|(k, v)| format!("{expr}.{k} = {v}")).collect::<Vec<_>>().join("\n")
                };
                (rendered, bindings, Vec::new(), false)
            }
        };
        let (rendered, capped) = cap_text(&rendered, INSPECT_CAP);
        Ok(InspectResult {
            kind: query.kind,
            rendered,
            bindings,
            frames,
            truncated: truncated || capped,
        })
    }

    fn resolve_file(&self, file: &Path) -> PathBuf {
        let joined = if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.workdir.join(file)
        };
        joined.canonicalize().unwrap_or(joined)
    }

    /// Resolves a method name to the first body line of its unique definition.
    pub fn resolve_method(&self, method: &str) -> Result<(PathBuf, u32), SessionError> {
        let name = method.trim();
        if name.is_empty() {
            return Err(SessionError::BreakpointUnresolvable("method name is empty".into()));
        }
        let defs = pysource::find_definitions(&self.workdir, name);
        match defs.as_slice() {
            [] => Err(SessionError::BreakpointUnresolvable(format!("no definition of {name} found"))),
            [def] => {
                let source = std::fs::read_to_string(&def.file)
                    .map_err(|e| SessionError::BreakpointUnresolvable(format!("{}: {e}", def.file.display())))?;
                let line = pysource::first_body_line(&source, def.line).ok_or_else(|| {
                    SessionError::BreakpointUnresolvable(format!("{name} has no body line"))
                })?;
                Ok((def.file.clone(), line))
            }
            many => {
                let candidates: Vec<String> = many
                    .iter()
                    .map(|d| format!("{} ({}:{})", d.qualified_name(), display_path(&d.file, &self.workdir), d.line))
                    .collect();
                Err(SessionError::BreakpointUnresolvable(format!(
                    "{name} is ambiguous; candidates: {}",
                    candidates.join(", ")
                )))
            }
        }
    }

    pub fn set_breakpoint(&mut self, spec: BreakpointSpec) -> Result<Breakpoint, SessionError> {
        self.ensure_live()?;
        let (file, line) = match &spec {
            BreakpointSpec::Line { file, line } => {
                let file = self.resolve_file(file);
                let Some(len) = line_count(&file) else {
                    return Err(SessionError::BreakpointUnresolvable(format!("{} not found", file.display())));
                };
                if *line == 0 || *line > len {
                    return Err(SessionError::BreakpointUnresolvable(format!(
                        "line {line} is outside {} (1..{len})",
                        display_path(&file, &self.workdir)
                    )));
                }
                (file, *line)
            }
            BreakpointSpec::Method { method } => self.resolve_method(method)?,
        };
        let resp = self.send(&DebugCommand::SetBreakpoint { file, line })?;
        let (id, resolved_file, resolved_line) = self
            .backend
            .parse_breakpoint_set(&resp.text)
            .map_err(SessionError::BreakpointUnresolvable)?;
        let spec = match spec {
            BreakpointSpec::Line { .. } => BreakpointSpec::Line {
                file: resolved_file.clone(),
                line: resolved_line,
            },
            m => m,
        };
        let bp = Breakpoint {
            id,
            spec,
            resolved_file,
            resolved_line,
            enabled: true,
        };
        self.breakpoints.retain(|b| b.id != id);
        self.breakpoints.push(bp.clone());
        Ok(bp)
    }

    pub fn remove_breakpoint(&mut self, id: u32) -> Result<(), SessionError> {
        self.ensure_live()?;
        if !self.breakpoints.iter().any(|b| b.id == id) {
            return Err(SessionError::UnknownBreakpoint(id));
        }
        let resp = self.send(&DebugCommand::ClearBreakpoint(id))?;
        if let Some(err) = self.backend.evaluation_error(&resp.text) {
            warn!(id, %err, "debugger refused to clear breakpoint");
        }
        self.breakpoints.retain(|b| b.id != id);
        Ok(())
    }

    /// The breakpoint table, reconciled against the debugger's own listing.
    pub fn list_breakpoints(&mut self) -> Result<Vec<Breakpoint>, SessionError> {
        self.ensure_live()?;
        let resp = self.send(&DebugCommand::ListBreakpoints)?;
        let listed = self.backend.parse_breakpoint_list(&resp.text);
        let mut reconciled = Vec::with_capacity(listed.len());
        for row in &listed {
            match self.breakpoints.iter().find(|b| b.id == row.id) {
                Some(b) => {
                    if b.resolved_file != row.file || b.resolved_line != row.line || b.enabled != row.enabled {
                        warn!(id = row.id, "breakpoint table disagrees with debugger; using debugger's entry");
                    }
                    let spec = match &b.spec {
                        BreakpointSpec::Line { .. } => BreakpointSpec::Line {
                            file: row.file.clone(),
                            line: row.line,
                        },
                        m => m.clone(),
                    };
                    reconciled.push(Breakpoint {
                        id: row.id,
                        spec,
                        resolved_file: row.file.clone(),
                        resolved_line: row.line,
                        enabled: row.enabled,
                    });
                }
                None => {
                    warn!(id = row.id, "debugger lists a breakpoint the session does not know");
                    reconciled.push(Breakpoint {
                        id: row.id,
                        spec: BreakpointSpec::Line {
                            file: row.file.clone(),
                            line: row.line,
                        },
                        resolved_file: row.file.clone(),
                        resolved_line: row.line,
                        enabled: row.enabled,
                    });
                }
            }
        }
        for b in &self.breakpoints {
            if !listed.iter().any(|r| r.id == b.id) {
                warn!(id = b.id, "breakpoint missing from debugger listing; dropping it");
            }
        }
        self.breakpoints = reconciled;
        Ok(self.breakpoints.clone())
    }

    /// Terminates the debuggee. Idempotent.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.channel.terminate();
        self.closed = true;
        self.paused_at = None;
        debug!(session = %self.id, "session closed");
    }
}

impl Drop for DebugSession {
    fn drop(&mut self) {
        self.close();
    }
}

pub type SharedSession = Arc<Mutex<DebugSession>>;

/// Live sessions by id. Safe for concurrent create/lookup/close. Ids are
/// numbered per registry, so a replayed run sees the same ids.
#[derive(Default)]
pub struct SessionRegistry {
    sessions: Mutex<HashMap<SessionId, SharedSession>>,
    issued: AtomicU64,
}

impl SessionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, mut session: DebugSession) -> SessionId {
        let id = SessionId(self.issued.fetch_add(1, Ordering::Relaxed) + 1);
        session.id = id;
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, Arc::new(Mutex::new(session)));
        id
    }

    pub fn get(&self, id: SessionId) -> Option<SharedSession> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(&id).cloned()
    }

    /// Removes and terminates. Returns false if the id was unknown.
    pub fn close(&self, id: SessionId) -> bool {
        let removed = self.sessions.lock().unwrap_or_else(|e| e.into_inner()).remove(&id);
        match removed {
            Some(s) => {
                s.lock().unwrap_or_else(|e| e.into_inner()).close();
                true
            }
            None => false,
        }
    }

    pub fn close_all(&self) {
        let drained: Vec<SharedSession> = self
            .sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .drain()
            .map(|(_, s)| s)
            .collect();
        for s in drained {
            s.lock().unwrap_or_else(|e| e.into_inner()).close();
        }
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for SessionRegistry {
    fn drop(&mut self) {
        self.close_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::ListedBreakpoint;
    use std::sync::atomic::AtomicBool;

    type Responder = dyn Fn(&str) -> Result<String, DriverError> + Send + Sync;

    struct FakeChannel {
        state: DriverState,
        respond: Arc<Responder>,
        terminated: Arc<AtomicBool>,
    }

    impl DebugChannel for FakeChannel {
        fn state(&self) -> DriverState {
            self.state
        }
        fn pid(&self) -> Option<u32> {
            None
        }
        fn post_mortem(&self) -> bool {
            false
        }
        fn await_prompt(&mut self, _: Duration) -> Result<RawResponse, DriverError> {
            Err(DriverError::IllegalState(self.state))
        }
        fn send_command(&mut self, command: &str, _: Duration) -> Result<RawResponse, DriverError> {
            if self.state != DriverState::AtPrompt {
                return Err(DriverError::IllegalState(self.state));
            }
            match (self.respond)(command) {
                Ok(text) => Ok(RawResponse::new(text)),
                Err(e) => {
                    self.state = DriverState::Running;
                    Err(e)
                }
            }
        }
        fn terminate(&mut self) {
            self.terminated.store(true, Ordering::SeqCst);
            self.state = DriverState::Dead;
        }
    }

    struct FakeBackend {
        pdb: PdbBackend,
        respond: Arc<Responder>,
        terminated: Arc<AtomicBool>,
    }

    impl DebuggerBackend for FakeBackend {
        fn name(&self) -> &str {
            "fake"
        }
        fn spawn(&self, _: &LaunchSpec) -> Result<(Box<dyn DebugChannel>, RawResponse), DriverError> {
            let channel = FakeChannel {
                state: DriverState::AtPrompt,
                respond: self.respond.clone(),
                terminated: self.terminated.clone(),
            };
            Ok((Box::new(channel), RawResponse::new("> /w/counter.py(1)<module>()\n")))
        }
        fn render(&self, c: &DebugCommand) -> String {
            self.pdb.render(c)
        }
        fn parse_frame_header(&self, t: &str) -> Option<FrameLocation> {
            self.pdb.parse_frame_header(t)
        }
        fn classify_event(&self, r: &RawResponse) -> Result<BreakEvent, DriverError> {
            self.pdb.classify_event(r)
        }
        fn is_return_stop(&self, t: &str) -> bool {
            self.pdb.is_return_stop(t)
        }
        fn parse_breakpoint_set(&self, t: &str) -> Result<(u32, PathBuf, u32), String> {
            self.pdb.parse_breakpoint_set(t)
        }
        fn parse_breakpoint_list(&self, t: &str) -> Vec<ListedBreakpoint> {
            self.pdb.parse_breakpoint_list(t)
        }
        fn parse_stack(&self, t: &str) -> Vec<FrameLocation> {
            self.pdb.parse_stack(t)
        }
        fn parse_bindings(&self, t: &str) -> Result<Vec<(String, String)>, String> {
            self.pdb.parse_bindings(t)
        }
        fn evaluation_error(&self, t: &str) -> Option<String> {
            self.pdb.evaluation_error(t)
        }
    }

    fn workdir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (1..=12).map(|i| format!("x{i} = {i}\n")).collect();
        std::fs::write(dir.path().join("counter.py"), body).unwrap();
        dir
    }

    fn backend(respond: impl Fn(&str) -> Result<String, DriverError> + Send + Sync + 'static) -> (Arc<FakeBackend>, Arc<AtomicBool>) {
        let terminated = Arc::new(AtomicBool::new(false));
        let b = FakeBackend {
            pdb: PdbBackend::new(),
            respond: Arc::new(respond),
            terminated: terminated.clone(),
        };
        (Arc::new(b), terminated)
    }

    #[test]
    fn listing_disagreement_prefers_debugger() {
        let dir = workdir();
        let root = dir.path().canonicalize().unwrap();
        let file = root.join("counter.py");
        let f = file.display().to_string();
        let (b, _) = backend(move |cmd| {
            Ok(match cmd {
                c if c.starts_with("b ") => format!("Breakpoint 1 at {f}:7\n"),
                "c" => format!("> {f}(7)<module>()\n-> x7 = 7\n"),
                "b" => format!(
                    "Num Type         Disp Enb   Where\n1   breakpoint   keep no    at {f}:7\n5   breakpoint   keep yes   at {f}:9\n"
                ),
                other => panic!("unexpected {other}"),
            })
        });
        let req = StartRequest::new(&root, "counter.py").breakpoint("counter.py", 7);
        let (mut s, snap) = DebugSession::start_with(b, &req).unwrap();
        assert_eq!(snap.event.kind(), crate::driver::EventKind::BreakpointHit);
        let listed = s.list_breakpoints().unwrap();
        assert_eq!(listed.iter().map(|b| (b.id, b.enabled)).collect::<Vec<_>>(), [(1, false), (5, true)]);
        assert_eq!(s.breakpoints(), listed.as_slice());
        let marks: Vec<u32> = s
            .snapshot()
            .unwrap()
            .context_lines
            .iter()
            .filter(|l| l.is_breakpoint)
            .map(|l| l.number)
            .collect();
        assert_eq!(marks, [7, 9]);
    }

    #[test]
    fn injected_start_faults_terminate_the_child() {
        let dir = workdir();
        let root = dir.path().canonicalize().unwrap();
        let f = root.join("counter.py").display().to_string();

        let (b, terminated) = backend(|_| Ok("*** Blank or comment\n".into()));
        let req = StartRequest::new(&root, "counter.py").breakpoint("counter.py", 3);
        match DebugSession::start_with(b, &req) {
            Err(SessionError::StartFailed { reason, .. }) => assert_eq!(reason, StartFailure::BreakpointUnresolvable),
            other => panic!("{other:?}"),
        }
        assert!(terminated.load(Ordering::SeqCst));

        let (b, terminated) = backend(move |cmd| match cmd {
            "c" => Err(DriverError::DriverTimeout(Duration::from_secs(1))),
            _ => Ok(format!("Breakpoint 1 at {f}:3\n")),
        });
        match DebugSession::start_with(b, &req) {
            Err(SessionError::StartFailed { reason, .. }) => assert_eq!(reason, StartFailure::StartupTimeout),
            other => panic!("{other:?}"),
        }
        assert!(terminated.load(Ordering::SeqCst));
    }

    #[test]
    fn program_output_excludes_protocol_lines() {
        let text = "total 20\n--Return--\n> /w/a.py(3)f()->1\n-> return 1\n";
        assert_eq!(program_output(text), "total 20");
        assert_eq!(program_output("tests/t.py > /w/t.py(5)t()\n-> x\n"), "tests/t.py");
    }

    #[test]
    fn pytest_failure_line() {
        let text = "E   assert -1 == 5\n\ntests/test_math.py:7: AssertionError\n=== short test summary ===\n";
        let f = parse_test_failure(text).unwrap();
        assert_eq!((f.file.as_str(), f.line, f.exception_type.as_str()), ("tests/test_math.py", 7, "AssertionError"));
        assert!(parse_test_failure("all good").is_none());
    }

    #[test]
    fn session_ids_are_unique() {
        let ids: std::collections::HashSet<_> = (0..100).map(|_| SessionId::next()).collect();
        assert_eq!(ids.len(), 100);
    }
}

//! pdb over pipes.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use regex::Regex;
use tracing::debug;

use super::{
    BreakEvent, DebugChannel, DebugCommand, DebuggerBackend, DriverError, DriverState, FrameLocation,
    LaunchMode, LaunchSpec, ListedBreakpoint, RawResponse, RESPONSE_CAP, RESPONSE_TAIL,
    TRUNCATION_MARKER,
};

pub const PROMPT: &str = "(Pdb) ";

const FINISHED_MARKERS: [&str; 3] = [
    "The program finished and will be restarted",
    "The program exited via sys.exit()",
    "Post mortem debugger finished.",
];
const POST_MORTEM_MARKER: &str = "Uncaught exception. Entering post mortem debugging";

/// Grace period between the quit command and a forced kill.
const QUIT_GRACE: Duration = Duration::from_secs(2);
/// A prompt not preceded by a newline is accepted once output has been quiet this long.
const QUIET_WINDOW: Duration = Duration::from_millis(150);

fn frame_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)(?:^|\s)> (.+?)\((\d+)\)(\S*?)\(\)(?:->.*)?\r?$").unwrap())
}

fn stack_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:> |  )(.+?)\((\d+)\)(\S*?)\(\)(?:->.*)?\r?$").unwrap())
}

fn exception_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Za-z_][\w.]*)(?::\s?(.*))?$").unwrap())
}

/// Launches debuggees under `python -m pdb`.
#[derive(Debug, Clone)]
pub struct PdbBackend {
    interpreter_override: Option<String>,
}

impl Default for PdbBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl PdbBackend {
    pub fn new() -> Self {
        PdbBackend {
            interpreter_override: None,
        }
    }

    /// Forces an interpreter regardless of what the launch spec asks for.
    pub fn with_interpreter(interpreter: impl Into<String>) -> Self {
        PdbBackend {
            interpreter_override: Some(interpreter.into()),
        }
    }

    fn interpreter_argv(&self, launch: &LaunchSpec) -> Vec<String> {
        let interpreter = self
            .interpreter_override
            .as_deref()
            .unwrap_or(&launch.interpreter_cmd);
        interpreter.split_whitespace().map(str::to_string).collect()
    }

    /// Child argv for a launch, interpreter first.
    pub fn command_line(&self, launch: &LaunchSpec) -> Vec<String> {
        let mut argv = self.interpreter_argv(launch);
        match launch.mode {
            LaunchMode::Script => {
                argv.extend(["-m", "pdb"].map(String::from));
                argv.push(launch.target.clone());
            }
            LaunchMode::PytestNode => {
                argv.extend(["-m", "pdb", "-m", "pytest", "-x", "-s"].map(String::from));
                argv.push(launch.target.clone());
            }
        }
        argv
    }
}

const SYNTAX_CHECK: &str = "import ast, sys; ast.parse(open(sys.argv[1], encoding='utf-8').read(), sys.argv[1])";

/// `path::[Class::]test_name` with an optional parametrisation suffix.
pub fn is_valid_node_id(target: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[^:\s][^:]*\.py(::[A-Za-z_]\w*)?::[A-Za-z_]\w*(\[[^\]]*\])?$").unwrap()
    })
    .is_match(target)
}

impl DebuggerBackend for PdbBackend {
    fn name(&self) -> &str {
        "pdb"
    }

    fn prepare(&self, launch: &LaunchSpec) -> Result<(), DriverError> {
        let file = launch.target.split("::").next().unwrap_or_default();
        let argv = self.interpreter_argv(launch);
        let Some((program, flags)) = argv.split_first() else {
            return Err(DriverError::SpawnFailed("empty interpreter command".into()));
        };
        if !launch.workdir.join(file).is_file() {
            return Err(DriverError::TargetNotLoadable(format!("{file} not found")));
        }
        let output = Command::new(program)
            .args(flags)
            .arg("-c")
            .arg(SYNTAX_CHECK)
            .arg(file)
            .current_dir(&launch.workdir)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .output()
            .map_err(|e| DriverError::SpawnFailed(format!("{program}: {e}")))?;
        if output.status.success() {
            Ok(())
        } else {
            let stderr = String::from_utf8_lossy(&output.stderr);
            let last = stderr.lines().rfind(|l| !l.trim().is_empty()).unwrap_or("");
            Err(DriverError::TargetNotLoadable(format!("{file}: {}", last.trim())))
        }
    }

    fn spawn(&self, launch: &LaunchSpec) -> Result<(Box<dyn DebugChannel>, RawResponse), DriverError> {
        let (handle, first) = PdbHandle::spawn(self, launch)?;
        Ok((Box::new(handle), first))
    }

    fn render(&self, command: &DebugCommand) -> String {
        match command {
            DebugCommand::SetBreakpoint { file, line } => format!("b {}:{}", file.display(), line),
            DebugCommand::ClearBreakpoint(id) => format!("cl {id}"),
            DebugCommand::ListBreakpoints => "b".into(),
            DebugCommand::Continue => "c".into(),
            DebugCommand::StepOver => "n".into(),
            DebugCommand::StepInto => "s".into(),
            DebugCommand::StepOut => "r".into(),
            DebugCommand::Evaluate(expr) => format!("p {expr}"),
            DebugCommand::PrettyEvaluate(expr) => format!("pp {expr}"),
            DebugCommand::Where => "w".into(),
            DebugCommand::Args => "a".into(),
            DebugCommand::ListSource => "l .".into(),
            // Results travel hex-encoded so no repr escaping survives into parsing.
            DebugCommand::Locals => "p __import__('json').dumps([[k, repr(v)[:1000]] for k, v in \
                 locals().items() if not k.startswith('__')][:200]).encode().hex()"
                .into(),
            DebugCommand::Fields { expression, depth } => format!(
                "p __import__('json').dumps((lambda w, o: w(w, o, {depth}, ''))(lambda w, o, d, p: \
                 [x for k, v in (list(o.items()) if isinstance(o, dict) else list(vars(o).items()) \
                 if hasattr(o, '__dict__') else []) for x in [[p + str(k), repr(v)[:500]]] + \
                 (w(w, v, d - 1, p + str(k) + '.') if d > 1 else [])], ({expression}))[:400]).encode().hex()"
            ),
            DebugCommand::Quit => "q".into(),
        }
    }

    fn parse_frame_header(&self, text: &str) -> Option<FrameLocation> {
        parse_frame_header(text)
    }

    fn classify_event(&self, response: &RawResponse) -> Result<BreakEvent, DriverError> {
        classify_event(response)
    }

    fn is_launcher_stop(&self, text: &str) -> bool {
        text.lines().rev().find(|l| l.starts_with("> ")).is_some_and(|l| l.starts_with("> <string>("))
    }

    fn is_return_stop(&self, text: &str) -> bool {
        text.lines().any(|l| l.trim_end() == "--Return--")
    }

    fn parse_breakpoint_set(&self, text: &str) -> Result<(u32, PathBuf, u32), String> {
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = RE.get_or_init(|| Regex::new(r"(?m)^Breakpoint (\d+) at (.+):(\d+)\s*$").unwrap());
        if let Some(c) = re.captures_iter(text).last() {
            return Ok((c[1].parse().unwrap_or(0), PathBuf::from(&c[2]), c[3].parse().unwrap_or(0)));
        }
        Err(evaluation_error(text).unwrap_or_else(|| text.trim().to_string()))
    }

    fn parse_breakpoint_list(&self, text: &str) -> Vec<ListedBreakpoint> {
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = RE.get_or_init(|| {
            Regex::new(r"(?m)^(\d+)\s+breakpoint\s+(?:keep|del)\s+(yes|no)\s+at (.+):(\d+)\s*$").unwrap()
        });
        re.captures_iter(text)
            .map(|c| ListedBreakpoint {
                id: c[1].parse().unwrap_or(0),
                enabled: &c[2] == "yes",
                file: PathBuf::from(&c[3]),
                line: c[4].parse().unwrap_or(0),
            })
            .collect()
    }

    fn parse_stack(&self, text: &str) -> Vec<FrameLocation> {
        parse_stack(text)
    }

    fn parse_bindings(&self, text: &str) -> Result<Vec<(String, String)>, String> {
        if let Some(err) = evaluation_error(text) {
            return Err(err);
        }
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = RE.get_or_init(|| Regex::new(r"'([0-9a-f]*)'").unwrap());
        let hex = re
            .captures_iter(text)
            .last()
            .map(|c| c[1].to_string())
            .ok_or_else(|| format!("unexpected debugger output: {}", text.trim()))?;
        let bytes = hex::decode(&hex).map_err(|e| format!("malformed hex payload: {e}"))?;
        serde_json::from_slice::<Vec<(String, String)>>(&bytes).map_err(|e| e.to_string())
    }

    fn evaluation_error(&self, text: &str) -> Option<String> {
        evaluation_error(text)
    }
}

pub fn evaluation_error(text: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix("*** "))
        .map(|m| m.trim().to_string())
}

/// Extracts the last `> <path>(<line>)<function>()` header.
pub fn parse_frame_header(text: &str) -> Option<FrameLocation> {
    let caps = frame_header_re().captures_iter(text).last()?;
    let file = caps[1].trim();
    let line: u32 = caps[2].parse().ok()?;
    if file.is_empty() || line == 0 {
        return None;
    }
    Some(FrameLocation::new(file, line, &caps[3]))
}

fn is_internal_frame(file: &Path) -> bool {
    let s = file.to_string_lossy();
    if s.starts_with('<') {
        return true;
    }
    (s.ends_with("/bdb.py") || s.ends_with("/pdb.py")) && s.contains("/lib/python")
}

pub fn parse_stack(text: &str) -> Vec<FrameLocation> {
    let mut frames: Vec<FrameLocation> = text
        .lines()
        .filter_map(|l| stack_line_re().captures(l))
        .filter_map(|c| {
            let line = c[2].parse().ok()?;
            Some(FrameLocation::new(c[1].trim(), line, &c[3]))
        })
        .filter(|f| !is_internal_frame(&f.file))
        .collect();
    frames.reverse();
    frames
}

/// Pattern priority: finished marker, post-mortem marker, then frame header.
pub fn classify_event(response: &RawResponse) -> Result<BreakEvent, DriverError> {
    let text = response.protocol_text();
    if FINISHED_MARKERS.iter().any(|m| text.contains(m)) {
        return Ok(BreakEvent::RunCompleted);
    }
    if let Some(pos) = text.find(POST_MORTEM_MARKER) {
        let (exception_type, exception_message) = parse_exception(&text[..pos]);
        let location = parse_frame_header(&text[pos..])
            .ok_or_else(|| DriverError::ParseAmbiguous(summarize(text)))?;
        return Ok(BreakEvent::ExceptionRaised {
            location,
            exception_type,
            exception_message,
        });
    }
    let location = parse_frame_header(text).ok_or_else(|| DriverError::ParseAmbiguous(summarize(text)))?;
    Ok(BreakEvent::StepPause { location })
}

fn summarize(text: &str) -> String {
    let t = text.trim();
    match t.char_indices().nth(200) {
        Some((i, _)) => format!("{}...", &t[..i]),
        None => t.to_string(),
    }
}

/// Type and message from the final block of a printed traceback.
fn parse_exception(before_marker: &str) -> (String, String) {
    let tb_start = before_marker
        .rfind("Traceback (most recent call last):")
        .map(|i| i + "Traceback (most recent call last):".len())
        .unwrap_or(0);
    let lines: Vec<&str> = before_marker[tb_start..]
        .lines()
        .map(|l| l.trim_end())
        .filter(|l| !l.is_empty())
        .collect();
    // Frames and their source lines are indented; the exception starts at the
    // first unindented line after the last indented one.
    let start = lines
        .iter()
        .rposition(|l| l.starts_with(' '))
        .map(|i| i + 1)
        .unwrap_or(0);
    let Some(first) = lines.get(start) else {
        return (String::new(), String::new());
    };
    match exception_line_re().captures(first) {
        Some(c) => {
            let mut message = c.get(2).map(|m| m.as_str().to_string()).unwrap_or_default();
            for extra in &lines[start + 1..] {
                message.push('\n');
                message.push_str(extra);
            }
            (c[1].to_string(), message)
        }
        None => (String::new(), lines[start..].join("\n")),
    }
}

enum Chunk {
    Data(Vec<u8>),
    Eof,
}

/// Head-and-tail accumulator for one response.
#[derive(Default)]
struct OutputBuffer {
    head: Vec<u8>,
    tail: Vec<u8>,
    total: usize,
    overflowed: bool,
}

impl OutputBuffer {
    fn push(&mut self, bytes: &[u8]) {
        self.total += bytes.len();
        let room = RESPONSE_CAP.saturating_sub(self.head.len());
        if bytes.len() > room {
            self.overflowed = true;
        }
        self.head.extend_from_slice(&bytes[..bytes.len().min(room)]);
        self.tail.extend_from_slice(bytes);
        if self.tail.len() > RESPONSE_TAIL {
            let cut = self.tail.len() - RESPONSE_TAIL;
            self.tail.drain(..cut);
        }
    }

    fn ends_with_prompt(&self) -> bool {
        self.tail.ends_with(PROMPT.as_bytes())
    }

    fn prompt_at_line_start(&self) -> bool {
        if !self.ends_with_prompt() {
            return false;
        }
        if self.total == PROMPT.len() {
            return true;
        }
        let n = self.tail.len();
        n > PROMPT.len() && self.tail[n - PROMPT.len() - 1] == b'\n'
    }

    fn lossy(bytes: &[u8]) -> String {
        String::from_utf8_lossy(bytes).into_owned()
    }

    /// Consumes the buffer; `strip_prompt` removes the trailing sentinel.
    fn take(&mut self, strip_prompt: bool) -> RawResponse {
        let strip = if strip_prompt && self.ends_with_prompt() {
            PROMPT.len()
        } else {
            0
        };
        let response = if self.overflowed {
            let mut text = Self::lossy(&self.head);
            if !text.ends_with('\n') {
                text.push('\n');
            }
            text.push_str(TRUNCATION_MARKER);
            let tail = Self::lossy(&self.tail[..self.tail.len() - strip]);
            RawResponse {
                text,
                truncated: true,
                tail: Some(tail),
            }
        } else {
            RawResponse::new(Self::lossy(&self.head[..self.head.len() - strip]))
        };
        *self = OutputBuffer::default();
        response
    }
}

/// One `python -m pdb` child process.
pub struct PdbHandle {
    child: Child,
    stdin: Option<ChildStdin>,
    output: Receiver<Chunk>,
    buffer: OutputBuffer,
    state: DriverState,
    post_mortem: bool,
    eof: bool,
    started_at: SystemTime,
}

impl std::fmt::Debug for PdbHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PdbHandle")
            .field("pid", &self.child.id())
            .field("state", &self.state)
            .field("post_mortem", &self.post_mortem)
            .finish()
    }
}

impl PdbHandle {
    /// Spawns the child with merged stdout/stderr and waits for the first prompt.
    pub fn spawn(backend: &PdbBackend, launch: &LaunchSpec) -> Result<(Self, RawResponse), DriverError> {
        if !launch.workdir.is_dir() {
            return Err(DriverError::SpawnFailed(format!(
                "working directory {} does not exist",
                launch.workdir.display()
            )));
        }
        match launch.mode {
            LaunchMode::Script => {
                if !launch.workdir.join(&launch.target).is_file() {
                    return Err(DriverError::SpawnFailed(format!("script {} not found", launch.target)));
                }
            }
            LaunchMode::PytestNode => {
                if !is_valid_node_id(&launch.target) {
                    return Err(DriverError::SpawnFailed(format!(
                        "{} is not a test node id (path::[Class::]name)",
                        launch.target
                    )));
                }
            }
        }
        let argv = backend.command_line(launch);
        let Some((program, args)) = argv.split_first() else {
            return Err(DriverError::SpawnFailed("empty interpreter command".into()));
        };

        let (reader, writer) = std::io::pipe().map_err(|e| DriverError::SpawnFailed(e.to_string()))?;
        let writer_err = writer
            .try_clone()
            .map_err(|e| DriverError::SpawnFailed(e.to_string()))?;
        let mut pytest_opts = std::env::var("PYTEST_ADDOPTS").unwrap_or_default();
        if !pytest_opts.contains("cacheprovider") {
            pytest_opts = format!("{pytest_opts} -p no:cacheprovider").trim().to_string();
        }
        let mut command = Command::new(program);
        command
            .args(args)
            .current_dir(&launch.workdir)
            .env("PYTHONUNBUFFERED", "1")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONIOENCODING", "utf-8")
            .env("PYTEST_ADDOPTS", pytest_opts)
            .stdin(Stdio::piped())
            .stdout(writer)
            .stderr(writer_err);
        let spawned = command.spawn();
        // The parent's copies of the write ends must go, or EOF never arrives.
        drop(command);
        let mut child = spawned.map_err(|e| DriverError::SpawnFailed(format!("{program}: {e}")))?;
        debug!(pid = child.id(), ?argv, "spawned debuggee");

        let (tx, rx) = mpsc::channel();
        let mut reader = reader;
        thread::Builder::new()
            .name(format!("pdb-reader-{}", child.id()))
            .spawn(move || {
                let mut buf = [0u8; 8192];
                loop {
                    match reader.read(&mut buf) {
                        Ok(0) | Err(_) => {
                            let _ = tx.send(Chunk::Eof);
                            break;
                        }
                        Ok(n) => {
                            if tx.send(Chunk::Data(buf[..n].to_vec())).is_err() {
                                break;
                            }
                        }
                    }
                }
            })
            .map_err(|e| DriverError::SpawnFailed(e.to_string()))?;

        let stdin = child.stdin.take();
        let mut handle = PdbHandle {
            child,
            stdin,
            output: rx,
            buffer: OutputBuffer::default(),
            state: DriverState::Starting,
            post_mortem: false,
            eof: false,
            started_at: SystemTime::now(),
        };
        match handle.await_prompt(launch.timeout) {
            Ok(first) => Ok((handle, first)),
            Err(DriverError::DriverTimeout(waited)) => {
                let output = handle.buffer.take(false).text;
                handle.terminate();
                Err(DriverError::StartupTimeout { waited, output })
            }
            Err(DriverError::ProcessExited(output)) => {
                handle.terminate();
                Err(DriverError::SpawnFailed(format!("debuggee exited before the first prompt: {}", output.trim())))
            }
            Err(e) => {
                handle.terminate();
                Err(e)
            }
        }
    }

    pub fn started_at(&self) -> SystemTime {
        self.started_at
    }

    /// Bytes received since the last complete response.
    pub fn pending_output(&self) -> String {
        OutputBuffer::lossy(&self.buffer.head)
    }

    fn finish_response(&mut self) -> RawResponse {
        let response = self.buffer.take(true);
        let text = response.protocol_text();
        if FINISHED_MARKERS.iter().any(|m| text.contains(m)) {
            self.state = DriverState::Finished;
            self.post_mortem = false;
        } else {
            self.state = DriverState::AtPrompt;
            if text.contains(POST_MORTEM_MARKER) {
                self.post_mortem = true;
            }
        }
        response
    }

    fn reap(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl DebugChannel for PdbHandle {
    fn state(&self) -> DriverState {
        self.state
    }

    fn pid(&self) -> Option<u32> {
        Some(self.child.id())
    }

    fn post_mortem(&self) -> bool {
        self.post_mortem
    }

    fn await_prompt(&mut self, timeout: Duration) -> Result<RawResponse, DriverError> {
        if !matches!(self.state, DriverState::Starting | DriverState::Running) {
            return Err(DriverError::IllegalState(self.state));
        }
        let deadline = Instant::now() + timeout;
        let mut last_data = Instant::now();
        loop {
            if self.buffer.prompt_at_line_start() {
                return Ok(self.finish_response());
            }
            if self.eof {
                let output = self.buffer.take(false).text;
                self.reap();
                self.state = DriverState::Dead;
                self.stdin = None;
                return Err(DriverError::ProcessExited(output));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(DriverError::DriverTimeout(timeout));
            }
            let wait = (deadline - now).min(QUIET_WINDOW);
            match self.output.recv_timeout(wait) {
                Ok(Chunk::Data(bytes)) => {
                    self.buffer.push(&bytes);
                    last_data = Instant::now();
                }
                Ok(Chunk::Eof) | Err(RecvTimeoutError::Disconnected) => self.eof = true,
                Err(RecvTimeoutError::Timeout) => {
                    if self.buffer.ends_with_prompt() && last_data.elapsed() >= QUIET_WINDOW {
                        return Ok(self.finish_response());
                    }
                }
            }
        }
    }

    fn send_command(&mut self, command: &str, timeout: Duration) -> Result<RawResponse, DriverError> {
        if self.state != DriverState::AtPrompt {
            return Err(DriverError::IllegalState(self.state));
        }
        if command.contains('\n') || command.contains('\r') {
            return Err(DriverError::InvalidCommand("commands must be a single line".into()));
        }
        let Some(stdin) = self.stdin.as_mut() else {
            return Err(DriverError::IllegalState(self.state));
        };
        let written = stdin
            .write_all(command.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush());
        self.state = DriverState::Running;
        if let Err(e) = written {
            debug!(error = %e, "write to debugger failed");
        }
        self.await_prompt(timeout)
    }

    fn terminate(&mut self) {
        if self.state == DriverState::Dead {
            return;
        }
        let at_prompt = matches!(self.state, DriverState::AtPrompt | DriverState::Finished);
        if at_prompt {
            if let Some(stdin) = self.stdin.as_mut() {
                let _ = stdin.write_all(b"q\n");
                let _ = stdin.flush();
            }
        }
        // EOF on stdin also ends a restarted or post-mortem pdb loop.
        self.stdin = None;
        if at_prompt {
            let deadline = Instant::now() + QUIT_GRACE;
            while Instant::now() < deadline {
                match self.child.try_wait() {
                    Ok(Some(_)) | Err(_) => break,
                    Ok(None) => thread::sleep(Duration::from_millis(10)),
                }
            }
        }
        self.reap();
        self.state = DriverState::Dead;
        self.post_mortem = false;
    }
}

impl Drop for PdbHandle {
    fn drop(&mut self) {
        self.terminate();
    }
}

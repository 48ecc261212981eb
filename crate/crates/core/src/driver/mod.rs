//! Process-level debugger driver.
//!
//! A [`DebuggerBackend`] knows how to launch a debuggee under a particular
//! command-line debugger and how to read that debugger's text dialect. The
//! live connection is a [`DebugChannel`]: commands go in, prompt-delimited
//! [`RawResponse`]s come out. Only the pdb backend over pipes is provided
//! ([`pdb::PdbBackend`]); everything above this module talks to the traits.

pub mod pdb;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pdb::{PdbBackend, PdbHandle};

/// Byte cap for a single response's `text`.
pub const RESPONSE_CAP: usize = 64 * 1024;
/// Bytes of trailing output kept for protocol parsing once a response overflows.
pub const RESPONSE_TAIL: usize = 8 * 1024;
/// Final line of a response whose text was cut at [`RESPONSE_CAP`].
pub const TRUNCATION_MARKER: &str = "[... output truncated ...]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriverState {
    Starting,
    AtPrompt,
    Running,
    Finished,
    Dead,
}

impl DriverState {
    pub fn is_terminal(self) -> bool {
        matches!(self, DriverState::Finished | DriverState::Dead)
    }
}

impl fmt::Display for DriverState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMode {
    /// `<interpreter> -m pdb <script>`
    Script,
    /// `<interpreter> -m pdb -m pytest -x -s <nodeid>`
    PytestNode,
}

impl LaunchMode {
    /// Node ids carry `::` separators; anything else is run as a script.
    pub fn infer(target: &str) -> Self {
        if target.contains("::") {
            LaunchMode::PytestNode
        } else {
            LaunchMode::Script
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub workdir: PathBuf,
    pub mode: LaunchMode,
    pub target: String,
    pub interpreter_cmd: String,
    pub timeout: Duration,
}

impl LaunchSpec {
    pub fn new(workdir: impl Into<PathBuf>, target: impl Into<String>) -> Self {
        let target = target.into();
        LaunchSpec {
            workdir: workdir.into(),
            mode: LaunchMode::infer(&target),
            target,
            interpreter_cmd: DEFAULT_INTERPRETER.to_string(),
            timeout: Duration::from_secs(30),
        }
    }
}

pub const DEFAULT_INTERPRETER: &str = "python3";

/// A source position the debuggee is (or was) stopped at.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameLocation {
    pub file: PathBuf,
    pub line: u32,
    pub function: String,
}

impl FrameLocation {
    pub fn new(file: impl Into<PathBuf>, line: u32, function: impl Into<String>) -> Self {
        FrameLocation {
            file: file.into(),
            line,
            function: function.into(),
        }
    }

    pub fn is_in(&self, file: &Path) -> bool {
        self.file == file
    }
}

impl fmt::Display for FrameLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} in {}()", self.file.display(), self.line, self.function)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    BreakpointHit,
    StepPause,
    ExceptionRaised,
    RunCompleted,
}

/// What the debuggee did in response to the last command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BreakEvent {
    BreakpointHit {
        location: FrameLocation,
    },
    StepPause {
        location: FrameLocation,
    },
    ExceptionRaised {
        location: FrameLocation,
        exception_type: String,
        exception_message: String,
    },
    RunCompleted,
}

impl BreakEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            BreakEvent::BreakpointHit { .. } => EventKind::BreakpointHit,
            BreakEvent::StepPause { .. } => EventKind::StepPause,
            BreakEvent::ExceptionRaised { .. } => EventKind::ExceptionRaised,
            BreakEvent::RunCompleted => EventKind::RunCompleted,
        }
    }

    pub fn location(&self) -> Option<&FrameLocation> {
        match self {
            BreakEvent::BreakpointHit { location }
            | BreakEvent::StepPause { location }
            | BreakEvent::ExceptionRaised { location, .. } => Some(location),
            BreakEvent::RunCompleted => None,
        }
    }
}

impl fmt::Display for BreakEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BreakEvent::BreakpointHit { location } => write!(f, "breakpoint hit at {location}"),
            BreakEvent::StepPause { location } => write!(f, "paused at {location}"),
            BreakEvent::ExceptionRaised {
                location,
                exception_type,
                exception_message,
            } => {
                write!(f, "uncaught {exception_type}")?;
                if !exception_message.is_empty() {
                    write!(f, ": {exception_message}")?;
                }
                write!(f, " (post-mortem at {location})")
            }
            BreakEvent::RunCompleted => f.write_str("program finished"),
        }
    }
}

/// Everything the debugger printed between two prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawResponse {
    pub text: String,
    pub truncated: bool,
    /// Last [`RESPONSE_TAIL`] bytes of the untruncated output; only set when
    /// `truncated` is true, so frame headers after a flood of output survive.
    pub tail: Option<String>,
}

impl RawResponse {
    pub fn new(text: impl Into<String>) -> Self {
        RawResponse {
            text: text.into(),
            truncated: false,
            tail: None,
        }
    }

    /// Text to run protocol parsers over.
    pub fn protocol_text(&self) -> &str {
        match &self.tail {
            Some(tail) if self.truncated => tail,
            _ => &self.text,
        }
    }
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("could not start debuggee: {0}")]
    SpawnFailed(String),
    #[error("no debugger prompt within {waited:?}: {output}")]
    StartupTimeout { waited: Duration, output: String },
    #[error("debugger did not return to the prompt within {0:?}")]
    DriverTimeout(Duration),
    #[error("debuggee process exited: {0}")]
    ProcessExited(String),
    #[error("illegal in state {0}")]
    IllegalState(DriverState),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("target does not load: {0}")]
    TargetNotLoadable(String),
    #[error("response has no frame header: {0}")]
    ParseAmbiguous(String),
}

/// One row of the debugger's own breakpoint listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListedBreakpoint {
    pub id: u32,
    pub file: PathBuf,
    pub line: u32,
    pub enabled: bool,
}

/// Debugger-independent command vocabulary used by the session layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DebugCommand {
    SetBreakpoint { file: PathBuf, line: u32 },
    ClearBreakpoint(u32),
    ListBreakpoints,
    Continue,
    StepOver,
    StepInto,
    StepOut,
    Evaluate(String),
    PrettyEvaluate(String),
    Where,
    Args,
    ListSource,
    Locals,
    Fields { expression: String, depth: u8 },
    Quit,
}

/// A live connection to one debuggee.
///
/// At most one command is in flight: `send_command` requires
/// [`DriverState::AtPrompt`] and blocks until the next prompt or deadline.
pub trait DebugChannel: Send {
    fn state(&self) -> DriverState;
    fn pid(&self) -> Option<u32>;
    /// True while stopped in post-mortem after an uncaught exception.
    fn post_mortem(&self) -> bool;
    fn await_prompt(&mut self, timeout: Duration) -> Result<RawResponse, DriverError>;
    fn send_command(&mut self, command: &str, timeout: Duration) -> Result<RawResponse, DriverError>;
    /// Idempotent; absorbs all failures.
    fn terminate(&mut self);
}

/// Launching plus the text dialect of one command-line debugger.
pub trait DebuggerBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Build or load-check the target before launching. For interpreted
    /// targets this is a syntax/import-resolvability check only.
    fn prepare(&self, _launch: &LaunchSpec) -> Result<(), DriverError> {
        Ok(())
    }

    /// Starts the debuggee and waits for the first prompt. Returns the live
    /// channel and the text printed before that prompt.
    fn spawn(&self, launch: &LaunchSpec) -> Result<(Box<dyn DebugChannel>, RawResponse), DriverError>;

    fn render(&self, command: &DebugCommand) -> String;

    /// Last current-frame header in `text`.
    fn parse_frame_header(&self, text: &str) -> Option<FrameLocation>;

    fn classify_event(&self, response: &RawResponse) -> Result<BreakEvent, DriverError>;

    /// True when the response stops on a function-return event.
    fn is_return_stop(&self, text: &str) -> bool;

    /// True when stepping left the program and stopped in the debugger's own
    /// launch frame. Nothing of the program remains to run.
    fn is_launcher_stop(&self, _text: &str) -> bool {
        false
    }

    /// Parses a set-breakpoint confirmation into `(id, file, line)`.
    fn parse_breakpoint_set(&self, text: &str) -> Result<(u32, PathBuf, u32), String>;

    fn parse_breakpoint_list(&self, text: &str) -> Vec<ListedBreakpoint>;

    /// Innermost-first frames, debugger internals removed.
    fn parse_stack(&self, text: &str) -> Vec<FrameLocation>;

    /// Decodes the output of [`DebugCommand::Locals`] or [`DebugCommand::Fields`].
    fn parse_bindings(&self, text: &str) -> Result<Vec<(String, String)>, String>;

    /// The debugger's error message if evaluation failed.
    fn evaluation_error(&self, text: &str) -> Option<String>;
}

//! The main coding-agent loop: tool registry per configuration, edit gating,
//! main prompt and the episode runner.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use similar::TextDiff;
use thiserror::Error;
use tracing::{info, warn};
use walkdir::WalkDir;

use crate::process::run_captured;
use crate::llm::{ChatBackend, ChatMessage, LlmError, Role, TokenUsage, ToolCall, ToolSchema};
use crate::subagent::{debug_subagent_schema, run_subagent, DebugTask, SubagentConfig, DEBUG_SUBAGENT};
use crate::telemetry::{digest, now_timestamp, Agent, QuestionCategory, TelemetryError, TrajectorySink, TrajectoryStep, TranscriptEntry};
use crate::tools::{
    debug_tool_schemas, dispatch_workspace, parse_args, unknown_tool, workspace_tool_schemas, DebugToolbox, ToolOutput,
    DEBUG_TOOLS,
};
use crate::workspace::{Workspace, WorkspaceError, SKIP_DIRS};

pub const BASH: &str = "bash";
pub const EDIT_FILE: &str = "edit_file";
pub const DEFAULT_MAX_MAIN_STEPS: u32 = 60;
const BASH_OUTPUT_CAP: usize = 16 * 1024;
const MAIN_PROMPT: &str = include_str!("../assets/main_prompt.v1.txt");
const DEBUG_SECTION: &str = include_str!("../assets/debug_section.v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Configuration {
    Baseline,
    DebugToolsOnly,
    Debug2Fix,
    Debug2FixToolLimit,
}

impl Configuration {
    pub const ALL: [Configuration; 4] = [
        Configuration::Baseline,
        Configuration::DebugToolsOnly,
        Configuration::Debug2Fix,
        Configuration::Debug2FixToolLimit,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            Configuration::Baseline => "baseline",
            Configuration::DebugToolsOnly => "debug-tools-only",
            Configuration::Debug2Fix => "debug2fix",
            Configuration::Debug2FixToolLimit => "debug2fix-tool-limit",
        }
    }

    pub fn uses_subagent(self) -> bool {
        matches!(self, Configuration::Debug2Fix | Configuration::Debug2FixToolLimit)
    }

    pub fn policy(self) -> GatingPolicy {
        match self {
            Configuration::Debug2FixToolLimit => GatingPolicy::GateEditsUntilDebug,
            _ => GatingPolicy::None,
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for Configuration {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Configuration::ALL
            .into_iter()
            .find(|c| c.flag() == s)
            .ok_or_else(|| format!("unknown configuration `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatingPolicy {
    None,
    GateEditsUntilDebug,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GatingState {
    pub policy: GatingPolicy,
    pub subagent_calls: u32,
    pub edits_unlocked: bool,
}

impl GatingState {
    pub fn new(policy: GatingPolicy) -> Self {
        GatingState {
            policy,
            subagent_calls: 0,
            edits_unlocked: policy == GatingPolicy::None,
        }
    }

    pub fn record_subagent_call(&mut self) {
        self.subagent_calls += 1;
        self.edits_unlocked = true;
    }
}

pub const POLICY_REJECTION: &str = "PolicyRejection: file edits are disabled until you have called debug_subagent at least once. \
Use debug_subagent to understand the bug at runtime, then make your change. Reading and searching files is still allowed.";

/// True for shell commands that look like they write files.
pub fn is_edit_command(cmd: &str) -> bool {
    static HARMLESS: OnceLock<Regex> = OnceLock::new();
    static WRITERS: OnceLock<Regex> = OnceLock::new();
    let harmless = HARMLESS.get_or_init(|| Regex::new(r"\d?>&\d|&?\d?>\s*/dev/null").unwrap());
    let writers = WRITERS.get_or_init(|| {
        Regex::new(
            r"(?x)(^|[\s;&|(`])(
                sed\s+(-[^\s]*\s+)*-[a-zA-Z]*i |
                perl\s+(-[^\s]*\s+)*-[a-zA-Z]*i |
                tee | rm | mv | cp | touch | mkdir | rmdir | truncate | dd | patch | chmod | chown | ln |
                install | unlink | shred | rsync |
                git\s+(apply|checkout|restore|reset|stash|am|clean|commit|merge|rebase|cherry-pick|mv|rm|switch|pull)
            )(\s|$)",
        )
        .unwrap()
    });
    let stripped = harmless.replace_all(cmd, " ");
    stripped.contains('>') || writers.is_match(&stripped)
}

#[derive(Debug, Clone)]
pub struct ToolRegistry {
    schemas: Vec<ToolSchema>,
}

impl ToolRegistry {
    pub fn names(&self) -> Vec<String> {
        self.schemas.iter().map(|s| s.name.clone()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.schemas.iter().any(|s| s.name == name)
    }

    pub fn schemas(&self) -> &[ToolSchema] {
        &self.schemas
    }
}

pub fn build_tool_registry(configuration: Configuration) -> ToolRegistry {
    let mut schemas = vec![bash_schema()];
    schemas.extend(workspace_tool_schemas());
    schemas.push(edit_file_schema());
    match configuration {
        Configuration::Baseline => {}
        Configuration::DebugToolsOnly => schemas.extend(debug_tool_schemas()),
        Configuration::Debug2Fix | Configuration::Debug2FixToolLimit => schemas.push(debug_subagent_schema()),
    }
    ToolRegistry { schemas }
}

fn bash_schema() -> ToolSchema {
    ToolSchema::new(
        BASH,
        "Run a shell command in the repository root and return its combined output and exit status.",
        json!({
            "type": "object",
            "properties": {
                "command": {"type": "string"},
                "timeout_s": {"type": "integer", "minimum": 1}
            },
            "required": ["command"],
            "additionalProperties": false
        }),
    )
}

fn edit_file_schema() -> ToolSchema {
    ToolSchema::new(
        EDIT_FILE,
        "Replace exactly one occurrence of old_text with new_text in a file. With an empty old_text, creates a new file.",
        json!({
            "type": "object",
            "properties": {
                "path": {"type": "string"},
                "old_text": {"type": "string"},
                "new_text": {"type": "string"}
            },
            "required": ["path", "old_text", "new_text"],
            "additionalProperties": false
        }),
    )
}

pub fn render_main_prompt(configuration: Configuration) -> String {
    let section = if configuration.uses_subagent() {
        format!("\n{DEBUG_SECTION}\n")
    } else {
        String::new()
    };
    MAIN_PROMPT.replace("{debug_section}\n", &section)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BashArgs {
    command: String,
    timeout_s: Option<u64>,
}

/// Runs `sh -c command` in `dir`, killing its process group on timeout.
pub fn run_bash(dir: &Path, command: &str, timeout: Duration) -> ToolOutput {
    let captured = match run_captured(Command::new("sh").arg("-c").arg(command).current_dir(dir), timeout) {
        Ok(c) => c,
        Err(e) => return ToolOutput::error(format!("could not run sh: {e}")),
    };
    let status = captured.status;
    let mut text = String::from_utf8_lossy(&captured.stdout).into_owned();
    text.push_str(&String::from_utf8_lossy(&captured.stderr));
    if text.len() > BASH_OUTPUT_CAP {
        let mut cut = text.len() - BASH_OUTPUT_CAP;
        while !text.is_char_boundary(cut) {
            cut += 1;
        }
        text = format!("[output truncated]\n{}", &text[cut..]);
    }
    match status {
        Some(s) => {
            let code = s.code().map_or("signal".to_string(), |c| c.to_string());
            ToolOutput {
                text: format!("{text}\n[exit status {code}]"),
                is_error: !s.success(),
            }
        }
        None => ToolOutput::error(format!("command timed out after {}s\n{text}", timeout.as_secs())),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditArgs {
    path: String,
    old_text: String,
    new_text: String,
}

fn edit_file(ws: &Workspace, a: EditArgs) -> ToolOutput {
    match ws.resolve(&a.path) {
        Ok(real) => {
            if !real.is_file() {
                return ToolOutput::error(format!("{} is not a file", a.path));
            }
            let Ok(text) = std::fs::read_to_string(&real) else {
                return ToolOutput::error(WorkspaceError::NotUtf8Text(a.path));
            };
            if a.old_text.is_empty() {
                return ToolOutput::error("old_text is empty; it must match existing text exactly once");
            }
            match text.matches(&a.old_text).count() {
                0 => ToolOutput::error(format!("old_text not found in {}", a.path)),
                1 => match std::fs::write(&real, text.replacen(&a.old_text, &a.new_text, 1)) {
                    Ok(()) => ToolOutput::ok(format!("Edited {}", a.path)),
                    Err(e) => ToolOutput::error(format!("could not write {}: {e}", a.path)),
                },
                n => ToolOutput::error(format!("old_text occurs {n} times in {}; make it unique", a.path)),
            }
        }
        Err(_) if a.old_text.is_empty() => {
            let rel = Path::new(&a.path);
            let inside = !rel.is_absolute() && rel.components().all(|c| matches!(c, std::path::Component::Normal(_)));
            if !inside {
                return ToolOutput::error(format!("{} is outside the repository", a.path));
            }
            let target = ws.root().join(rel);
            if let Some(parent) = target.parent() {
                if let Err(e) = std::fs::create_dir_all(parent) {
                    return ToolOutput::error(format!("could not create {}: {e}", parent.display()));
                }
            }
            match std::fs::write(&target, &a.new_text) {
                Ok(()) => ToolOutput::ok(format!("Created {}", a.path)),
                Err(e) => ToolOutput::error(format!("could not write {}: {e}", a.path)),
            }
        }
        Err(e) => ToolOutput::error(e),
    }
}

/// Text files of a tree keyed by relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Snapshot(BTreeMap<String, String>);

impl Snapshot {
    pub fn take(root: &Path) -> Self {
        let files = WalkDir::new(root)
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || !SKIP_DIRS.contains(&e.file_name().to_string_lossy().as_ref()))
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file())
            .filter_map(|e| {
                let rel = e.path().strip_prefix(root).ok()?.to_string_lossy().into_owned();
                let text = std::fs::read_to_string(e.path()).ok()?;
                (!text.contains('\0')).then_some((rel, text))
            })
            .collect();
        Snapshot(files)
    }

    /// Unified diff from `self` to `after`.
    pub fn diff(&self, after: &Snapshot) -> String {
        let mut paths: Vec<&String> = self.0.keys().chain(after.0.keys()).collect();
        paths.sort();
        paths.dedup();
        let mut out = String::new();
        for path in paths {
            let old = self.0.get(path).map(String::as_str);
            let new = after.0.get(path).map(String::as_str);
            if old == new {
                continue;
            }
            let a = if old.is_some() { format!("a/{path}") } else { "/dev/null".into() };
            let b = if new.is_some() { format!("b/{path}") } else { "/dev/null".into() };
            let diff = TextDiff::from_lines(old.unwrap_or(""), new.unwrap_or(""));
            out.push_str(&diff.unified_diff().context_radius(3).header(&a, &b).to_string());
        }
        out
    }
}

/// Task file for an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub task: String,
    pub test: String,
    pub repo: PathBuf,
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub configuration: Configuration,
    pub max_main_steps: u32,
    pub workdir: PathBuf,
    pub task: String,
    pub test: String,
    pub episode_id: String,
    pub sub_max_steps: u32,
    pub interpreter_cmd: String,
    pub session_timeout: Duration,
    pub bash_timeout: Duration,
}

impl EpisodeConfig {
    pub fn new(configuration: Configuration, workdir: impl Into<PathBuf>, task: impl Into<String>, test: impl Into<String>) -> Self {
        EpisodeConfig {
            configuration,
            max_main_steps: DEFAULT_MAX_MAIN_STEPS,
            workdir: workdir.into(),
            task: task.into(),
            test: test.into(),
            episode_id: "episode".into(),
            sub_max_steps: crate::subagent::MAX_STEPS,
            interpreter_cmd: crate::driver::DEFAULT_INTERPRETER.to_string(),
            session_timeout: Duration::from_secs(30),
            bash_timeout: Duration::from_secs(120),
        }
    }

    fn user_message(&self) -> String {
        format!("{}\n\nFailing test: {}", self.task.trim(), self.test.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Completed,
    StepLimit,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EpisodeResult {
    pub final_patch: String,
    pub main_steps: u32,
    pub sub_invocations: u32,
    pub trajectory_ref: Option<PathBuf>,
    pub status: EpisodeStatus,
    pub main_tokens: TokenUsage,
    pub sub_tokens: TokenUsage,
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("workdir: {0}")]
    Workdir(#[from] WorkspaceError),
    #[error("main agent backend failed: {0}")]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// Tool dispatch for the main loop, with gating applied.
pub struct MainTools<'a> {
    pub gating: GatingState,
    registry: ToolRegistry,
    workspace: Workspace,
    toolbox: Option<DebugToolbox>,
    config: &'a EpisodeConfig,
    sub_backend: &'a dyn ChatBackend,
    sink: Option<&'a TrajectorySink>,
    sub_invocations: u32,
    sub_tokens: TokenUsage,
}

impl<'a> MainTools<'a> {
    pub fn new(
        config: &'a EpisodeConfig,
        sub_backend: &'a dyn ChatBackend,
        sink: Option<&'a TrajectorySink>,
    ) -> Result<Self, EpisodeError> {
        let workspace = Workspace::new(&config.workdir)?;
        let toolbox = (config.configuration == Configuration::DebugToolsOnly).then(|| {
            let mut tb = DebugToolbox::new(workspace.clone());
            tb.interpreter_cmd = config.interpreter_cmd.clone();
            tb.default_timeout = config.session_timeout;
            tb
        });
        Ok(MainTools {
            gating: GatingState::new(config.configuration.policy()),
            registry: build_tool_registry(config.configuration),
            workspace,
            toolbox,
            config,
            sub_backend,
            sink,
            sub_invocations: 0,
            sub_tokens: TokenUsage::default(),
        })
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    pub fn sub_invocations(&self) -> u32 {
        self.sub_invocations
    }

    fn is_edit_call(call: &ToolCall) -> bool {
        match call.name.as_str() {
            EDIT_FILE => true,
            BASH => parse_args::<BashArgs>(BASH, &call.arguments).is_ok_and(|a| is_edit_command(&a.command)),
            _ => false,
        }
    }

    pub fn handle_tool_call(&mut self, call: &ToolCall) -> Result<ToolOutput, EpisodeError> {
        if !self.registry.contains(&call.name) {
            return Ok(unknown_tool(&call.name, &self.registry.names()));
        }
        if !self.gating.edits_unlocked && Self::is_edit_call(call) {
            info!(tool = %call.name, "edit rejected by gating policy");
            return Ok(ToolOutput {
                text: POLICY_REJECTION.to_string(),
                is_error: true,
            });
        }
        let name = call.name.as_str();
        let args = call.arguments.as_str();
        Ok(match name {
            BASH => match parse_args::<BashArgs>(name, args) {
                Ok(a) => {
                    let timeout = a.timeout_s.map(Duration::from_secs).unwrap_or(self.config.bash_timeout);
                    run_bash(self.workspace.root(), &a.command, timeout)
                }
                Err(e) => e,
            },
            EDIT_FILE => match parse_args::<EditArgs>(name, args) {
                Ok(a) => edit_file(&self.workspace, a),
                Err(e) => e,
            },
            DEBUG_SUBAGENT => match parse_args::<DebugTask>(name, args) {
                Ok(task) => self.call_subagent(&task)?,
                Err(e) => e,
            },
            _ if DEBUG_TOOLS.contains(&name) => match self.toolbox.as_mut().and_then(|tb| tb.dispatch(name, args)) {
                Some(out) => out,
                None => unknown_tool(name, &self.registry.names()),
            },
            _ => dispatch_workspace(&self.workspace, name, args).unwrap_or_else(|| unknown_tool(name, &self.registry.names())),
        })
    }

    fn call_subagent(&mut self, task: &DebugTask) -> Result<ToolOutput, EpisodeError> {
        if let Err(e) = task.validate() {
            return Ok(ToolOutput::error(format!("invalid arguments for {DEBUG_SUBAGENT}: {e}")));
        }
        self.sub_invocations += 1;
        self.gating.record_subagent_call();
        let mut sub = SubagentConfig::new(self.workspace.root(), format!("{}#sub{}", self.config.episode_id, self.sub_invocations));
        sub.max_steps = self.config.sub_max_steps;
        sub.interpreter_cmd = self.config.interpreter_cmd.clone();
        sub.session_timeout = self.config.session_timeout;
        let run = run_subagent(task, &sub, self.sub_backend);
        self.sub_tokens += run.trajectory.token_usage;
        if let Some(sink) = self.sink {
            for step in &run.trajectory.steps {
                sink.append_step(step)?;
            }
            for entry in &run.trajectory.transcript {
                sink.append_transcript(entry)?;
            }
        }
        Ok(ToolOutput {
            text: run.caller_text(),
            is_error: run.failure.is_some(),
        })
    }

    pub fn close(&mut self) {
        if let Some(tb) = self.toolbox.as_mut() {
            tb.close();
        }
    }
}

impl Drop for MainTools<'_> {
    fn drop(&mut self) {
        self.close();
    }
}

/// Runs one episode. Main and subagent may share one backend.
pub fn run_episode(
    config: &EpisodeConfig,
    main_backend: &dyn ChatBackend,
    sub_backend: &dyn ChatBackend,
    sink: Option<&TrajectorySink>,
) -> Result<EpisodeResult, EpisodeError> {
    let mut tools = MainTools::new(config, sub_backend, sink)?;
    let before = Snapshot::take(tools.workspace.root());
    let schemas = tools.registry().schemas().to_vec();
    let mut messages = vec![
        ChatMessage::system(render_main_prompt(config.configuration)),
        ChatMessage::user(config.user_message()),
    ];
    let mut main_steps = 0u32;
    let mut main_tokens = TokenUsage::default();
    let mut status = EpisodeStatus::StepLimit;
    info!(episode = %config.episode_id, configuration = %config.configuration, "episode started");

    while main_steps < config.max_main_steps {
        let completion = main_backend.complete(&messages, &schemas)?;
        main_steps += 1;
        main_tokens += completion.usage;
        let msg = completion.message;
        messages.push(msg.clone());
        let mut results = Vec::new();
        for call in &msg.tool_calls {
            let out = tools.handle_tool_call(call)?;
            messages.push(ChatMessage::tool(call.id.clone(), out.text.clone()));
            results.push(out.text);
        }
        if let Some(sink) = sink {
            let names: Vec<&str> = msg.tool_calls.iter().map(|c| c.name.as_str()).collect();
            let args: Vec<&str> = msg.tool_calls.iter().map(|c| c.arguments.as_str()).collect();
            let category = msg
                .tool_calls
                .iter()
                .find(|c| c.name == DEBUG_SUBAGENT)
                .and_then(|c| serde_json::from_str::<serde_json::Value>(&c.arguments).ok())
                .and_then(|v| v.get("question").and_then(|q| q.as_str()).and_then(QuestionCategory::classify));
            sink.append_step(&TrajectoryStep {
                episode_id: config.episode_id.clone(),
                agent: Agent::Main,
                step_index: main_steps,
                role: Role::Assistant,
                content_digest: digest(&msg.content),
                tool_name: (!names.is_empty()).then(|| names.join(",")),
                tool_args_digest: (!args.is_empty()).then(|| digest(&args.join("\n"))),
                tokens: completion.usage,
                timestamp: now_timestamp(),
                question_category: category,
            })?;
            sink.append_transcript(&TranscriptEntry {
                episode_id: config.episode_id.clone(),
                agent: Agent::Main,
                step_index: main_steps,
                content: msg.content.clone(),
                tool_calls: msg.tool_calls.iter().map(|c| (c.name.clone(), c.arguments.clone())).collect(),
                tool_results: results,
            })?;
        }
        if msg.tool_calls.is_empty() {
            status = EpisodeStatus::Completed;
            break;
        }
    }
    if status == EpisodeStatus::StepLimit {
        warn!(steps = main_steps, "episode hit the step limit");
    }
    tools.close();
    let final_patch = before.diff(&Snapshot::take(tools.workspace.root()));
    Ok(EpisodeResult {
        final_patch,
        main_steps,
        sub_invocations: tools.sub_invocations,
        trajectory_ref: sink.map(|s| s.path().to_path_buf()),
        status,
        main_tokens,
        sub_tokens: tools.sub_tokens,
    })
}

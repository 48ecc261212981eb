//! The debugging subagent: an LLM loop over the session and workspace tools
//! that ends in a `<debug_answer>` block.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::llm::{ChatBackend, ChatMessage, Completion, LlmError, Role, TokenUsage, ToolSchema};
use crate::telemetry::{digest, now_timestamp, Agent, TrajectoryStep, TranscriptEntry};
use crate::tools::{self, unknown_tool, DebugToolbox, ToolOutput, DEBUG_TOOLS, WORKSPACE_TOOLS};
use crate::workspace::Workspace;

pub const MAX_STEPS: u32 = 25;
pub const DEBUG_SUBAGENT: &str = "debug_subagent";
pub const FINALIZATION_PROMPT: &str =
    "You have reached the step limit. Provide your final <debug_answer> block now using the evidence gathered so far.";
const CONTINUE_PROMPT: &str = "Continue the investigation with the tools, and end with a <debug_answer> block.";
const PROMPT_TEMPLATE: &str = include_str!("../assets/subagent_prompt.v1.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("`{0}` must not be empty")]
    Empty(&'static str),
    #[error("line numbers start at 1")]
    BadLine,
}

/// A runtime question from the main agent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebugTask {
    pub question: String,
    pub test: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lines: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
}

impl DebugTask {
    pub fn new(question: impl Into<String>, test: impl Into<String>) -> Self {
        DebugTask {
            question: question.into(),
            test: test.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.question.trim().is_empty() {
            return Err(TaskError::Empty("question"));
        }
        if self.test.trim().is_empty() {
            return Err(TaskError::Empty("test"));
        }
        if self.lines.contains(&0) {
            return Err(TaskError::BadLine);
        }
        Ok(())
    }

    /// The first user message of a subagent conversation.
    pub fn render(&self) -> String {
        let mut out = format!("Runtime question: {}\nTest: {}\n", self.question.trim(), self.test.trim());
        if let Some(p) = &self.path {
            let _ = writeln!(out, "Path: {p}");
        }
        if !self.lines.is_empty() {
            let lines: Vec<String> = self.lines.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "Lines: {}", lines.join(", "));
        }
        if let Some(v) = &self.variable {
            let _ = writeln!(out, "Variable: {v}");
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebugAnswer {
    pub question: String,
    pub answer: String,
    pub evidence: String,
    pub location: String,
    pub raw_block: String,
    pub well_formed: bool,
}

impl DebugAnswer {
    /// The block as the caller sees it. A well-formed answer is returned as
    /// the model wrote it.
    pub fn render(&self) -> String {
        if self.well_formed {
            return self.raw_block.clone();
        }
        format!(
            "<debug_answer>\n**Question**: {}\n**Answer**: {}\n**Evidence**: {}\n**Location**: {}\n</debug_answer>",
            self.question, self.answer, self.evidence, self.location
        )
    }
}

/// Parses the last `<debug_answer>` block in `text`.
pub fn extract_debug_answer(text: &str) -> DebugAnswer {
    static BLOCK: OnceLock<Regex> = OnceLock::new();
    static LABEL: OnceLock<Regex> = OnceLock::new();
    let block = BLOCK.get_or_init(|| Regex::new(r"(?s)<debug_answer>(.*?)</debug_answer>").unwrap());
    let label = LABEL.get_or_init(|| Regex::new(r"(?m)^[ \t]*\*\*(Question|Answer|Evidence|Location)\*\*:[ \t]*").unwrap());

    let Some(caps) = block.captures_iter(text).last() else {
        return DebugAnswer::default();
    };
    let body = caps.get(1).map_or("", |m| m.as_str());
    let mut answer = DebugAnswer {
        raw_block: caps[0].to_string(),
        ..Default::default()
    };
    let marks: Vec<(String, usize, usize)> = label
        .captures_iter(body)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].to_string(), m.start(), m.end())
        })
        .collect();
    for (i, (name, _, value_start)) in marks.iter().enumerate() {
        let value_end = marks.get(i + 1).map_or(body.len(), |m| m.1);
        let value = body[*value_start..value_end].trim().to_string();
        let slot = match name.as_str() {
            "Question" => &mut answer.question,
            "Answer" => &mut answer.answer,
            "Evidence" => &mut answer.evidence,
            _ => &mut answer.location,
        };
        if slot.is_empty() {
            *slot = value;
        }
    }
    answer.well_formed = [&answer.question, &answer.answer, &answer.evidence, &answer.location]
        .iter()
        .all(|f| !f.is_empty());
    answer
}

pub fn subagent_tool_names() -> Vec<String> {
    DEBUG_TOOLS.iter().chain(WORKSPACE_TOOLS.iter()).map(|s| s.to_string()).collect()
}

pub fn subagent_tool_schemas() -> Vec<ToolSchema> {
    let mut schemas = tools::debug_tool_schemas();
    schemas.extend(tools::workspace_tool_schemas());
    schemas
}

/// The subagent system prompt, tool list taken from the registered tools.
pub fn render_subagent_prompt() -> String {
    let list: Vec<String> = subagent_tool_schemas()
        .iter()
        .map(|s| format!("- {}: {}", s.name, tools::short_description(&s.name)))
        .collect();
    PROMPT_TEMPLATE.replace("{tools}", &list.join("\n"))
}

/// Schema of the tool the main agent calls.
pub fn debug_subagent_schema() -> ToolSchema {
    ToolSchema::new(
        DEBUG_SUBAGENT,
        "Ask a debugging assistant a question about runtime behavior. It runs the failing test or script under a \
         debugger, inspects values and returns a <debug_answer> block with Question, Answer, Evidence and Location.",
        json!({
            "type": "object",
            "properties": {
                "question": {"type": "string", "description": "Runtime question to answer"},
                "test": {"type": "string", "description": "Failing test node id (path::[Class::]name) or script path"},
                "path": {"type": "string", "description": "Code the subagent should exercise"},
                "lines": {"type": "array", "items": {"type": "integer", "minimum": 1}, "description": "Lines of interest"},
                "variable": {"type": "string", "description": "Variable of interest"}
            },
            "required": ["question", "test"],
            "additionalProperties": false
        }),
    )
}

#[derive(Debug, Clone)]
pub struct SubagentConfig {
    pub workdir: PathBuf,
    pub episode_id: String,
    pub max_steps: u32,
    pub interpreter_cmd: String,
    pub session_timeout: Duration,
}

impl SubagentConfig {
    pub fn new(workdir: impl Into<PathBuf>, episode_id: impl Into<String>) -> Self {
        SubagentConfig {
            workdir: workdir.into(),
            episode_id: episode_id.into(),
            max_steps: MAX_STEPS,
            interpreter_cmd: crate::driver::DEFAULT_INTERPRETER.to_string(),
            session_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubTrajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Regular steps, not counting a forced finalization.
    pub step_count: u32,
    pub forced_finalization: bool,
    pub token_usage: TokenUsage,
    pub transcript: Vec<TranscriptEntry>,
    pub tool_calls: u32,
}

impl SubTrajectory {
    pub fn completions(&self) -> u32 {
        self.step_count + u32::from(self.forced_finalization)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubagentFailure {
    /// The LLM backend failed; no answer.
    ApiError(String),
    /// No debugger session could be started.
    SessionStartFailed(Vec<String>),
    /// A running session's process died or stopped responding.
    SessionDied(String),
    InvalidTask(String),
}

#[derive(Debug, Clone)]
pub struct SubagentRun {
    pub answer: DebugAnswer,
    pub trajectory: SubTrajectory,
    pub failure: Option<SubagentFailure>,
}

impl SubagentRun {
    pub fn is_session_failure(&self) -> bool {
        matches!(
            self.failure,
            Some(SubagentFailure::SessionStartFailed(_) | SubagentFailure::SessionDied(_))
        )
    }

    /// What the main agent receives: the block and a one-line cost summary.
    pub fn caller_text(&self) -> String {
        let t = &self.trajectory;
        let mut out = self.answer.render();
        if let Some(SubagentFailure::ApiError(e)) = &self.failure {
            let _ = write!(out, "\n[subagent failed: {e}]");
        }
        let _ = write!(
            out,
            "\n[subagent: {} steps{}, {} tool calls, {} tokens]",
            t.step_count,
            if t.forced_finalization { " + finalization" } else { "" },
            t.tool_calls,
            t.token_usage.total()
        );
        out
    }
}

struct Recorder<'a> {
    config: &'a SubagentConfig,
    traj: SubTrajectory,
}

impl Recorder<'_> {
    fn record(&mut self, completion: &Completion, results: Vec<String>) {
        let msg = &completion.message;
        let index = self.traj.steps.len() as u32 + 1;
        let names: Vec<&str> = msg.tool_calls.iter().map(|c| c.name.as_str()).collect();
        let args: Vec<&str> = msg.tool_calls.iter().map(|c| c.arguments.as_str()).collect();
        self.traj.token_usage += completion.usage;
        self.traj.tool_calls += names.len() as u32;
        self.traj.steps.push(TrajectoryStep {
            episode_id: self.config.episode_id.clone(),
            agent: Agent::Sub,
            step_index: index,
            role: Role::Assistant,
            content_digest: digest(&msg.content),
            tool_name: (!names.is_empty()).then(|| names.join(",")),
            tool_args_digest: (!args.is_empty()).then(|| digest(&args.join("\n"))),
            tokens: completion.usage,
            timestamp: now_timestamp(),
            question_category: None,
        });
        self.traj.transcript.push(TranscriptEntry {
            episode_id: self.config.episode_id.clone(),
            agent: Agent::Sub,
            step_index: index,
            content: msg.content.clone(),
            tool_calls: msg.tool_calls.iter().map(|c| (c.name.clone(), c.arguments.clone())).collect(),
            tool_results: results,
        });
    }
}

/// Runs one subagent conversation to an answer. Never panics on tool or
/// backend failure; the outcome is in `failure`. Sessions are closed on return.
pub fn run_subagent(task: &DebugTask, config: &SubagentConfig, backend: &dyn ChatBackend) -> SubagentRun {
    let mut rec = Recorder {
        config,
        traj: SubTrajectory::default(),
    };
    if let Err(e) = task.validate() {
        return SubagentRun {
            answer: failure_answer(task, format!("invalid task: {e}")),
            trajectory: rec.traj,
            failure: Some(SubagentFailure::InvalidTask(e.to_string())),
        };
    }
    let workspace = match Workspace::new(&config.workdir) {
        Ok(ws) => ws,
        Err(e) => {
            let reason = format!("TargetNotFound: {e}");
            return SubagentRun {
                answer: failure_answer(task, format!("Debugger session failed: {reason}")),
                trajectory: rec.traj,
                failure: Some(SubagentFailure::SessionStartFailed(vec![reason])),
            };
        }
    };
    let mut toolbox = DebugToolbox::new(workspace);
    toolbox.interpreter_cmd = config.interpreter_cmd.clone();
    toolbox.default_timeout = config.session_timeout;

    let schemas = subagent_tool_schemas();
    let valid = subagent_tool_names();
    let mut messages = vec![ChatMessage::system(render_subagent_prompt()), ChatMessage::user(task.render())];
    let mut answer: Option<DebugAnswer> = None;
    let mut failure = None;
    info!(episode = %config.episode_id, test = %task.test, "subagent started");

    loop {
        if rec.traj.step_count >= config.max_steps {
            rec.traj.forced_finalization = true;
            messages.push(ChatMessage::user(FINALIZATION_PROMPT));
            match backend.complete(&messages, &schemas) {
                Ok(c) => {
                    rec.record(&c, Vec::new());
                    answer = Some(extract_debug_answer(&c.message.content));
                }
                Err(e) => failure = Some(api_failure(e)),
            }
            break;
        }
        let completion = match backend.complete(&messages, &schemas) {
            Ok(c) => c,
            Err(e) => {
                failure = Some(api_failure(e));
                break;
            }
        };
        rec.traj.step_count += 1;
        let msg = completion.message.clone();
        messages.push(msg.clone());
        let found = extract_debug_answer(&msg.content);
        if !found.raw_block.is_empty() {
            rec.record(&completion, Vec::new());
            answer = Some(found);
            break;
        }
        let mut results = Vec::new();
        for call in &msg.tool_calls {
            let out: ToolOutput = toolbox
                .dispatch(&call.name, &call.arguments)
                .unwrap_or_else(|| unknown_tool(&call.name, &valid));
            debug!(tool = %call.name, error = out.is_error, "subagent tool call");
            messages.push(ChatMessage::tool(call.id.clone(), out.text.clone()));
            results.push(out.text);
        }
        if msg.tool_calls.is_empty() {
            messages.push(ChatMessage::user(CONTINUE_PROMPT));
        }
        rec.record(&completion, results);
        if let Some(reason) = toolbox.ledger().died.clone() {
            warn!(%reason, "debug session died");
            failure = Some(SubagentFailure::SessionDied(reason));
            break;
        }
    }

    let ledger = toolbox.ledger().clone();
    toolbox.close();
    if failure.is_none() && ledger.started == 0 && !ledger.start_failures.is_empty() {
        failure = Some(SubagentFailure::SessionStartFailed(ledger.start_failures.clone()));
    }

    let mut answer = answer.unwrap_or_default();
    if !answer.well_formed {
        let report = match &failure {
            Some(SubagentFailure::SessionStartFailed(reasons)) => Some(format!("Debugger session failed: {}", reasons.join("; "))),
            Some(SubagentFailure::SessionDied(reason)) => Some(format!("Debugger session failed: {reason}")),
            Some(SubagentFailure::ApiError(_)) | Some(SubagentFailure::InvalidTask(_)) => None,
            None => Some("No well-formed <debug_answer> block was produced.".to_string()),
        };
        if let Some(report) = report {
            if answer.question.is_empty() {
                answer.question = task.question.clone();
            }
            answer.evidence = if answer.evidence.is_empty() {
                report
            } else {
                format!("{}\n{report}", answer.evidence)
            };
        }
    }
    info!(
        steps = rec.traj.step_count,
        forced = rec.traj.forced_finalization,
        well_formed = answer.well_formed,
        "subagent finished"
    );
    SubagentRun {
        answer,
        trajectory: rec.traj,
        failure,
    }
}

fn api_failure(e: LlmError) -> SubagentFailure {
    warn!(error = %e, "subagent LLM call failed");
    SubagentFailure::ApiError(e.to_string())
}

fn failure_answer(task: &DebugTask, evidence: String) -> DebugAnswer {
    DebugAnswer {
        question: task.question.clone(),
        evidence,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptToolCall, ScriptTurn, ScriptedBackend};

    const BLOCK: &str = "<debug_answer>\n**Question**: q?\n**Answer**: it is 2\n**Evidence**: i = 2\nat the third hit\n**Location**: counter.py:7\n</debug_answer>";

    fn turn(content: &str, tools: &[(&str, serde_json::Value)]) -> ScriptTurn {
        ScriptTurn {
            content: content.into(),
            tool_calls: tools
                .iter()
                .map(|(n, a)| ScriptToolCall {
                    name: n.to_string(),
                    arguments: a.clone(),
                })
                .collect(),
        }
    }

    fn workdir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.py"), "x = 1\n").unwrap();
        dir
    }

    #[test]
    fn prompt_is_stable_and_lists_registered_tools() {
        let p = render_subagent_prompt();
        assert_eq!(p, render_subagent_prompt());
        assert!(p.starts_with("You are a Runtime Oracle"));
        assert!(p.contains("<debug_answer>"));
        for name in subagent_tool_names() {
            assert!(p.contains(&format!("- {name}: ")), "{name}");
        }
        assert!(p.contains("- debug_control: Step through code, continue, terminate"));
        assert!(!p.contains("{tools}"));
    }

    #[test]
    fn registry_has_no_write_tools() {
        let names = subagent_tool_names();
        assert_eq!(names.len(), 7);
        for bad in ["edit_file", "bash", DEBUG_SUBAGENT] {
            assert!(!names.iter().any(|n| n == bad));
        }
    }

    #[test]
    fn extract_complete_block() {
        let a = extract_debug_answer(&format!("thinking...\n{BLOCK}\n"));
        assert!(a.well_formed);
        assert_eq!(a.answer, "it is 2");
        assert_eq!(a.evidence, "i = 2\nat the third hit");
        assert_eq!(a.location, "counter.py:7");
        assert_eq!(a.raw_block, BLOCK);
    }

    #[test]
    fn extract_missing_and_partial() {
        let none = extract_debug_answer("no block here");
        assert!(!none.well_formed && none.raw_block.is_empty());
        let partial = extract_debug_answer("<debug_answer>\n**Answer**: yes\n</debug_answer>");
        assert!(!partial.well_formed);
        assert_eq!(partial.answer, "yes");
        let empty_field = extract_debug_answer(&BLOCK.replace("counter.py:7", ""));
        assert!(!empty_field.well_formed);
    }

    #[test]
    fn extract_last_block_wins() {
        let text = format!("{}\nmore\n{}", BLOCK.replace("it is 2", "first"), BLOCK);
        assert_eq!(extract_debug_answer(&text).answer, "it is 2");
    }

    #[test]
    fn task_validation() {
        assert!(DebugTask::new("q", "t.py").validate().is_ok());
        assert_eq!(DebugTask::new(" ", "t.py").validate(), Err(TaskError::Empty("question")));
        assert_eq!(DebugTask::new("q", "").validate(), Err(TaskError::Empty("test")));
        let mut t = DebugTask::new("q", "t.py");
        t.lines = vec![3, 0];
        assert_eq!(t.validate(), Err(TaskError::BadLine));
    }

    #[test]
    fn answer_on_third_step() {
        let dir = workdir();
        let backend = ScriptedBackend::new(vec![
            turn("look", &[("list_dir", json!({}))]),
            turn("read", &[("read_file", json!({"path": "a.py"})), ("nope", json!({}))]),
            turn(BLOCK, &[]),
        ]);
        let run = run_subagent(&DebugTask::new("q?", "a.py"), &SubagentConfig::new(dir.path(), "e#sub1"), &backend);
        assert!(run.answer.well_formed);
        assert_eq!(run.trajectory.step_count, 3);
        assert!(!run.trajectory.forced_finalization);
        assert_eq!(backend.consumed(), 3);
        assert_eq!(run.failure, None);
        assert_eq!(run.trajectory.steps[1].tool_name.as_deref(), Some("read_file,nope"));
        assert!(run.trajectory.transcript[1].tool_results[1].contains("valid tools are"));
        assert!(run.caller_text().contains("[subagent: 3 steps, 3 tool calls, "));
    }

    #[test]
    fn never_answering_hits_cap_then_finalizes() {
        let dir = workdir();
        let mut turns: Vec<ScriptTurn> = (0..MAX_STEPS).map(|_| turn("hmm", &[("list_dir", json!({}))])).collect();
        turns.push(turn(BLOCK, &[]));
        turns.push(turn("never used", &[]));
        let backend = ScriptedBackend::new(turns);
        let run = run_subagent(&DebugTask::new("q?", "a.py"), &SubagentConfig::new(dir.path(), "e#sub1"), &backend);
        assert_eq!(run.trajectory.step_count, MAX_STEPS);
        assert!(run.trajectory.forced_finalization);
        assert_eq!(backend.consumed() as u32, MAX_STEPS + 1);
        assert_eq!(run.trajectory.completions(), MAX_STEPS + 1);
        assert_eq!(run.trajectory.steps.len() as u32, MAX_STEPS + 1);
        assert!(run.answer.well_formed);
    }

    #[test]
    fn api_error_yields_empty_answer() {
        let dir = workdir();
        let backend = ScriptedBackend::new(vec![turn("x", &[("list_dir", json!({}))])]);
        let run = run_subagent(&DebugTask::new("q?", "a.py"), &SubagentConfig::new(dir.path(), "e#sub1"), &backend);
        assert!(matches!(run.failure, Some(SubagentFailure::ApiError(_))));
        assert!(!run.answer.well_formed);
        assert!(run.answer.answer.is_empty());
        assert_eq!(run.trajectory.step_count, 1);
    }

    #[test]
    fn start_failure_goes_into_evidence() {
        let dir = workdir();
        let backend = ScriptedBackend::new(vec![
            turn("start", &[("debug_start_session", json!({"test": "missing.py"}))]),
            turn("<debug_answer>\n**Answer**: unknown\n</debug_answer>", &[]),
        ]);
        let run = run_subagent(&DebugTask::new("q?", "missing.py"), &SubagentConfig::new(dir.path(), "e#sub1"), &backend);
        assert!(run.is_session_failure());
        assert!(run.answer.evidence.contains("Debugger session failed"), "{}", run.answer.evidence);
        assert!(run.answer.evidence.contains("TargetNotFound"));
    }
}

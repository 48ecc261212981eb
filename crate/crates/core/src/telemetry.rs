//! Trajectory logging, run metrics and per-step tool distributions.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{Role, TokenUsage};

const DIGEST_CHARS: usize = 200;
/// Label for a step that called no tool.
pub const FINISH: &str = "finish";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("trajectory i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid step: {0}")]
    Validation(String),
    #[error("malformed trajectory line {line} in {path}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("no pass label for episode {0}")]
    MissingLabel(String),
    #[error("no episodes to report on")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Main,
    Sub,
}

/// Kinds of runtime questions a main agent asks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionCategory {
    #[serde(rename = "Exception Diagnosis")]
    ExceptionDiagnosis,
    #[serde(rename = "Root Cause Analysis")]
    RootCauseAnalysis,
    #[serde(rename = "Local Variable Inspection")]
    LocalVariableInspection,
    #[serde(rename = "Attribute Value Inspection")]
    AttributeValueInspection,
    #[serde(rename = "Assertion Failure")]
    AssertionFailure,
    #[serde(rename = "Code Reachability")]
    CodeReachability,
    #[serde(rename = "Post-Fix Verification")]
    PostFixVerification,
}

impl QuestionCategory {
    /// Keyword guess; first matching rule wins.
    pub fn classify(question: &str) -> Option<Self> {
        let q = question.to_lowercase();
        let any = |words: &[&str]| words.iter().any(|w| q.contains(w));
        if any(&["after my fix", "after the fix", "pass now", "passes now", "verify", "fixed"]) {
            Some(Self::PostFixVerification)
        } else if any(&["assert"]) {
            Some(Self::AssertionFailure)
        } else if any(&["exception", "raise", "error", "traceback", "crash"]) {
            Some(Self::ExceptionDiagnosis)
        } else if any(&["reach", "executed", "get called", "is called", "branch", "taken"]) {
            Some(Self::CodeReachability)
        } else if any(&["attribute", "field", "property", "member", "entry", "entries"]) {
            Some(Self::AttributeValueInspection)
        } else if any(&["value of", "variable", "what is", "what are", "contain"]) {
            Some(Self::LocalVariableInspection)
        } else if any(&["why", "cause", "root", "how does", "how come"]) {
            Some(Self::RootCauseAnalysis)
        } else {
            None
        }
    }
}

/// First 200 characters plus total length.
pub fn digest(text: &str) -> String {
    let len = text.chars().count();
    let head: String = text.chars().take(DIGEST_CHARS).collect();
    if len > DIGEST_CHARS {
        format!("{head}... [{len} chars]")
    } else {
        format!("{head} [{len} chars]")
    }
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub episode_id: String,
    pub agent: Agent,
    pub step_index: u32,
    pub role: Role,
    pub content_digest: String,
    /// Comma-separated names when one turn calls several tools.
    pub tool_name: Option<String>,
    pub tool_args_digest: Option<String>,
    pub tokens: TokenUsage,
    pub timestamp: String,
    pub question_category: Option<QuestionCategory>,
}

impl TrajectoryStep {
    /// Episode the step belongs to, with any `#subN` suffix removed.
    pub fn base_episode(&self) -> &str {
        base_episode(&self.episode_id)
    }

    pub fn first_tool(&self) -> Option<&str> {
        self.tool_name.as_deref().and_then(|t| t.split(',').next()).filter(|t| !t.is_empty())
    }
}

pub fn base_episode(id: &str) -> &str {
    id.split('#').next().unwrap_or(id)
}

/// Full text of one turn, kept beside the digest log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub episode_id: String,
    pub agent: Agent,
    pub step_index: u32,
    pub content: String,
    pub tool_calls: Vec<(String, String)>,
    pub tool_results: Vec<String>,
}

struct SinkState {
    log: File,
    transcript: File,
    last_index: HashMap<(String, Agent), u32>,
}

/// Append-only JSON Lines trajectory log plus a `.transcript` sidecar.
pub struct TrajectorySink {
    path: PathBuf,
    state: Mutex<SinkState>,
}

impl TrajectorySink {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, TelemetryError> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
        let log = open(&path)?;
        let transcript = open(&transcript_path(&path))?;
        Ok(TrajectorySink {
            path,
            state: Mutex::new(SinkState {
                log,
                transcript,
                last_index: HashMap::new(),
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line and syncs it. Step indices must strictly increase
    /// per (episode, agent).
    pub fn append_step(&self, step: &TrajectoryStep) -> Result<(), TelemetryError> {
        let mut line = serde_json::to_string(step).map_err(|e| TelemetryError::Validation(e.to_string()))?;
        line.push('\n');
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let key = (step.episode_id.clone(), step.agent);
        if let Some(&last) = state.last_index.get(&key) {
            if step.step_index <= last {
                return Err(TelemetryError::Validation(format!(
                    "step_index {} after {} for {} ({:?})",
                    step.step_index, last, step.episode_id, step.agent
                )));
            }
        }
        state.log.write_all(line.as_bytes())?;
        state.log.sync_data()?;
        state.last_index.insert(key, step.step_index);
        Ok(())
    }

    pub fn append_transcript(&self, entry: &TranscriptEntry) -> Result<(), TelemetryError> {
        let mut line = serde_json::to_string(entry).map_err(|e| TelemetryError::Validation(e.to_string()))?;
        line.push('\n');
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        state.transcript.write_all(line.as_bytes())?;
        Ok(())
    }
}

pub fn transcript_path(log: &Path) -> PathBuf {
    let mut name = log.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".transcript");
    log.with_file_name(name)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryStep>, TelemetryError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TelemetryError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Replaces every `"timestamp":"..."` value so logs from different runs compare equal.
pub fn normalize_timestamps(jsonl: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""timestamp":"[^"]*""#).unwrap())
        .replace_all(jsonl, r#""timestamp":"<normalized>""#)
        .into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub pass_rate: f64,
    pub call_rate: f64,
    pub avg_steps_main: f64,
    pub avg_steps_sub: f64,
    pub avg_tokens_main: u64,
    pub avg_tokens_sub: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas_vs_baseline: Option<BTreeMap<String, f64>>,
}

pub const METRIC_NAMES: [&str; 6] = [
    "pass_rate",
    "call_rate",
    "avg_steps_main",
    "avg_steps_sub",
    "avg_tokens_main",
    "avg_tokens_sub",
];

impl MetricsReport {
    pub fn value(&self, metric: &str) -> Option<f64> {
        Some(match metric {
            "pass_rate" => self.pass_rate,
            "call_rate" => self.call_rate,
            "avg_steps_main" => self.avg_steps_main,
            "avg_steps_sub" => self.avg_steps_sub,
            "avg_tokens_main" => self.avg_tokens_main as f64,
            "avg_tokens_sub" => self.avg_tokens_sub as f64,
            _ => return None,
        })
    }

    pub fn delta(&self, metric: &str) -> Option<f64> {
        self.deltas_vs_baseline.as_ref()?.get(metric).copied()
    }

    /// Aligned one-row table; deltas in parentheses when a baseline was given.
    pub fn render_table(&self, label: &str) -> String {
        let cell = |metric: &str, text: String| match self.delta(metric) {
            Some(d) => format!("{text} {}", format_delta(d)),
            None => text,
        };
        let cells = [
            cell("pass_rate", format!("{:.1}", self.pass_rate)),
            cell("call_rate", format!("{:.1}", self.call_rate)),
            cell("avg_steps_main", format!("{:.2}", self.avg_steps_main)),
            cell("avg_steps_sub", format!("{:.2}", self.avg_steps_sub)),
            cell("avg_tokens_main", self.avg_tokens_main.to_string()),
            cell("avg_tokens_sub", self.avg_tokens_sub.to_string()),
        ];
        let headers = ["Config", "Pass %", "Call %", "Steps Main", "Steps Sub", "Tokens Main", "Tokens Sub"];
        let mut row = vec![label.to_string()];
        row.extend(cells);
        let widths: Vec<usize> = headers.iter().zip(&row).map(|(h, c)| h.len().max(c.len())).collect();
        let line = |cols: &[String]| {
            cols.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let head: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        format!("{}\n{}\n{}\n", line(&head), line(&rule), line(&row))
    }
}

/// `(+x.y%)`
pub fn format_delta(delta: f64) -> String {
    let rounded = (delta * 10.0).round() / 10.0;
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("({rounded:+.1}%)")
}

pub fn compute_metrics(
    steps: &[TrajectoryStep],
    pass_labels: &HashMap<String, bool>,
    baseline: Option<&MetricsReport>,
) -> Result<MetricsReport, TelemetryError> {
    #[derive(Default)]
    struct Acc {
        main_steps: u64,
        sub_steps: u64,
        main_tokens: TokenUsage,
        sub_tokens: TokenUsage,
    }
    let mut episodes: BTreeMap<&str, Acc> = BTreeMap::new();
    for s in steps {
        let acc = episodes.entry(s.base_episode()).or_default();
        match s.agent {
            Agent::Main => {
                acc.main_steps += 1;
                acc.main_tokens += s.tokens;
            }
            Agent::Sub => {
                acc.sub_steps += 1;
                acc.sub_tokens += s.tokens;
            }
        }
    }
    if episodes.is_empty() {
        return Err(TelemetryError::EmptyInput);
    }
    let n = episodes.len() as f64;
    let mut passes = 0usize;
    for id in episodes.keys() {
        match pass_labels.get(*id) {
            Some(true) => passes += 1,
            Some(false) => {}
            None => return Err(TelemetryError::MissingLabel(id.to_string())),
        }
    }
    let called = episodes.values().filter(|a| a.sub_steps > 0).count();
    let sum = |f: &dyn Fn(&Acc) -> u64| episodes.values().map(f).sum::<u64>() as f64;
    // average input + average output, over every episode
    let avg_tokens = |f: &dyn Fn(&Acc) -> TokenUsage| {
        let input = sum(&|a| f(a).input_tokens) / n;
        let output = sum(&|a| f(a).output_tokens) / n;
        (input + output).round() as u64
    };
    let mut report = MetricsReport {
        episodes: episodes.len(),
        pass_rate: 100.0 * passes as f64 / n,
        call_rate: 100.0 * called as f64 / n,
        avg_steps_main: sum(&|a| a.main_steps) / n,
        avg_steps_sub: sum(&|a| a.sub_steps) / n,
        avg_tokens_main: avg_tokens(&|a| a.main_tokens),
        avg_tokens_sub: avg_tokens(&|a| a.sub_tokens),
        deltas_vs_baseline: None,
    };
    if let Some(base) = baseline {
        report.deltas_vs_baseline = Some(deltas(&report, base));
    }
    Ok(report)
}

/// Signed percent change per metric; metrics with a zero baseline are skipped.
pub fn deltas(report: &MetricsReport, baseline: &MetricsReport) -> BTreeMap<String, f64> {
    METRIC_NAMES
        .iter()
        .filter_map(|m| {
            let b = baseline.value(m)?;
            let v = report.value(m)?;
            (b > 0.0).then(|| (m.to_string(), 100.0 * (v - b) / b))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PositionCounts {
    /// 1-based step position within a trajectory.
    pub position: usize,
    /// Trajectories with a step at this position.
    pub alive: usize,
    /// Trajectories whose last step is at this position.
    pub ended: usize,
    /// First tool called at this step, or [`FINISH`] when none.
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StepDistribution {
    pub positions: Vec<PositionCounts>,
}

impl StepDistribution {
    pub fn share(&self, position: usize, tool: &str) -> Option<f64> {
        let p = self.positions.get(position.checked_sub(1)?)?;
        Some(100.0 * *p.counts.get(tool).unwrap_or(&0) as f64 / p.alive as f64)
    }

    /// True when every position's counts sum to its alive count and alive
    /// shrinks exactly by the number that ended.
    pub fn is_conserved(&self) -> bool {
        self.positions.iter().all(|p| p.counts.values().sum::<usize>() == p.alive)
            && self.positions.windows(2).all(|w| w[1].alive == w[0].alive - w[0].ended)
            && self.positions.last().is_none_or(|p| p.alive == p.ended)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("step  alive  ended  tools\n");
        for p in &self.positions {
            let tools: Vec<String> = p
                .counts
                .iter()
                .map(|(t, c)| format!("{t} {:.0}%", 100.0 * *c as f64 / p.alive as f64))
                .collect();
            let _ = writeln!(out, "{:>4}  {:>5}  {:>5}  {}", p.position, p.alive, p.ended, tools.join(", "));
        }
        out
    }
}

impl fmt::Display for StepDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Per-position tool counts over every trajectory of `agent`. Each distinct
/// `episode_id` (sub-runs carry a `#subN` suffix) is one trajectory.
pub fn step_distribution(steps: &[TrajectoryStep], agent: Agent) -> StepDistribution {
    let mut runs: BTreeMap<&str, Vec<&TrajectoryStep>> = BTreeMap::new();
    for s in steps.iter().filter(|s| s.agent == agent) {
        runs.entry(&s.episode_id).or_default().push(s);
    }
    let longest = runs.values().map(Vec::len).max().unwrap_or(0);
    let mut positions: Vec<PositionCounts> = (1..=longest)
        .map(|position| PositionCounts {
            position,
            alive: 0,
            ended: 0,
            counts: BTreeMap::new(),
        })
        .collect();
    for run in runs.values_mut() {
        run.sort_by_key(|s| s.step_index);
        for (i, s) in run.iter().enumerate() {
            let p = &mut positions[i];
            p.alive += 1;
            let label = s.first_tool().unwrap_or(FINISH).to_string();
            *p.counts.entry(label).or_default() += 1;
        }
        positions[run.len() - 1].ended += 1;
    }
    StepDistribution { positions }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn step(episode: &str, agent: Agent, index: u32, tool: Option<&str>, tokens: (u64, u64)) -> TrajectoryStep {
        TrajectoryStep {
            episode_id: episode.into(),
            agent,
            step_index: index,
            role: Role::Assistant,
            content_digest: digest(""),
            tool_name: tool.map(str::to_string),
            tool_args_digest: None,
            tokens: TokenUsage {
                input_tokens: tokens.0,
                output_tokens: tokens.1,
            },
            timestamp: "t".into(),
            question_category: None,
        }
    }

    #[test]
    fn sink_appends_and_rejects_out_of_order() {
        let dir = tempfile::tempdir().unwrap();
        let sink = TrajectorySink::create(dir.path().join("t.jsonl")).unwrap();
        sink.append_step(&step("e1", Agent::Main, 1, None, (1, 1))).unwrap();
        sink.append_step(&step("e1", Agent::Main, 2, None, (1, 1))).unwrap();
        assert!(matches!(
            sink.append_step(&step("e1", Agent::Main, 2, None, (1, 1))),
            Err(TelemetryError::Validation(_))
        ));
        sink.append_step(&step("e1", Agent::Sub, 1, None, (1, 1))).unwrap();
        assert_eq!(read_trajectory(sink.path()).unwrap().len(), 3);
        assert!(transcript_path(sink.path()).exists());
    }

    #[test]
    fn concurrent_appends_keep_lines_whole() {
        let dir = tempfile::tempdir().unwrap();
        let sink = std::sync::Arc::new(TrajectorySink::create(dir.path().join("t.jsonl")).unwrap());
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let sink = sink.clone();
                std::thread::spawn(move || {
                    for i in 1..=50 {
                        let mut s = step(&format!("ep{t}"), Agent::Main, i, Some("grep"), (i as u64, 1));
                        s.content_digest = digest(&"x".repeat(3000));
                        sink.append_step(&s).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let steps = read_trajectory(sink.path()).unwrap();
        assert_eq!(steps.len(), 200);
        for t in 0..4 {
            let idx: Vec<u32> = steps.iter().filter(|s| s.episode_id == format!("ep{t}")).map(|s| s.step_index).collect();
            assert_eq!(idx, (1..=50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn digest_shape() {
        assert_eq!(digest("abc"), "abc [3 chars]");
        let long = "y".repeat(250);
        assert!(digest(&long).ends_with("... [250 chars]"));
        assert_eq!(digest(&long).chars().filter(|c| *c == 'y').count(), 200);
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(100.0 * (73.1 - 60.2) / 60.2), "(+21.4%)");
        assert_eq!(format_delta(100.0 * (70.4 - 71.0) / 71.0), "(-0.8%)");
        assert_eq!(format_delta(-0.01), "(+0.0%)");
    }

    #[test]
    fn metrics_require_labels_and_input() {
        let labels = HashMap::new();
        assert!(matches!(compute_metrics(&[], &labels, None), Err(TelemetryError::EmptyInput)));
        let steps = [step("e1", Agent::Main, 1, None, (1, 1))];
        assert!(matches!(compute_metrics(&steps, &labels, None), Err(TelemetryError::MissingLabel(_))));
    }

    #[test]
    fn zero_baseline_metrics_have_no_delta() {
        let steps = [step("e1", Agent::Main, 1, None, (4, 2))];
        let labels = HashMap::from([("e1".to_string(), true)]);
        let base = compute_metrics(&steps, &labels, None).unwrap();
        assert_eq!(base.call_rate, 0.0);
        let r = compute_metrics(&steps, &labels, Some(&base)).unwrap();
        let d = r.deltas_vs_baseline.unwrap();
        assert!(!d.contains_key("call_rate"));
        assert_eq!(d["pass_rate"], 0.0);
    }

    #[test]
    fn categories() {
        use QuestionCategory::*;
        assert_eq!(QuestionCategory::classify("What exception occurs when running test_x?"), Some(ExceptionDiagnosis));
        assert_eq!(QuestionCategory::classify("What is the value of now at line 22?"), Some(LocalVariableInspection));
        assert_eq!(QuestionCategory::classify("Does the test pass now after my fix?"), Some(PostFixVerification));
        assert_eq!(QuestionCategory::classify("Does execution reach line 40?"), Some(CodeReachability));
        assert_eq!(QuestionCategory::classify("Why is the total wrong?"), Some(RootCauseAnalysis));
        assert_eq!(serde_json::to_string(&ExceptionDiagnosis).unwrap(), "\"Exception Diagnosis\"");
    }

    #[test]
    fn distribution_counts() {
        let steps = vec![
            step("a#sub1", Agent::Sub, 1, Some("debug_start_session"), (0, 0)),
            step("a#sub1", Agent::Sub, 2, Some("debug_inspect,debug_control"), (0, 0)),
            step("a#sub1", Agent::Sub, 3, None, (0, 0)),
            step("b#sub1", Agent::Sub, 1, Some("debug_start_session"), (0, 0)),
            step("b#sub1", Agent::Sub, 2, None, (0, 0)),
            step("b", Agent::Main, 1, Some("bash"), (0, 0)),
        ];
        let d = step_distribution(&steps, Agent::Sub);
        assert_eq!(d.positions.len(), 3);
        assert_eq!(d.share(1, "debug_start_session"), Some(100.0));
        assert_eq!(d.positions[1].counts["debug_inspect"], 1);
        assert_eq!(d.positions[1].ended, 1);
        assert!(d.is_conserved());
        assert!(step_distribution(&[], Agent::Sub).positions.is_empty());
    }

    #[test]
    fn timestamps_normalize() {
        let a = r#"{"x":1,"timestamp":"2026-01-01T00:00:00.000Z"}"#;
        let b = r#"{"x":1,"timestamp":"2027-05-05T01:02:03.456Z"}"#;
        assert_eq!(normalize_timestamps(a), normalize_timestamps(b));
    }
}

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dbgagent::driver::pdb::PdbBackend;
use dbgagent::driver::{DebuggerBackend, LaunchSpec, DEFAULT_INTERPRETER};
use dbgagent::fixtures::{self, FixtureError};
use dbgagent::llm::{ChatBackend, HttpBackend, HttpConfig, ScriptedBackend};
use dbgagent::orchestrator::{run_episode, Configuration, EpisodeConfig, EpisodeStatus, TaskFile};
use dbgagent::session::check_target;
use dbgagent::subagent::{run_subagent, DebugAnswer, DebugTask, SubagentConfig, SubagentFailure};
use dbgagent::telemetry::{compute_metrics, read_trajectory, step_distribution, Agent, MetricsReport, TelemetryError, TrajectorySink};

const EXIT_OK: u8 = 0;
const EXIT_FAIL: u8 = 1;
const EXIT_SESSION: u8 = 2;
const EXIT_API: u8 = 3;
const EXIT_EPISODE: u8 = 4;
const EXIT_USAGE: u8 = 64;

/// Debugger subagent for coding agents.
#[derive(Parser)]
#[command(name = "d2f", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ask the debugging subagent one runtime question.
    Ask(AskArgs),
    /// Run one bug-fixing episode under a configuration.
    Episode(EpisodeArgs),
    /// Compute pass/call rates, step and token averages from trajectories.
    Metrics(MetricsArgs),
    /// Check every fixture against its oracle and a debugger session.
    FixturesVerify(FixturesArgs),
    /// Send raw debugger commands to a target (maintenance).
    Probe(ProbeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LlmKind {
    Http,
    Scripted,
}

#[derive(Args)]
struct LlmArgs {
    #[arg(long, value_enum, default_value = "http")]
    llm: LlmKind,
    /// Script for --llm scripted.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Args)]
struct AskArgs {
    #[arg(long)]
    repo: PathBuf,
    /// Test node id (path::[Class::]name) or script path.
    #[arg(long)]
    test: String,
    #[arg(long)]
    question: String,
    #[arg(long)]
    path: Option<String>,
    #[arg(long = "line")]
    lines: Vec<u32>,
    #[arg(long)]
    variable: Option<String>,
    #[command(flatten)]
    llm: LlmArgs,
    /// Append the subagent trajectory to this JSONL file.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_INTERPRETER)]
    interpreter: String,
    #[arg(long, default_value_t = 30)]
    timeout_s: u64,
    #[arg(long, default_value_t = dbgagent::subagent::MAX_STEPS)]
    max_steps: u32,
}

#[derive(Args)]
struct EpisodeArgs {
    /// Repository to work in; overrides the task file's repo.
    #[arg(long)]
    repo: Option<PathBuf>,
    #[arg(long)]
    task: PathBuf,
    #[arg(long, value_parser = parse_configuration)]
    config: Configuration,
    #[command(flatten)]
    llm: LlmArgs,
    /// Subagent script for --llm scripted.
    #[arg(long)]
    sub_script: Option<PathBuf>,
    #[arg(long, default_value = "d2f-out")]
    out: PathBuf,
    #[arg(long)]
    episode_id: Option<String>,
    #[arg(long, default_value_t = dbgagent::orchestrator::DEFAULT_MAX_MAIN_STEPS)]
    max_steps: u32,
    #[arg(long, default_value = DEFAULT_INTERPRETER)]
    interpreter: String,
}

#[derive(Args)]
struct MetricsArgs {
    /// Glob of trajectory JSONL files.
    #[arg(long, required = true)]
    trajectories: Vec<String>,
    /// JSON object mapping episode id to pass (true/false).
    #[arg(long)]
    labels: PathBuf,
    /// Earlier metrics JSON to compute deltas against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label in the table.
    #[arg(long, default_value = "run")]
    name: String,
    /// Also print the per-step tool distribution of the subagent.
    #[arg(long)]
    distribution: bool,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long, default_value = fixtures::DEFAULT_CORPUS)]
    corpus: PathBuf,
    #[arg(long, default_value = DEFAULT_INTERPRETER)]
    interpreter: String,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    repo: PathBuf,
    #[arg(long)]
    target: String,
    /// Raw debugger command; repeatable.
    #[arg(long = "cmd")]
    commands: Vec<String>,
    #[arg(long, default_value = DEFAULT_INTERPRETER)]
    interpreter: String,
    #[arg(long, default_value_t = 30)]
    timeout_s: u64,
}

fn parse_configuration(s: &str) -> Result<Configuration, String> {
    s.parse()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("D2F_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let code = match cli.command {
        Cmd::Ask(a) => cmd_ask(a),
        Cmd::Episode(a) => cmd_episode(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::FixturesVerify(a) => cmd_fixtures_verify(a),
        Cmd::Probe(a) => cmd_probe(a),
    };
    ExitCode::from(code.unwrap_or_else(|e| {
        eprintln!("d2f: {e:#}");
        EXIT_FAIL
    }))
}

enum BackendError {
    Usage(String),
    Api(String),
}

fn backend(kind: LlmKind, script: Option<&Path>, flag: &str) -> Result<Box<dyn ChatBackend>, BackendError> {
    match kind {
        LlmKind::Scripted => {
            let path = script.ok_or_else(|| BackendError::Usage(format!("--llm scripted needs {flag}")))?;
            ScriptedBackend::from_file(path)
                .map(|b| Box::new(b) as Box<dyn ChatBackend>)
                .map_err(|e| BackendError::Api(e.to_string()))
        }
        LlmKind::Http => HttpConfig::from_env()
            .map(|c| Box::new(HttpBackend::new(c)) as Box<dyn ChatBackend>)
            .map_err(|e| BackendError::Api(e.to_string())),
    }
}

fn backend_exit(e: BackendError) -> u8 {
    match e {
        BackendError::Usage(m) => {
            eprintln!("d2f: {m}");
            EXIT_USAGE
        }
        BackendError::Api(m) => {
            eprintln!("d2f: {m}");
            EXIT_API
        }
    }
}

fn cmd_ask(a: AskArgs) -> Result<u8> {
    let task = DebugTask {
        question: a.question,
        test: a.test,
        path: a.path,
        lines: a.lines,
        variable: a.variable,
    };
    if let Err(e) = task.validate() {
        eprintln!("d2f: {e}");
        return Ok(EXIT_USAGE);
    }
    let llm = match backend(a.llm.llm, a.llm.script.as_deref(), "--script") {
        Ok(b) => b,
        Err(e) => return Ok(backend_exit(e)),
    };
    if let Err(e) = check_target(&a.repo, &task.test) {
        let answer = DebugAnswer {
            question: task.question.clone(),
            evidence: e.to_string(),
            ..Default::default()
        };
        println!("{}", answer.render());
        eprintln!("d2f: {e}");
        return Ok(EXIT_SESSION);
    }
    let mut config = SubagentConfig::new(&a.repo, "ask#sub1");
    config.interpreter_cmd = a.interpreter;
    config.session_timeout = Duration::from_secs(a.timeout_s);
    config.max_steps = a.max_steps;
    let run = run_subagent(&task, &config, llm.as_ref());
    if let Some(path) = &a.trajectory {
        let sink = TrajectorySink::create(path)?;
        for s in &run.trajectory.steps {
            sink.append_step(s)?;
        }
        for t in &run.trajectory.transcript {
            sink.append_transcript(t)?;
        }
    }
    println!("{}", run.answer.render());
    let t = &run.trajectory;
    eprintln!(
        "d2f: {} steps{}, {} tool calls, {} tokens",
        t.step_count,
        if t.forced_finalization { " + finalization" } else { "" },
        t.tool_calls,
        t.token_usage.total()
    );
    Ok(match &run.failure {
        Some(SubagentFailure::SessionStartFailed(reasons)) => {
            eprintln!("d2f: debugger session failed: {}", reasons.join("; "));
            EXIT_SESSION
        }
        Some(SubagentFailure::SessionDied(reason)) => {
            eprintln!("d2f: debugger session failed: {reason}");
            EXIT_SESSION
        }
        Some(SubagentFailure::ApiError(e)) => {
            eprintln!("d2f: subagent API error: {e}");
            EXIT_API
        }
        Some(SubagentFailure::InvalidTask(e)) => {
            eprintln!("d2f: {e}");
            EXIT_USAGE
        }
        None if run.answer.well_formed => EXIT_OK,
        None => {
            eprintln!("d2f: no well-formed <debug_answer> block");
            EXIT_FAIL
        }
    })
}

fn cmd_episode(a: EpisodeArgs) -> Result<u8> {
    let text = std::fs::read_to_string(&a.task).with_context(|| format!("reading {}", a.task.display()))?;
    let task: TaskFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.task.display()))?;
    let repo = match a.repo {
        Some(r) => r,
        None if task.repo.is_absolute() => task.repo.clone(),
        None => a.task.parent().unwrap_or(Path::new(".")).join(&task.repo),
    };
    let main = match backend(a.llm.llm, a.llm.script.as_deref(), "--script") {
        Ok(b) => b,
        Err(e) => return Ok(backend_exit(e)),
    };
    // over HTTP the subagent shares the main agent's endpoint
    let sub: Box<dyn ChatBackend> = match (a.llm.llm, &a.sub_script) {
        (LlmKind::Scripted, Some(path)) => match ScriptedBackend::from_file(path) {
            Ok(b) => Box::new(b),
            Err(e) => return Ok(backend_exit(BackendError::Api(e.to_string()))),
        },
        (LlmKind::Scripted, None) => Box::new(ScriptedBackend::new(Vec::new())),
        (LlmKind::Http, _) => match backend(LlmKind::Http, None, "") {
            Ok(b) => b,
            Err(e) => return Ok(backend_exit(e)),
        },
    };
    let episode_id = a.episode_id.unwrap_or_else(|| {
        a.task.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "episode".into())
    });
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log = a.out.join(format!("{episode_id}.jsonl"));
    let patch_path = a.out.join(format!("{episode_id}.patch"));
    let sink = TrajectorySink::create(&log)?;
    let mut config = EpisodeConfig::new(a.config, &repo, task.task, task.test);
    config.episode_id = episode_id;
    config.max_main_steps = a.max_steps;
    config.interpreter_cmd = a.interpreter;
    match run_episode(&config, main.as_ref(), sub.as_ref(), Some(&sink)) {
        Ok(result) => {
            std::fs::write(&patch_path, &result.final_patch)?;
            print!("{}", result.final_patch);
            let status = match result.status {
                EpisodeStatus::Completed => "Completed",
                EpisodeStatus::StepLimit => "StepLimit",
                EpisodeStatus::Error => "Error",
            };
            println!("status={status}");
            println!("patch={}", patch_path.display());
            println!("trajectory={}", log.display());
            println!("main_steps={}", result.main_steps);
            println!("sub_invocations={}", result.sub_invocations);
            Ok(if result.status == EpisodeStatus::Error { EXIT_EPISODE } else { EXIT_OK })
        }
        Err(e) => {
            eprintln!("d2f: episode failed: {e}");
            println!("status=Error");
            println!("trajectory={}", log.display());
            Ok(EXIT_EPISODE)
        }
    }
}

fn cmd_metrics(a: MetricsArgs) -> Result<u8> {
    let mut files = Vec::new();
    for pattern in &a.trajectories {
        for entry in glob::glob(pattern).with_context(|| format!("bad glob {pattern}"))? {
            files.push(entry?);
        }
    }
    files.sort();
    files.dedup();
    let mut steps = Vec::new();
    for f in &files {
        steps.extend(read_trajectory(f)?);
    }
    let labels: HashMap<String, bool> = serde_json::from_str(
        &std::fs::read_to_string(&a.labels).with_context(|| format!("reading {}", a.labels.display()))?,
    )
    .with_context(|| format!("parsing {}", a.labels.display()))?;
    let baseline: Option<MetricsReport> = match &a.baseline {
        Some(p) => Some(
            serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };
    let report = match compute_metrics(&steps, &labels, baseline.as_ref()) {
        Ok(r) => r,
        Err(e @ (TelemetryError::MissingLabel(_) | TelemetryError::EmptyInput)) => {
            eprintln!("d2f: {e}");
            return Ok(EXIT_FAIL);
        }
        Err(e) => bail!(e),
    };
    print!("{}", report.render_table(&a.name));
    if a.distribution {
        println!();
        print!("{}", step_distribution(&steps, Agent::Sub).render());
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
        println!("report={}", out.display());
    }
    Ok(EXIT_OK)
}

fn cmd_fixtures_verify(a: FixturesArgs) -> Result<u8> {
    let reports = match fixtures::verify_corpus(&a.corpus, &a.interpreter) {
        Ok(r) => r,
        Err(e @ FixtureError::MissingCorpus(_)) => {
            eprintln!("d2f: {e}");
            return Ok(EXIT_SESSION);
        }
        Err(e) => bail!(e),
    };
    print!("{}", fixtures::render_reports(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.id.as_str()).collect();
    if reports.is_empty() {
        eprintln!("d2f: no fixtures in {}", a.corpus.display());
        return Ok(EXIT_SESSION);
    }
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("d2f: fixtures disagree: {}", failed.join(", "));
        Ok(EXIT_FAIL)
    }
}

fn cmd_probe(a: ProbeArgs) -> Result<u8> {
    let backend = PdbBackend::new();
    let mut launch = LaunchSpec::new(&a.repo, &a.target);
    launch.interpreter_cmd = a.interpreter;
    launch.timeout = Duration::from_secs(a.timeout_s);
    backend.prepare(&launch)?;
    let (mut channel, first) = backend.spawn(&launch)?;
    print!("{}", first.text);
    for cmd in &a.commands {
        println!("(Pdb) {cmd}");
        match channel.send_command(cmd, launch.timeout) {
            Ok(resp) => print!("{}", resp.text),
            Err(e) => {
                eprintln!("d2f: {e}");
                channel.terminate();
                return Ok(EXIT_SESSION);
            }
        }
    }
    channel.terminate();
    Ok(EXIT_OK)
}

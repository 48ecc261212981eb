//! Acceptance gate. Runs without the libtest harness so each criterion prints
//! one PASS/FAIL line; exits non-zero if any fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::{copy_fixture, fixture, no_descendants, script_path, tree_bytes, Tree};
use dbgagent::driver::pdb::PdbBackend;
use dbgagent::driver::{
    BreakEvent, DebugChannel, DebugCommand, DebuggerBackend, DriverError, FrameLocation, LaunchSpec, ListedBreakpoint,
    RawResponse, DEFAULT_INTERPRETER,
};
use dbgagent::fixtures::{verify_corpus, DEFAULT_CORPUS};
use dbgagent::llm::{ChatBackend, ChatMessage, Completion, LlmError, Role, ScriptedBackend, TokenUsage, ToolSchema};
use dbgagent::orchestrator::{build_tool_registry, run_episode, Configuration, EpisodeConfig, EpisodeStatus};
use dbgagent::session::{
    check_target, ControlAction, DebugSession, InspectQuery, SessionError, StartFailure, StartRequest,
};
use dbgagent::subagent::{run_subagent, DebugTask, SubagentConfig, DEBUG_SUBAGENT, MAX_STEPS};
use dbgagent::telemetry::{
    compute_metrics, format_delta, normalize_timestamps, read_trajectory, step_distribution, transcript_path, Agent,
    MetricsReport, TrajectorySink, TrajectoryStep,
};
use dbgagent::tools::DEBUG_TOOLS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    }};
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("fixture-oracle equivalence", fixture_oracle),
        ("step semantics", step_semantics),
        ("atomic start", atomic_start),
        ("subagent protocol", subagent_protocol),
        ("edit gating", gating),
        ("registry exclusivity", registry_exclusivity),
        ("metrics arithmetic", metrics_arithmetic),
        ("epoch fallback end to end", epoch_end_to_end),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(note) => println!("criterion {} PASS {name} ({secs:.1}s): {note}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fixture_oracle() -> Outcome {
    let started = Instant::now();
    let reports = verify_corpus(Path::new(DEFAULT_CORPUS), DEFAULT_INTERPRETER).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let ids: Vec<&str> = reports.iter().map(|r| r.id.as_str()).collect();
    ensure!(reports.len() >= 6, "only {} fixtures", reports.len());
    for id in ["f1", "f2", "f3", "f4"] {
        ensure!(ids.contains(&id), "{id} missing from corpus");
    }
    let bad: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}: {:?} {:?}", r.id, r.error, r.mismatches))
        .collect();
    ensure!(bad.is_empty(), "{}", bad.join("; "));
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    let facts: usize = reports.iter().map(|r| r.facts_checked).sum();
    Ok(format!("{} fixtures, {facts} facts, {:.1}s", reports.len(), elapsed.as_secs_f64()))
}

/// Lines of f5 whose first step-into enters a Python function.
const CALL_LINES: [u32; 4] = [12, 13, 21, 25];

fn step_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let dir = fixture("f5");
    let mut checked = [0usize; 3];
    let mut violations = Vec::new();
    for seq in 0..100 {
        let (mut s, _) = DebugSession::start(&StartRequest::new(&dir, "steps.py")).map_err(|e| e.to_string())?;
        let depth = |s: &mut DebugSession| s.inspect(&InspectQuery::stack()).map(|r| r.frames.len());
        let mut d = depth(&mut s).map_err(|e| e.to_string())?;
        // a call line reached by returning from its callee has already made the call
        let mut fresh = true;
        for _ in 0..rng.gen_range(4..16) {
            let roll = rng.gen_range(0..10);
            let action = match roll {
                0..=4 => ControlAction::StepInto,
                5..=7 => ControlAction::StepOver,
                _ if d > 1 => ControlAction::StepOut,
                _ => ControlAction::StepOver,
            };
            let here = s.paused_at().cloned().ok_or("not paused")?;
            let at_return = s.at_return();
            let expected: i64 = match action {
                _ if at_return => -1,
                ControlAction::StepInto
                    if fresh && here.file.ends_with("steps.py") && CALL_LINES.contains(&here.line) =>
                {
                    1
                }
                ControlAction::StepOut => -1,
                _ => 0,
            };
            let snap = s.control(action).map_err(|e| e.to_string())?;
            if snap.location.is_none() {
                break;
            }
            let nd = depth(&mut s).map_err(|e| e.to_string())?;
            let got = nd as i64 - d as i64;
            checked[(expected + 1) as usize] += 1;
            if got != expected {
                violations.push(format!("seq {seq}: {action:?} at line {} gave {got:+}, want {expected:+}", here.line));
            }
            fresh = got >= 0;
            d = nd;
        }
        s.close();
    }
    ensure!(violations.is_empty(), "{} violations: {}", violations.len(), violations.join("; "));
    ensure!(checked.iter().all(|&c| c > 0), "law branches not all exercised: {checked:?}");
    ensure!(no_descendants(), "debuggees survived");
    Ok(format!("100 sequences, transitions -1/0/+1 = {}/{}/{}", checked[0], checked[1], checked[2]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Stage {
    VerifyTarget,
    Spawn,
    Breakpoints,
    FirstContinue,
}

/// Real pdb with one stage made to fail.
struct Faulty {
    inner: PdbBackend,
    stage: Option<Stage>,
}

impl DebuggerBackend for Faulty {
    fn name(&self) -> &str {
        "faulty-pdb"
    }
    fn prepare(&self, launch: &LaunchSpec) -> Result<(), DriverError> {
        if self.stage == Some(Stage::VerifyTarget) {
            return Err(DriverError::TargetNotLoadable("injected".into()));
        }
        self.inner.prepare(launch)
    }
    fn spawn(&self, launch: &LaunchSpec) -> Result<(Box<dyn DebugChannel>, RawResponse), DriverError> {
        let (channel, first) = self.inner.spawn(launch)?;
        if self.stage == Some(Stage::Spawn) {
            // the child is already up; dropping the channel must reap it
            drop(channel);
            return Err(DriverError::StartupTimeout {
                waited: Duration::ZERO,
                output: "injected".into(),
            });
        }
        Ok((channel, first))
    }
    fn render(&self, command: &DebugCommand) -> String {
        self.inner.render(command)
    }
    fn parse_frame_header(&self, text: &str) -> Option<FrameLocation> {
        self.inner.parse_frame_header(text)
    }
    fn classify_event(&self, response: &RawResponse) -> Result<BreakEvent, DriverError> {
        if self.stage == Some(Stage::FirstContinue) {
            return Err(DriverError::ParseAmbiguous("injected".into()));
        }
        self.inner.classify_event(response)
    }
    fn is_return_stop(&self, text: &str) -> bool {
        self.inner.is_return_stop(text)
    }
    fn is_launcher_stop(&self, text: &str) -> bool {
        self.inner.is_launcher_stop(text)
    }
    fn parse_breakpoint_set(&self, text: &str) -> Result<(u32, PathBuf, u32), String> {
        if self.stage == Some(Stage::Breakpoints) {
            return Err("injected".into());
        }
        self.inner.parse_breakpoint_set(text)
    }
    fn parse_breakpoint_list(&self, text: &str) -> Vec<ListedBreakpoint> {
        self.inner.parse_breakpoint_list(text)
    }
    fn parse_stack(&self, text: &str) -> Vec<FrameLocation> {
        self.inner.parse_stack(text)
    }
    fn parse_bindings(&self, text: &str) -> Result<Vec<(String, String)>, String> {
        self.inner.parse_bindings(text)
    }
    fn evaluation_error(&self, text: &str) -> Option<String> {
        self.inner.evaluation_error(text)
    }
}

fn expect_start_failure(
    label: &str,
    result: Result<(DebugSession, dbgagent::session::SessionSnapshot), SessionError>,
    want: StartFailure,
) -> Result<(), String> {
    match result {
        Err(SessionError::StartFailed { reason, .. }) if reason == want => {}
        Err(e) => return Err(format!("{label}: wrong error {e}")),
        Ok(_) => return Err(format!("{label}: started despite the fault")),
    }
    ensure!(no_descendants(), "{label}: child survived");
    Ok(())
}

fn atomic_start() -> Outcome {
    let req = StartRequest::new(fixture("f1"), "counter.py").breakpoint("counter.py", 7);
    let stages = [
        (Stage::VerifyTarget, StartFailure::TargetNotFound),
        (Stage::Spawn, StartFailure::StartupTimeout),
        (Stage::Breakpoints, StartFailure::BreakpointUnresolvable),
        (Stage::FirstContinue, StartFailure::StartupTimeout),
    ];
    for (stage, want) in stages {
        let backend = Arc::new(Faulty {
            inner: PdbBackend::new(),
            stage: Some(stage),
        });
        expect_start_failure(&format!("injected {stage:?}"), DebugSession::start_with(backend, &req), want)?;
    }

    // the same stages failing for real
    let spin = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(spin.path().join("spin.py"), "while True:\n    pass\nprint('never')\n").map_err(|e| e.to_string())?;
    let mut bad_interp = req.clone();
    bad_interp.interpreter_cmd = "/no/such/python".into();
    let mut spinning = StartRequest::new(spin.path(), "spin.py").breakpoint("spin.py", 3);
    spinning.timeout = Duration::from_secs(2);
    let natural = [
        ("missing target", StartRequest::new(fixture("f1"), "nope.py"), StartFailure::TargetNotFound),
        ("bad interpreter", bad_interp, StartFailure::SpawnFailed),
        ("blank-line breakpoint", StartRequest::new(fixture("f1"), "counter.py").breakpoint("counter.py", 2), StartFailure::BreakpointUnresolvable),
        ("never reaches breakpoint", spinning, StartFailure::StartupTimeout),
    ];
    for (label, r, want) in natural {
        expect_start_failure(label, DebugSession::start(&r), want)?;
    }

    let clean = Arc::new(Faulty {
        inner: PdbBackend::new(),
        stage: None,
    });
    let (mut s, snap) = DebugSession::start_with(clean, &req).map_err(|e| format!("no fault: {e}"))?;
    ensure!(snap.location.as_ref().map(|l| l.line) == Some(7), "no fault: paused at {:?}", snap.location);
    s.inspect(&InspectQuery::locals()).map_err(|e| format!("no fault: unusable session: {e}"))?;
    s.close();
    ensure!(no_descendants(), "closed session left a child");
    Ok("4 injected + 4 real failures typed, no survivors; unfaulted start usable".into())
}

fn subagent_protocol() -> Outcome {
    let backend = ScriptedBackend::from_file(&script_path("f2_subagent.json")).map_err(|e| e.to_string())?;
    let task = DebugTask::new("Why does the deadline computation raise ValueError?", "repro.py");
    let run = run_subagent(&task, &SubagentConfig::new(fixture("f2"), "accept#sub1"), &backend);
    let a = &run.answer;
    ensure!(run.failure.is_none(), "(a) failure {:?}", run.failure);
    ensure!(a.well_formed, "(a) answer not well formed: {a:?}");
    ensure!(
        [&a.question, &a.answer, &a.evidence, &a.location].iter().all(|f| !f.trim().is_empty()),
        "(a) empty field: {a:?}"
    );
    ensure!(backend.consumed() == 3 && !run.trajectory.forced_finalization, "(a) loop did not stop at the answer");
    ensure!(no_descendants(), "(c) debuggee survived the answered run");

    let mut turns = vec![json!({"tool_calls": [{"name": "debug_start_session", "arguments": {"test": "counter.py", "initial_breakpoints": [{"file": "counter.py", "line": 7}]}}]})];
    for _ in 0..40 {
        turns.push(json!({"content": "looking", "tool_calls": [{"name": "debug_control", "arguments": {"action": "step_over"}}]}));
    }
    let backend = ScriptedBackend::from_json(&serde_json::Value::Array(turns).to_string()).map_err(|e| e.to_string())?;
    let run = run_subagent(&DebugTask::new("What is total?", "counter.py"), &SubagentConfig::new(fixture("f1"), "accept#sub2"), &backend);
    ensure!(run.trajectory.step_count == MAX_STEPS, "(b) {} steps", run.trajectory.step_count);
    ensure!(run.trajectory.forced_finalization, "(b) no forced finalization");
    ensure!(backend.consumed() as u32 == MAX_STEPS + 1, "(b) {} completions", backend.consumed());
    ensure!(no_descendants(), "(c) debuggee survived the capped run");
    Ok(format!("answer parsed in 3 steps; cap at {MAX_STEPS} + 1 finalization; no survivors"))
}

/// Records the workdir each time the main agent is asked for a turn.
struct Watch<'a> {
    inner: ScriptedBackend,
    root: &'a Path,
    seen: Mutex<Vec<(bool, Tree)>>,
}

impl ChatBackend for Watch<'_> {
    fn complete(&self, messages: &[ChatMessage], tools: &[ToolSchema]) -> Result<Completion, LlmError> {
        let called = messages.iter().any(|m| m.tool_calls.iter().any(|c| c.name == DEBUG_SUBAGENT) && m.role == Role::Assistant)
            && messages.iter().any(|m| m.role == Role::Tool && m.content.contains("<debug_answer>"));
        self.seen.lock().unwrap().push((called, tree_bytes(self.root)));
        self.inner.complete(messages, tools)
    }
}

fn f2_episode(dir: &Path, id: &str) -> EpisodeConfig {
    let mut c = EpisodeConfig::new(
        Configuration::Debug2FixToolLimit,
        dir,
        "Calling date_time with a relative end date raises ValueError.",
        "repro.py",
    );
    c.episode_id = id.to_string();
    c
}

fn gating() -> Outcome {
    let dir = copy_fixture("f2");
    let pristine = tree_bytes(dir.path());
    let main = Watch {
        inner: ScriptedBackend::from_file(&script_path("f2_main.json")).map_err(|e| e.to_string())?,
        root: dir.path(),
        seen: Mutex::new(Vec::new()),
    };
    let sub = ScriptedBackend::from_file(&script_path("f2_subagent.json")).map_err(|e| e.to_string())?;
    let r = run_episode(&f2_episode(dir.path(), "gate"), &main, &sub, None).map_err(|e| e.to_string())?;
    let seen = main.seen.lock().unwrap();
    let before: Vec<_> = seen.iter().filter(|(called, _)| !called).collect();
    ensure!(before.len() >= 2, "edit attempt was not made before the call");
    ensure!(before.iter().all(|(_, files)| *files == pristine), "workdir changed before debug_subagent");
    ensure!(r.final_patch.contains("+        return datetime.now()"), "edit did not land after the call");
    drop(seen);

    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = out.path().join("suite.jsonl");
    let sink = TrajectorySink::create(&log).map_err(|e| e.to_string())?;
    let mut labels = HashMap::new();
    for i in 0..10 {
        let dir = copy_fixture("f2");
        let main = ScriptedBackend::from_file(&script_path("f2_main.json")).map_err(|e| e.to_string())?;
        let sub = ScriptedBackend::from_file(&script_path("f2_subagent.json")).map_err(|e| e.to_string())?;
        let id = format!("suite{i}");
        let r = run_episode(&f2_episode(dir.path(), &id), &main, &sub, Some(&sink)).map_err(|e| e.to_string())?;
        ensure!(r.status == EpisodeStatus::Completed, "{id}: {:?}", r.status);
        let passed = std::process::Command::new(DEFAULT_INTERPRETER)
            .arg("repro.py")
            .current_dir(dir.path())
            .output()
            .map_err(|e| e.to_string())?
            .status
            .success();
        labels.insert(id, passed);
    }
    let steps = read_trajectory(&log).map_err(|e| e.to_string())?;
    let report = compute_metrics(&steps, &labels, None).map_err(|e| e.to_string())?;
    ensure!(report.episodes == 10, "{} episodes", report.episodes);
    ensure!((report.call_rate - 100.0).abs() < 0.05, "call rate {:.1}", report.call_rate);
    ensure!(no_descendants(), "debuggees survived");
    Ok(format!("workdir unchanged before the call; suite call rate {:.1}%, pass rate {:.1}%", report.call_rate, report.pass_rate))
}

fn registry_exclusivity() -> Outcome {
    for c in Configuration::ALL {
        let reg = build_tool_registry(c);
        let raw: Vec<&str> = DEBUG_TOOLS.iter().copied().filter(|t| reg.contains(t)).collect();
        let sub = reg.contains(DEBUG_SUBAGENT);
        match c {
            Configuration::Debug2Fix | Configuration::Debug2FixToolLimit => {
                ensure!(sub && raw.is_empty(), "{c}: subagent={sub}, raw={raw:?}")
            }
            Configuration::Baseline => ensure!(!sub && raw.is_empty(), "{c}: subagent={sub}, raw={raw:?}"),
            Configuration::DebugToolsOnly => ensure!(!sub && raw.len() == DEBUG_TOOLS.len(), "{c}: subagent={sub}, raw={raw:?}"),
        }
        let names = reg.names();
        let schema_names: Vec<&str> = reg.schemas().iter().map(|s| s.name.as_str()).collect();
        ensure!(names.iter().map(String::as_str).eq(schema_names), "{c}: names and schemas disagree");
    }
    Ok(format!("{} configurations checked", Configuration::ALL.len()))
}

fn step(episode: &str, agent: Agent, index: u32, tool: Option<&str>, tokens: (u64, u64)) -> TrajectoryStep {
    TrajectoryStep {
        episode_id: episode.into(),
        agent,
        step_index: index,
        role: Role::Assistant,
        content_digest: String::new(),
        tool_name: tool.map(str::to_string),
        tool_args_digest: None,
        tokens: TokenUsage {
            input_tokens: tokens.0,
            output_tokens: tokens.1,
        },
        timestamp: "2026-01-01T00:00:00.000Z".into(),
        question_category: None,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() < tol
}

fn metrics_arithmetic() -> Outcome {
    // main steps per episode, sub steps (0 = no call), pass label
    let plan: [(u32, u32, bool); 10] = [
        (3, 2, true),
        (4, 3, true),
        (5, 4, true),
        (6, 2, false),
        (7, 3, true),
        (3, 4, true),
        (4, 0, false),
        (5, 0, true),
        (6, 0, false),
        (7, 0, true),
    ];
    let mut steps = Vec::new();
    let mut labels = HashMap::new();
    for (e, &(main, sub, pass)) in plan.iter().enumerate() {
        let id = format!("ep{e}");
        for i in 1..=main {
            let tool = (i < main).then_some(if i == 2 && sub > 0 { DEBUG_SUBAGENT } else { "bash" });
            steps.push(step(&id, Agent::Main, i, tool, (100, 10)));
        }
        for i in 1..=sub {
            let tool = match i {
                1 => Some("debug_start_session"),
                i if i == sub => None,
                _ => Some("debug_inspect"),
            };
            steps.push(step(&format!("{id}#sub1"), Agent::Sub, i, tool, (200, 20)));
        }
        labels.insert(id, pass);
    }
    // hand-computed: 7/10 pass, 6/10 call, 50/10 main steps, 18/10 sub steps,
    // main tokens 500 + 50, sub tokens 360 + 36
    let r = compute_metrics(&steps, &labels, None).map_err(|e| e.to_string())?;
    ensure!(r.episodes == 10, "episodes {}", r.episodes);
    ensure!(close(r.pass_rate, 70.0, 0.05), "pass rate {}", r.pass_rate);
    ensure!(close(r.call_rate, 60.0, 0.05), "call rate {}", r.call_rate);
    ensure!(close(r.avg_steps_main, 5.0, 0.005), "main steps {}", r.avg_steps_main);
    ensure!(close(r.avg_steps_sub, 1.8, 0.005), "sub steps {}", r.avg_steps_sub);
    ensure!(r.avg_tokens_main == 550, "main tokens {}", r.avg_tokens_main);
    ensure!(r.avg_tokens_sub == 396, "sub tokens {}", r.avg_tokens_sub);

    let baseline = MetricsReport {
        episodes: 10,
        pass_rate: 60.0,
        call_rate: 0.0,
        avg_steps_main: 4.0,
        avg_steps_sub: 0.0,
        avg_tokens_main: 500,
        avg_tokens_sub: 0,
        deltas_vs_baseline: None,
    };
    let r = compute_metrics(&steps, &labels, Some(&baseline)).map_err(|e| e.to_string())?;
    let d = |m: &str| r.delta(m).map(format_delta);
    ensure!(d("pass_rate").as_deref() == Some("(+16.7%)"), "pass delta {:?}", d("pass_rate"));
    ensure!(d("avg_steps_main").as_deref() == Some("(+25.0%)"), "steps delta {:?}", d("avg_steps_main"));
    ensure!(d("avg_tokens_main").as_deref() == Some("(+10.0%)"), "tokens delta {:?}", d("avg_tokens_main"));
    ensure!(d("call_rate").is_none(), "delta against a zero baseline");
    ensure!(format_delta(100.0 * (73.1 - 60.2) / 60.2) == "(+21.4%)", "60.2 -> 73.1 formats as {}", format_delta(100.0 * (73.1 - 60.2) / 60.2));

    let sub = step_distribution(&steps, Agent::Sub);
    ensure!(sub.is_conserved(), "sub distribution not conserved");
    ensure!(sub.share(1, "debug_start_session") == Some(100.0), "position 1: {:?}", sub.share(1, "debug_start_session"));
    ensure!(sub.positions[0].alive == 6, "sub trajectories {}", sub.positions[0].alive);
    let main = step_distribution(&steps, Agent::Main);
    ensure!(main.is_conserved(), "main distribution not conserved");
    ensure!(main.positions[0].alive == 10 && main.positions.len() == 7, "main positions {:?}", main.positions.len());
    Ok("rates, averages, deltas and both distributions match hand values".into())
}

fn epoch_end_to_end() -> Outcome {
    let dir = fixture("f2");
    check_target(&dir, "repro.py").map_err(|e| e.to_string())?;
    let backend = ScriptedBackend::from_file(&script_path("f2_subagent.json")).map_err(|e| e.to_string())?;
    let task = DebugTask::new("Why does the deadline computation raise ValueError?", "repro.py");
    let run = run_subagent(&task, &SubagentConfig::new(&dir, "ask#sub1"), &backend);
    ensure!(!run.is_session_failure(), "session failure {:?}", run.failure);
    ensure!(run.answer.well_formed, "answer not well formed");
    ensure!(run.answer.evidence.contains("1970"), "evidence lacks the epoch: {}", run.answer.evidence);
    ensure!(no_descendants(), "debuggee survived");
    Ok(format!("evidence: {}", run.answer.evidence.lines().next().unwrap_or_default()))
}

/// Scripted suite writing trajectories under `root`, which is recreated.
fn scripted_suite(root: &Path) -> Result<Vec<(PathBuf, String)>, String> {
    let _ = std::fs::remove_dir_all(root);
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let repo = root.join("repo");
    std::fs::create_dir_all(&repo).map_err(|e| e.to_string())?;
    for e in std::fs::read_dir(fixture("f2")).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        copy_tree(&e.path(), &repo.join(e.file_name()))?;
    }
    let log = root.join("episode.jsonl");
    let sink = TrajectorySink::create(&log).map_err(|e| e.to_string())?;
    let main = ScriptedBackend::from_file(&script_path("f2_main.json")).map_err(|e| e.to_string())?;
    let sub = ScriptedBackend::from_file(&script_path("f2_subagent.json")).map_err(|e| e.to_string())?;
    run_episode(&f2_episode(&repo, "det"), &main, &sub, Some(&sink)).map_err(|e| e.to_string())?;

    let capped = root.join("capped.jsonl");
    let sink = TrajectorySink::create(&capped).map_err(|e| e.to_string())?;
    let turns: Vec<_> = (0..10).map(|_| json!({"tool_calls": [{"name": "list_dir"}]})).collect();
    let main = ScriptedBackend::from_json(&serde_json::Value::Array(turns).to_string()).map_err(|e| e.to_string())?;
    let mut c = EpisodeConfig::new(Configuration::Baseline, &repo, "task", "repro.py");
    c.episode_id = "capped".into();
    c.max_main_steps = 5;
    run_episode(&c, &main, &ScriptedBackend::new(Vec::new()), Some(&sink)).map_err(|e| e.to_string())?;

    let mut out = Vec::new();
    for path in [&log, &capped] {
        for p in [path.clone(), transcript_path(path)] {
            let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            out.push((p, normalize_timestamps(&text)));
        }
    }
    Ok(out)
}

fn copy_tree(src: &Path, dst: &Path) -> Result<(), String> {
    if src.file_name().is_some_and(|n| n == "__pycache__") {
        return Ok(());
    }
    if src.is_dir() {
        std::fs::create_dir_all(dst).map_err(|e| e.to_string())?;
        for e in std::fs::read_dir(src).map_err(|e| e.to_string())? {
            let e = e.map_err(|e| e.to_string())?;
            copy_tree(&e.path(), &dst.join(e.file_name()))?;
        }
        Ok(())
    } else {
        std::fs::copy(src, dst).map(|_| ()).map_err(|e| e.to_string())
    }
}

fn determinism() -> Outcome {
    let root = std::env::temp_dir().join(format!("d2f-acceptance-{}", std::process::id()));
    let first = scripted_suite(&root)?;
    let second = scripted_suite(&root)?;
    let _ = std::fs::remove_dir_all(&root);
    ensure!(first.len() == second.len(), "different file sets");
    let mut bytes = 0;
    for ((path, a), (_, b)) in first.iter().zip(&second) {
        ensure!(!a.is_empty(), "{} is empty", path.display());
        if a != b {
            let (line, (x, y)) = a.lines().zip(b.lines()).enumerate().find(|(_, (x, y))| x != y).unwrap_or((0, ("", "")));
            let at = x.chars().zip(y.chars()).position(|(p, q)| p != q).unwrap_or(0);
            let cut = |s: &str| s.chars().skip(at.saturating_sub(60)).take(120).collect::<String>();
            return Err(format!("{} differs at line {}: {} vs {}", path.display(), line + 1, cut(x), cut(y)));
        }
        bytes += a.len();
    }
    Ok(format!("{} files, {bytes} bytes identical after timestamp normalization", first.len()))
}

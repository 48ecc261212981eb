//! Fixture corpus checks: the recorded facts of each fixture, a direct-execution
//! oracle and a debugger session must all agree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::driver::BreakEvent;
use crate::process::run_captured;
use crate::session::{ControlAction, DebugSession, InspectQuery, SessionError, StartRequest};

pub const MANIFEST: &str = "fixture.json";
pub const ORACLE_PY: &str = include_str!("../assets/oracle.py");
pub const DEFAULT_CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
const ORACLE_MARK: &str = "ORACLE_FACTS ";
const MAX_CONTINUES: usize = 1000;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture corpus not found: {0}")]
    MissingCorpus(PathBuf),
    #[error("bad manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("oracle failed for {id}: {message}")]
    Oracle { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureMode {
    Script,
    Pytest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub file: String,
    pub line: u32,
    #[serde(default = "one")]
    pub hit: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldsProbe {
    pub expr: String,
    pub depth: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pause {
    pub file: String,
    pub function: String,
    pub line: u32,
}

/// Runtime facts observed at the probe.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facts {
    pub pause: Option<Pause>,
    #[serde(default)]
    pub locals: BTreeMap<String, String>,
    pub exception: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub expressions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub mode: FixtureMode,
    pub target: String,
    pub probe: Probe,
    #[serde(default)]
    pub expressions: Vec<String>,
    #[serde(default)]
    pub fields: Option<FieldsProbe>,
    pub expected: Facts,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    pub manifest: FixtureManifest,
}

/// Every `*/fixture.json` under `corpus`, sorted by directory name.
pub fn load_corpus(corpus: &Path) -> Result<Vec<Fixture>, FixtureError> {
    if !corpus.is_dir() {
        return Err(FixtureError::MissingCorpus(corpus.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(corpus)
        .map_err(|_| FixtureError::MissingCorpus(corpus.to_path_buf()))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    dirs.into_iter()
        .map(|dir| {
            let path = dir.join(MANIFEST);
            let bad = |message: String| FixtureError::BadManifest {
                path: path.clone(),
                message,
            };
            let text = std::fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
            let manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            Ok(Fixture { dir, manifest })
        })
        .collect()
}

fn relative(path: &Path, root: &Path) -> String {
    let canon = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    let root = root.canonicalize().unwrap_or_else(|_| root.to_path_buf());
    canon.strip_prefix(&root).unwrap_or(&canon).display().to_string()
}

/// Runs the fixture without a debugger under `sys.settrace`.
pub fn run_oracle(fixture: &Fixture, interpreter: &str) -> Result<Facts, FixtureError> {
    let m = &fixture.manifest;
    let fail = |message: String| FixtureError::Oracle {
        id: m.id.clone(),
        message,
    };
    let request = serde_json::json!({
        "workdir": fixture.dir,
        "mode": m.mode,
        "target": m.target,
        "probe": m.probe,
        "expressions": m.expressions,
        "fields": m.fields,
    });
    let mut argv = interpreter.split_whitespace();
    let program = argv.next().ok_or_else(|| fail("empty interpreter command".into()))?;
    let mut cmd = Command::new(program);
    cmd.args(argv)
        .arg("-c")
        .arg(ORACLE_PY)
        .arg(request.to_string())
        .current_dir(&fixture.dir)
        .env("PYTHONDONTWRITEBYTECODE", "1");
    let out = run_captured(&mut cmd, Duration::from_secs(60)).map_err(|e| fail(e.to_string()))?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(ORACLE_MARK))
        .ok_or_else(|| fail(format!("no facts in output; stderr: {}", String::from_utf8_lossy(&out.stderr).trim())))?;
    let mut facts: Facts = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
    if let Some(p) = facts.pause.as_mut() {
        p.file = relative(Path::new(&p.file), &fixture.dir);
    }
    Ok(facts)
}

/// Collects the same facts through a debugger session.
pub fn run_session(fixture: &Fixture, interpreter: &str) -> Result<Facts, SessionError> {
    let m = &fixture.manifest;
    let mut req = StartRequest::new(&fixture.dir, &m.target).breakpoint(&m.probe.file, m.probe.line);
    req.interpreter_cmd = interpreter.to_string();
    let (mut session, mut snap) = DebugSession::start(&req)?;
    let result = collect(fixture, &mut session, &mut snap);
    session.close();
    result
}

fn collect(
    fixture: &Fixture,
    session: &mut DebugSession,
    snap: &mut crate::session::SessionSnapshot,
) -> Result<Facts, SessionError> {
    let m = &fixture.manifest;
    let probe_file = fixture.dir.join(&m.probe.file).canonicalize().unwrap_or_else(|_| fixture.dir.join(&m.probe.file));
    let mut facts = Facts::default();
    let mut hits = 0;
    for _ in 0..MAX_CONTINUES {
        if let BreakEvent::BreakpointHit { location } = &snap.event {
            let here = location.file.canonicalize().unwrap_or_else(|_| location.file.clone());
            if here == probe_file && location.line == m.probe.line {
                hits += 1;
                if hits == m.probe.hit {
                    facts.pause = Some(Pause {
                        file: relative(&location.file, &fixture.dir),
                        function: location.function.clone(),
                        line: location.line,
                    });
                    break;
                }
            }
        }
        if matches!(snap.event, BreakEvent::RunCompleted | BreakEvent::ExceptionRaised { .. }) {
            break;
        }
        *snap = session.control(ControlAction::Continue)?;
    }
    if facts.pause.is_some() {
        facts.locals = session.inspect(&InspectQuery::locals())?.bindings.into_iter().collect();
        for expr in &m.expressions {
            let value = match session.inspect(&InspectQuery::expression(expr.clone())) {
                Ok(r) => r.rendered,
                Err(SessionError::EvaluationError(e)) => format!("error: {}", e.split(':').next().unwrap_or(&e).trim()),
                Err(e) => return Err(e),
            };
            facts.expressions.insert(expr.clone(), value);
        }
        if let Some(f) = &m.fields {
            facts.fields = session.inspect(&InspectQuery::fields(f.expr.clone(), f.depth))?.bindings.into_iter().collect();
        }
        for b in session.list_breakpoints()? {
            session.remove_breakpoint(b.id)?;
        }
    }
    for _ in 0..MAX_CONTINUES {
        match &snap.event {
            BreakEvent::ExceptionRaised { exception_type, .. } => {
                facts.exception = Some(exception_type.clone());
                break;
            }
            BreakEvent::RunCompleted => {
                facts.exception = snap.test_failure.as_ref().map(|f| f.exception_type.clone());
                break;
            }
            _ => *snap = session.control(ControlAction::Continue)?,
        }
    }
    Ok(facts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub fact: String,
    pub expected: Option<String>,
    pub oracle: Option<String>,
    pub session: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureReport {
    pub id: String,
    pub passed: bool,
    pub mismatches: Vec<Mismatch>,
    /// Set when the oracle or the session could not run at all.
    pub error: Option<String>,
    pub facts_checked: usize,
    pub elapsed_ms: u128,
}

fn flatten(f: &Facts) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Some(p) = &f.pause {
        out.insert("pause.file".into(), p.file.clone());
        out.insert("pause.function".into(), p.function.clone());
        out.insert("pause.line".into(), p.line.to_string());
    }
    out.insert("exception".into(), f.exception.clone().unwrap_or_else(|| "none".into()));
    for (k, v) in &f.locals {
        out.insert(format!("locals.{k}"), v.clone());
    }
    for (k, v) in &f.expressions {
        out.insert(format!("expressions[{k}]"), v.clone());
    }
    for (k, v) in &f.fields {
        out.insert(format!("fields.{k}"), v.clone());
    }
    out
}

/// Every fact present in any of the three sources must agree across all three.
pub fn compare(expected: &Facts, oracle: &Facts, session: &Facts) -> (usize, Vec<Mismatch>) {
    let (e, o, s) = (flatten(expected), flatten(oracle), flatten(session));
    let keys: BTreeSet<&String> = e.keys().chain(o.keys()).chain(s.keys()).collect();
    let mismatches = keys
        .iter()
        .filter_map(|k| {
            let (ev, ov, sv) = (e.get(*k), o.get(*k), s.get(*k));
            (ev != ov || ev != sv).then(|| Mismatch {
                fact: k.to_string(),
                expected: ev.cloned(),
                oracle: ov.cloned(),
                session: sv.cloned(),
            })
        })
        .collect();
    (keys.len(), mismatches)
}

pub fn verify_fixture(fixture: &Fixture, interpreter: &str) -> FixtureReport {
    let started = Instant::now();
    let id = fixture.manifest.id.clone();
    let outcome = run_oracle(fixture, interpreter)
        .map_err(|e| e.to_string())
        .and_then(|o| run_session(fixture, interpreter).map(|s| (o, s)).map_err(|e| format!("session: {e}")));
    let report = match outcome {
        Ok((oracle, session)) => {
            let (checked, mismatches) = compare(&fixture.manifest.expected, &oracle, &session);
            FixtureReport {
                id,
                passed: mismatches.is_empty(),
                mismatches,
                error: None,
                facts_checked: checked,
                elapsed_ms: started.elapsed().as_millis(),
            }
        }
        Err(e) => FixtureReport {
            id,
            passed: false,
            mismatches: Vec::new(),
            error: Some(e),
            facts_checked: 0,
            elapsed_ms: started.elapsed().as_millis(),
        },
    };
    debug!(fixture = %report.id, passed = report.passed, "fixture verified");
    report
}

pub fn verify_corpus(corpus: &Path, interpreter: &str) -> Result<Vec<FixtureReport>, FixtureError> {
    Ok(load_corpus(corpus)?.iter().map(|f| verify_fixture(f, interpreter)).collect())
}

pub fn render_reports(reports: &[FixtureReport]) -> String {
    let width = reports.iter().map(|r| r.id.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<width$}  result  facts  ms\n", "fixture");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:<6}  {:>5}  {}",
            r.id,
            if r.passed { "pass" } else { "FAIL" },
            r.facts_checked,
            r.elapsed_ms
        );
        if let Some(e) = &r.error {
            let _ = writeln!(out, "    error: {e}");
        }
        for m in &r.mismatches {
            let show = |v: &Option<String>| v.clone().unwrap_or_else(|| "(missing)".into());
            let _ = writeln!(
                out,
                "    {}: expected {} | oracle {} | session {}",
                m.fact,
                show(&m.expected),
                show(&m.oracle),
                show(&m.session)
            );
        }
    }
    out
}

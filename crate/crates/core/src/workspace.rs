//! Read-only repository access confined to one working directory.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::Serialize;
use thiserror::Error;
use walkdir::WalkDir;

pub const MAX_READ_LINES: u32 = 400;
pub const MAX_MATCHES: usize = 200;
pub(crate) const SKIP_DIRS: [&str; 5] = [".git", "__pycache__", "node_modules", ".venv", "venv"];
const MAX_GREP_FILE: u64 = 2 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("not a UTF-8 text file: {0}")]
    NotUtf8Text(String),
    #[error("bad pattern: {0}")]
    BadPattern(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileSlice {
    pub path: PathBuf,
    pub start_line: u32,
    pub end_line: u32,
    pub numbered_lines: Vec<(u32, String)>,
    pub total_lines: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatchList {
    pub pattern: String,
    pub matches: Vec<(PathBuf, u32, String)>,
    pub capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DirEntry {
    pub name: String,
    pub kind: EntryKind,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl AsRef<Path>) -> Result<Self, WorkspaceError> {
        let root = root
            .as_ref()
            .canonicalize()
            .map_err(|_| WorkspaceError::NotFound(root.as_ref().display().to_string()))?;
        Ok(Workspace { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolves `path` inside the root. Anything escaping it reads as missing.
    pub fn resolve(&self, path: &str) -> Result<PathBuf, WorkspaceError> {
        let candidate = Path::new(path);
        let joined = if candidate.is_absolute() {
            candidate.to_path_buf()
        } else {
            self.root.join(candidate)
        };
        let real = joined
            .canonicalize()
            .map_err(|_| WorkspaceError::NotFound(path.to_string()))?;
        if !real.starts_with(&self.root) {
            return Err(WorkspaceError::NotFound(path.to_string()));
        }
        Ok(real)
    }

    pub fn relative<'a>(&self, path: &'a Path) -> &'a Path {
        path.strip_prefix(&self.root).unwrap_or(path)
    }

    pub fn read_file(&self, path: &str, start: Option<u32>, end: Option<u32>) -> Result<FileSlice, WorkspaceError> {
        let real = self.resolve(path)?;
        if !real.is_file() {
            return Err(WorkspaceError::NotFound(path.to_string()));
        }
        let text = read_text(&real).ok_or_else(|| WorkspaceError::NotUtf8Text(path.to_string()))?;
        let lines: Vec<&str> = text.lines().collect();
        let total = lines.len() as u32;
        if total == 0 {
            return Ok(FileSlice {
                path: real,
                start_line: 0,
                end_line: 0,
                numbered_lines: Vec::new(),
                total_lines: 0,
            });
        }
        let start_line = start.unwrap_or(1).clamp(1, total);
        let default_end = start_line.saturating_add(MAX_READ_LINES - 1);
        let end_line = end
            .unwrap_or(default_end)
            .min(default_end)
            .min(total)
            .max(start_line);
        let numbered_lines = (start_line..=end_line)
            .map(|n| (n, lines[n as usize - 1].to_string()))
            .collect();
        Ok(FileSlice {
            path: real,
            start_line,
            end_line,
            numbered_lines,
            total_lines: total,
        })
    }

    pub fn grep(&self, pattern: &str, scope: Option<&str>) -> Result<MatchList, WorkspaceError> {
        let re = Regex::new(pattern).map_err(|e| WorkspaceError::BadPattern(e.to_string()))?;
        let base = match scope {
            Some(s) if !s.trim().is_empty() => self.resolve(s)?,
            _ => self.root.clone(),
        };
        let mut files: Vec<PathBuf> = WalkDir::new(&base)
            .follow_links(false)
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || !SKIP_DIRS.contains(&e.file_name().to_string_lossy().as_ref()))
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file())
            .filter(|e| e.metadata().map(|m| m.len() <= MAX_GREP_FILE).unwrap_or(false))
            .map(|e| e.into_path())
            .collect();
        files.sort();

        let mut matches = Vec::new();
        let mut capped = false;
        'files: for file in files {
            let Some(text) = read_text(&file) else {
                continue;
            };
            for (i, line) in text.lines().enumerate() {
                if re.is_match(line) {
                    if matches.len() == MAX_MATCHES {
                        capped = true;
                        break 'files;
                    }
                    matches.push((file.clone(), i as u32 + 1, line.to_string()));
                }
            }
        }
        Ok(MatchList {
            pattern: pattern.to_string(),
            matches,
            capped,
        })
    }

    pub fn list_dir(&self, path: &str) -> Result<Vec<DirEntry>, WorkspaceError> {
        let real = self.resolve(if path.trim().is_empty() { "." } else { path })?;
        if !real.is_dir() {
            return Err(WorkspaceError::NotFound(path.to_string()));
        }
        let mut entries: Vec<DirEntry> = std::fs::read_dir(&real)
            .map_err(|_| WorkspaceError::NotFound(path.to_string()))?
            .filter_map(Result::ok)
            .map(|e| DirEntry {
                name: e.file_name().to_string_lossy().into_owned(),
                kind: if e.file_type().map(|t| t.is_dir()).unwrap_or(false) {
                    EntryKind::Dir
                } else {
                    EntryKind::File
                },
            })
            .collect();
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(entries)
    }

    pub fn render_slice(&self, slice: &FileSlice) -> String {
        let mut out = format!(
            "{} (lines {}-{} of {})\n",
            self.relative(&slice.path).display(),
            slice.start_line,
            slice.end_line,
            slice.total_lines
        );
        for (n, text) in &slice.numbered_lines {
            let _ = writeln!(out, "{n:>5}  {text}");
        }
        out
    }

    pub fn render_matches(&self, list: &MatchList) -> String {
        if list.matches.is_empty() {
            return format!("no matches for /{}/", list.pattern);
        }
        let mut out = String::new();
        for (path, line, text) in &list.matches {
            let _ = writeln!(out, "{}:{}: {}", self.relative(path).display(), line, text.trim_end());
        }
        if list.capped {
            let _ = writeln!(out, "[stopped after {MAX_MATCHES} matches]");
        }
        out
    }
}

pub fn render_entries(entries: &[DirEntry]) -> String {
    if entries.is_empty() {
        return "(empty directory)".into();
    }
    entries
        .iter()
        .map(|e| match e.kind {
            EntryKind::Dir => format!("{}/", e.name),
            EntryKind::File => e.name.clone(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Contents of a UTF-8 text file; binary files (NUL bytes or bad UTF-8) yield none.
fn read_text(path: &Path) -> Option<String> {
    let mut buf = Vec::new();
    std::fs::File::open(path).ok()?.read_to_end(&mut buf).ok()?;
    if buf[..buf.len().min(8192)].contains(&0) {
        return None;
    }
    String::from_utf8(buf).ok()
}

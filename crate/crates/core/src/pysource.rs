//! Line-oriented static scanning of Python sources.
//!
//! Enough structure to find function definitions by (qualified) name and the
//! first line of a body a debugger can stop on; not a parser.

use std::path::{Path, PathBuf};

use walkdir::WalkDir;

const SKIP_DIRS: [&str; 6] = ["__pycache__", "node_modules", "site-packages", "venv", ".venv", ".git"];

/// A `def` found in a file, with its enclosing class/def chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Definition {
    pub file: PathBuf,
    pub line: u32,
    /// Enclosing scopes outermost first, ending with the function itself.
    pub scopes: Vec<String>,
}

impl Definition {
    pub fn qualified_name(&self) -> String {
        self.scopes.join(".")
    }
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

fn is_blank_or_comment(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

/// Opening triple quote of a string literal at the start of `text`, if any.
fn leading_triple_quote(text: &str) -> Option<&'static str> {
    let t = text.trim_start().trim_start_matches(['r', 'R', 'b', 'B', 'u', 'U', 'f', 'F']);
    if t.starts_with("\"\"\"") {
        Some("\"\"\"")
    } else if t.starts_with("'''") {
        Some("'''")
    } else {
        None
    }
}

fn starts_string_literal(text: &str) -> bool {
    let t = text.trim_start().trim_start_matches(['r', 'R', 'b', 'B', 'u', 'U', 'f', 'F']);
    t.starts_with('"') || t.starts_with('\'')
}

/// Marks lines that sit inside a triple-quoted string (excluding the opening line).
fn string_interior_mask(lines: &[&str]) -> Vec<bool> {
    let mut mask = vec![false; lines.len()];
    let mut open: Option<&str> = None;
    for (i, line) in lines.iter().enumerate() {
        let mut rest: &str = line;
        if let Some(q) = open {
            mask[i] = true;
            match rest.find(q) {
                Some(pos) => {
                    open = None;
                    rest = &rest[pos + 3..];
                }
                None => continue,
            }
        }
        // Count remaining triple quotes on the line to see if one stays open.
        loop {
            let d = rest.find("\"\"\"");
            let s = rest.find("'''");
            let (pos, q) = match (d, s) {
                (Some(a), Some(b)) if a <= b => (a, "\"\"\""),
                (Some(_), Some(b)) => (b, "'''"),
                (Some(a), None) => (a, "\"\"\""),
                (None, Some(b)) => (b, "'''"),
                (None, None) => break,
            };
            if rest[..pos].contains('#') {
                break;
            }
            let after = &rest[pos + 3..];
            match after.find(q) {
                Some(end) => rest = &after[end + 3..],
                None => {
                    open = Some(q);
                    break;
                }
            }
        }
    }
    mask
}

fn def_name(trimmed: &str) -> Option<&str> {
    let rest = trimmed
        .strip_prefix("async def ")
        .or_else(|| trimmed.strip_prefix("def "))?;
    let end = rest.find(|c: char| !(c.is_alphanumeric() || c == '_'))?;
    Some(&rest[..end])
}

fn class_name(trimmed: &str) -> Option<&str> {
    let rest = trimmed.strip_prefix("class ")?;
    let end = rest
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(rest.len());
    Some(&rest[..end])
}

/// All function definitions in one source text.
pub fn definitions_in(source: &str, file: &Path) -> Vec<Definition> {
    let lines: Vec<&str> = source.lines().collect();
    let mask = string_interior_mask(&lines);
    let mut stack: Vec<(usize, String)> = Vec::new();
    let mut found = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if mask[i] || is_blank_or_comment(line) {
            continue;
        }
        let indent = indent_of(line);
        while stack.last().is_some_and(|(d, _)| *d >= indent) {
            stack.pop();
        }
        let trimmed = line.trim_start();
        if let Some(name) = def_name(trimmed) {
            let mut scopes: Vec<String> = stack.iter().map(|(_, n)| n.clone()).collect();
            scopes.push(name.to_string());
            found.push(Definition {
                file: file.to_path_buf(),
                line: i as u32 + 1,
                scopes,
            });
            stack.push((indent, name.to_string()));
        } else if let Some(name) = class_name(trimmed) {
            stack.push((indent, name.to_string()));
        }
    }
    found
}

/// Index of the line ending a (possibly multi-line) `def` signature.
fn signature_end(lines: &[&str], def_idx: usize) -> (usize, usize) {
    let mut depth: i32 = 0;
    for (i, line) in lines.iter().enumerate().skip(def_idx) {
        let mut quote: Option<char> = None;
        let mut prev = '\0';
        for (col, c) in line.char_indices() {
            match quote {
                Some(q) => {
                    if c == q && prev != '\\' {
                        quote = None;
                    }
                }
                None => match c {
                    '\'' | '"' => quote = Some(c),
                    '(' | '[' | '{' => depth += 1,
                    ')' | ']' | '}' => depth -= 1,
                    '#' => break,
                    ':' if depth == 0 => return (i, col),
                    _ => {}
                },
            }
            prev = c;
        }
    }
    (def_idx, lines[def_idx].len())
}

/// First line inside the body of the `def` at `def_line` where a debugger can
/// stop: blank lines, comments and a leading docstring are skipped.
pub fn first_body_line(source: &str, def_line: u32) -> Option<u32> {
    let lines: Vec<&str> = source.lines().collect();
    let def_idx = def_line.checked_sub(1)? as usize;
    let def_indent = indent_of(lines.get(def_idx)?);
    let (end_idx, colon) = signature_end(&lines, def_idx);
    let inline = lines[end_idx][colon + 1..].trim();
    if !inline.is_empty() && !inline.starts_with('#') {
        return Some(end_idx as u32 + 1);
    }
    let mut i = end_idx + 1;
    let mut seen_statement = false;
    while i < lines.len() {
        let line = lines[i];
        if is_blank_or_comment(line) {
            i += 1;
            continue;
        }
        if indent_of(line) <= def_indent {
            return None;
        }
        if !seen_statement && starts_string_literal(line) {
            seen_statement = true;
            // Docstring: skip to its closing quote.
            if let Some(q) = leading_triple_quote(line) {
                let start = line.find(q).unwrap() + 3;
                if line[start..].contains(q) {
                    i += 1;
                } else {
                    i += 1;
                    while i < lines.len() && !lines[i].contains(q) {
                        i += 1;
                    }
                    i += 1;
                }
            } else {
                i += 1;
            }
            continue;
        }
        return Some(i as u32 + 1);
    }
    None
}

fn module_parts(root: &Path, file: &Path) -> Vec<String> {
    let rel = file.strip_prefix(root).unwrap_or(file);
    let mut parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    if let Some(last) = parts.last_mut() {
        if let Some(stem) = last.strip_suffix(".py") {
            *last = stem.to_string();
        }
    }
    parts
}

/// Python files under `root`, skipping caches, virtualenvs and hidden dirs.
pub fn python_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(root)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| {
            let name = e.file_name().to_string_lossy();
            e.depth() == 0 || !(name.starts_with('.') || SKIP_DIRS.contains(&name.as_ref()))
        })
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "py"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

/// Splits `a.b.c` or `a::b::c` into parts.
pub fn split_qualified(name: &str) -> Vec<&str> {
    name.split("::")
        .flat_map(|p| p.split('.'))
        .filter(|p| !p.is_empty())
        .collect()
}

/// Definitions under `root` whose module path plus scope chain ends with `name`.
pub fn find_definitions(root: &Path, name: &str) -> Vec<Definition> {
    let wanted = split_qualified(name);
    if wanted.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for file in python_files(root) {
        let Ok(source) = std::fs::read_to_string(&file) else {
            continue;
        };
        for def in definitions_in(&source, &file) {
            if def.scopes.last().map(String::as_str) != wanted.last().copied() {
                continue;
            }
            let mut chain = module_parts(root, &file);
            chain.extend(def.scopes.iter().cloned());
            if chain.len() >= wanted.len() && chain[chain.len() - wanted.len()..] == wanted[..] {
                out.push(def);
            }
        }
    }
    out
}

/// Definitions in one file matching a scope chain exactly (`Class`, `method`).
pub fn find_in_file(file: &Path, scopes: &[&str]) -> Vec<Definition> {
    let Ok(source) = std::fs::read_to_string(file) else {
        return Vec::new();
    };
    definitions_in(&source, file)
        .into_iter()
        .filter(|d| d.scopes.iter().map(String::as_str).eq(scopes.iter().copied()))
        .collect()
}

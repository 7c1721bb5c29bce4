//! Provenance markers: whole-line HTML comments of the form
//! `<!-- icm:src=<path>[#<anchor>] -->` that tie the following span of an
//! output file back to the input that informed it.
//!
//! A marker governs its own line through the line before the next marker, or
//! to the end of the file. Marker paths are workspace-relative.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::ResolvedInput;
use crate::markdown::find_anchor;
use crate::paths::{normalize_lexically, rel_string};
use crate::workspace::{io_err, walk_files, Workspace, WorkspaceError};

const MARKER_OPEN: &str = "<!-- icm:src=";
const MARKER_CLOSE: &str = " -->";

/// First line of the tracing instruction appended to a bundle's contract
/// segment. Agents (and the mock agent) key off it.
pub const INSTRUCTION_HEADER: &str = "<!-- icm:provenance -->";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceRef {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
}

impl SourceRef {
    pub fn new(path: impl Into<String>, anchor: Option<String>) -> Self {
        SourceRef {
            path: normalize_rel(&path.into()),
            anchor,
        }
    }

    /// Parses `path[#anchor]`.
    pub fn parse(s: &str) -> SourceRef {
        match s.split_once('#') {
            Some((p, a)) if !a.is_empty() => SourceRef::new(p, Some(a.to_string())),
            Some((p, _)) => SourceRef::new(p, None),
            None => SourceRef::new(s, None),
        }
    }

    /// Path-only queries match any anchor.
    pub fn matches(&self, query: &SourceRef) -> bool {
        self.path == query.path && (query.anchor.is_none() || self.anchor == query.anchor)
    }

    pub fn marker_line(&self) -> String {
        format!("{MARKER_OPEN}{self}{MARKER_CLOSE}")
    }
}

impl fmt::Display for SourceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.path)?;
        if let Some(a) = &self.anchor {
            write!(f, "#{a}")?;
        }
        Ok(())
    }
}

fn normalize_rel(path: &str) -> String {
    let p = normalize_lexically(Path::new(path));
    rel_string(Path::new(""), &p).unwrap_or_else(|| path.to_string())
}

/// 1-based inclusive line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn contains(&self, line: usize) -> bool {
        self.start <= line && line <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvenanceMarker {
    pub output_file: String,
    pub line: usize,
    pub source: SourceRef,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MarkerWarning {
    pub line: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MarkerScan {
    pub markers: Vec<ProvenanceMarker>,
    pub warnings: Vec<MarkerWarning>,
}

impl MarkerScan {
    /// The marker governing `line`: nearest at or above it.
    pub fn governing(&self, line: usize) -> Option<&ProvenanceMarker> {
        self.markers.iter().rev().find(|m| m.line <= line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum MarkerLine {
    Marker(SourceRef),
    Malformed,
    Other,
}

fn classify_line(line: &str) -> MarkerLine {
    let t = line.trim_end();
    let Some(body) = t
        .strip_prefix(MARKER_OPEN)
        .and_then(|r| r.strip_suffix(MARKER_CLOSE))
    else {
        return if t.contains("icm:src") {
            MarkerLine::Malformed
        } else {
            MarkerLine::Other
        };
    };
    let (path, anchor) = match body.split_once('#') {
        Some((p, a)) => (p, Some(a)),
        None => (body, None),
    };
    let path_ok = !path.is_empty() && !path.chars().any(char::is_whitespace);
    let anchor_ok = anchor.is_none_or(|a| !a.trim().is_empty() && !a.contains("--") && a.trim() == a);
    if path_ok && anchor_ok && !path.contains("--") {
        MarkerLine::Marker(SourceRef::new(path, anchor.map(str::to_string)))
    } else {
        MarkerLine::Malformed
    }
}

/// True when the line is a well-formed marker.
pub fn is_marker_line(line: &str) -> bool {
    matches!(classify_line(line), MarkerLine::Marker(_))
}

/// Scans text for markers; `output_file` labels the results.
pub fn scan_markers(text: &str, output_file: &str) -> MarkerScan {
    let mut scan = MarkerScan::default();
    let total = text.lines().count();
    for (i, line) in text.lines().enumerate() {
        match classify_line(line) {
            MarkerLine::Marker(source) => scan.markers.push(ProvenanceMarker {
                output_file: output_file.to_string(),
                line: i + 1,
                source,
                span: Span { start: i + 1, end: total },
            }),
            MarkerLine::Malformed => scan.warnings.push(MarkerWarning {
                line: i + 1,
                text: line.to_string(),
            }),
            MarkerLine::Other => {}
        }
    }
    for k in 1..scan.markers.len() {
        let next = scan.markers[k].line;
        scan.markers[k - 1].span.end = next - 1;
    }
    scan
}

/// Reads a file and scans it.
pub fn parse_markers(path: &Path) -> Result<MarkerScan, WorkspaceError> {
    let text = fs::read(path).map_err(io_err(path))?;
    Ok(scan_markers(
        &String::from_utf8_lossy(&text),
        &path.to_string_lossy(),
    ))
}

/// Instruction text appended to the contract segment when tracing is on.
/// Lists each distinct input once; empty when there are no inputs.
pub fn marker_instruction(inputs: &[ResolvedInput]) -> String {
    let mut seen = HashSet::new();
    let refs: Vec<SourceRef> = inputs
        .iter()
        .map(|r| SourceRef::new(r.rel.clone(), r.anchor.clone()))
        .filter(|s| seen.insert(s.clone()))
        .collect();
    if refs.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    out.push_str(INSTRUCTION_HEADER);
    out.push('\n');
    out.push_str(
        "Provenance: begin each section of every output file with a line of the form\n\
         `<!-- icm:src=PATH -->` (or `<!-- icm:src=PATH#ANCHOR -->`) naming the input\n\
         that most informed that section. Put nothing else on the marker line.\n\
         Inputs you may name:\n",
    );
    for r in refs {
        out.push_str("- ");
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("no marker governs line {0}")]
    NoMarkerGoverns(usize),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Hop {
    pub file: String,
    pub span: Span,
    pub source: SourceRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceResult {
    pub chain: Vec<Hop>,
    pub terminal: SourceRef,
    /// The terminal source (or its anchor) no longer exists.
    pub dangling: bool,
}

/// Follows markers backward from `file:line` across stage outputs.
///
/// A source that is itself a marked stage output is followed: at its anchor's
/// heading when the marker carries one, otherwise at its first marker. Hops
/// are capped at the stage count.
pub fn trace(ws: &Workspace, file: &Path, line: usize) -> Result<TraceResult, TraceError> {
    let mut current = ws.absolute(file);
    ws.rel(&current)?;
    let mut line = line;
    let mut chain: Vec<Hop> = Vec::new();
    let mut visited = HashSet::new();
    let cap = ws.stages.len().max(1);

    loop {
        let scan = parse_markers(&current)?;
        let Some(marker) = scan.governing(line) else {
            // the followed file changed under us; stop at the previous hop
            return match chain.last() {
                Some(hop) => Ok(TraceResult {
                    terminal: hop.source.clone(),
                    chain,
                    dangling: false,
                }),
                None => Err(TraceError::NoMarkerGoverns(line)),
            };
        };
        let source = marker.source.clone();
        chain.push(Hop {
            file: ws.rel(&current)?,
            span: marker.span,
            source: source.clone(),
        });
        visited.insert((current.clone(), marker.line));

        let src_abs = ws.absolute(Path::new(&source.path));
        if !src_abs.starts_with(&ws.root) || !src_abs.is_file() {
            return Ok(TraceResult {
                chain,
                terminal: source,
                dangling: true,
            });
        }
        let text = fs::read(&src_abs).map_err(io_err(&src_abs))?;
        let text = String::from_utf8_lossy(&text);
        let anchor_line = match &source.anchor {
            Some(a) => match find_anchor(&text, a) {
                Some(h) => Some(h.line + 1),
                None => {
                    return Ok(TraceResult {
                        chain,
                        terminal: source,
                        dangling: true,
                    })
                }
            },
            None => None,
        };
        let done = TraceResult {
            chain: chain.clone(),
            terminal: source.clone(),
            dangling: false,
        };
        if ws.output_owner(&src_abs).is_none() || chain.len() >= cap {
            return Ok(done);
        }
        let inner = scan_markers(&text, &source.path);
        let next = match anchor_line {
            Some(l) => inner.governing(l),
            None => inner.markers.first(),
        };
        match next {
            Some(m) if !visited.contains(&(src_abs.clone(), m.line)) => {
                line = m.line;
                current = src_abs;
            }
            _ => return Ok(done),
        }
    }
}

/// Every governed span, across all stage `output/` files, whose marker names
/// `source`. Sorted by (file, line).
pub fn reverse_index(ws: &Workspace, source: &SourceRef) -> Result<Vec<(String, Span)>, WorkspaceError> {
    let mut out = Vec::new();
    for file in output_files(ws)? {
        let rel = ws.rel(&file)?;
        let scan = parse_markers(&file)?;
        for m in scan.markers {
            if m.source.matches(source) {
                out.push((rel.clone(), m.span));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// All files under every stage's `output/`, sorted.
pub fn output_files(ws: &Workspace) -> Result<Vec<PathBuf>, WorkspaceError> {
    let mut files = Vec::new();
    for stage in &ws.stages {
        if stage.output_dir.is_dir() {
            files.extend(walk_files(&ws.root, &stage.output_dir)?);
        }
    }
    files.sort();
    Ok(files)
}

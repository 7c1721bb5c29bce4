//! Stage contract parsing, canonical rendering and input resolution.
//!
//! A contract is the stage's `CONTEXT.md`. Only four level-2 headings are
//! significant (`## Inputs`, `## Process`, `## Outputs`, `## Verify`); all
//! other text is kept in `raw_text` and otherwise ignored. The grammar is
//! documented in `GRAMMAR.md` at the repository root.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markdown::atx_heading;
use crate::paths::normalize_lexically;
use crate::workspace::{
    classify, io_err, walk_files, Layer, LayerClass, StageRef, Workspace, WorkspaceError,
    OUTPUT_DIR,
};

/// Line separating process sub-steps.
pub const BREAK_MARKER: &str = "<!-- icm:break -->";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContractError {
    #[error("missing section `## {0}`")]
    MissingSection(&'static str),
    #[error("line {line}: section `## {name}` appears more than once")]
    DuplicateSection { name: &'static str, line: usize },
    #[error("line {line}: malformed input line ({reason})")]
    MalformedInputLine { line: usize, reason: &'static str },
    #[error("line {line}: layer number and keyword disagree")]
    LayerKeywordMismatch { line: usize },
    #[error("line {line}: malformed output line, expected `- <filename> -> output/`")]
    MalformedOutputLine { line: usize },
    #[error("line {line}: malformed verify line ({reason})")]
    MalformedVerifyLine { line: usize, reason: &'static str },
    #[error("line {line}: breakpoint must sit between two non-empty process segments")]
    MisplacedBreakpoint { line: usize },
}

impl ContractError {
    /// 1-based source line, when the error points at one.
    pub fn line(&self) -> Option<usize> {
        match *self {
            ContractError::MissingSection(_) => None,
            ContractError::DuplicateSection { line, .. }
            | ContractError::MalformedInputLine { line, .. }
            | ContractError::LayerKeywordMismatch { line }
            | ContractError::MalformedOutputLine { line }
            | ContractError::MalformedVerifyLine { line, .. }
            | ContractError::MisplacedBreakpoint { line } => Some(line),
        }
    }
}

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("input not found: {0}")]
    InputNotFound(String),
    #[error("{path} is declared layer {declared} but classifies as {actual}")]
    LayerMismatch {
        path: String,
        declared: u8,
        actual: Layer,
    },
    #[error("input escapes the workspace: {0}")]
    EscapesWorkspace(String),
    #[error("section anchor on a directory input: {0}")]
    AnchorOnDirectory(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// Layer an input is declared at. The keyword and number always agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputLayer {
    Reference,
    Working,
}

impl InputLayer {
    pub fn number(self) -> u8 {
        match self {
            InputLayer::Reference => 3,
            InputLayer::Working => 4,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            InputLayer::Reference => "reference",
            InputLayer::Working => "working",
        }
    }

    pub fn layer(self) -> Layer {
        match self {
            InputLayer::Reference => Layer::Reference,
            InputLayer::Working => Layer::Working,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub layer: InputLayer,
    /// Relative to the stage folder.
    pub rel_path: String,
    pub section_scope: Option<String>,
}

impl fmt::Display for InputRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "- Layer {} ({}): {}",
            self.layer.number(),
            self.layer.keyword(),
            self.rel_path
        )?;
        if let Some(anchor) = &self.section_scope {
            write!(f, "#{anchor}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRef {
    pub filename: String,
    /// `output/` or a subdirectory of it, always with a trailing slash.
    pub dest: String,
}

impl OutputRef {
    /// Path relative to the stage's `output/` directory.
    pub fn rel_to_output(&self) -> PathBuf {
        let sub = self.dest.strip_prefix("output/").unwrap_or_default();
        Path::new(sub).join(&self.filename)
    }

    /// Path relative to the stage folder, `/`-separated.
    pub fn stage_rel(&self) -> String {
        format!("{}{}", self.dest, self.filename)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessSegment {
    pub index: usize,
    pub text: String,
    pub followed_by_breakpoint: bool,
}

/// Declarative post-run check. Paths are relative to the stage folder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerifyCheck {
    Exists { path: String },
    MaxWords { path: String, limit: u64 },
    MarkersResolve { path: String },
    HeadingsCover { path: String, source: String },
}

impl fmt::Display for VerifyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyCheck::Exists { path } => write!(f, "exists: {path}"),
            VerifyCheck::MaxWords { path, limit } => write!(f, "max-words: {path} {limit}"),
            VerifyCheck::MarkersResolve { path } => write!(f, "markers-resolve: {path}"),
            VerifyCheck::HeadingsCover { path, source } => {
                write!(f, "headings-cover: {path} from {source}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageContract {
    pub stage: StageRef,
    pub inputs: Vec<InputRef>,
    pub process: Vec<ProcessSegment>,
    pub outputs: Vec<OutputRef>,
    pub verify: Vec<VerifyCheck>,
    pub raw_text: String,
}

impl StageContract {
    /// Field-by-field equality ignoring `raw_text`.
    pub fn same_structure(&self, other: &StageContract) -> bool {
        self.stage == other.stage
            && self.inputs == other.inputs
            && self.process == other.process
            && self.outputs == other.outputs
            && self.verify == other.verify
    }

    pub fn breakpoint_count(&self) -> usize {
        self.process.iter().filter(|s| s.followed_by_breakpoint).count()
    }

    /// Copy whose process holds only segments `0..=last`, with no trailing
    /// breakpoint.
    pub fn truncated_process(&self, last: usize) -> StageContract {
        let mut c = self.clone();
        c.process.truncate(last + 1);
        if let Some(seg) = c.process.last_mut() {
            seg.followed_by_breakpoint = false;
        }
        c
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Inputs,
    Process,
    Outputs,
    Verify,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Inputs => "Inputs",
            Section::Process => "Process",
            Section::Outputs => "Outputs",
            Section::Verify => "Verify",
        }
    }

    fn from_heading(text: &str) -> Option<Section> {
        match text {
            "Inputs" => Some(Section::Inputs),
            "Process" => Some(Section::Process),
            "Outputs" => Some(Section::Outputs),
            "Verify" => Some(Section::Verify),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Parses a stage contract. Every error carries the 1-based line of the
/// offending text where there is one.
pub fn parse_contract(text: &str, stage: &StageRef) -> Result<StageContract, ContractError> {
    // (first body line index, lines) per section
    let mut bodies: [Option<(usize, Vec<&str>)>; 4] = [None, None, None, None];
    let mut current: Option<Section> = None;
    let mut in_fence = false;

    for (i, line) in text.lines().enumerate() {
        let fence = {
            let t = line.trim_start();
            t.starts_with("```") || t.starts_with("~~~")
        };
        if !in_fence && !fence {
            if let Some((level, heading)) = atx_heading(line) {
                if level <= 2 {
                    current = None;
                    if level == 2 {
                        if let Some(sec) = Section::from_heading(heading) {
                            if bodies[sec.slot()].is_some() {
                                return Err(ContractError::DuplicateSection {
                                    name: sec.name(),
                                    line: i + 1,
                                });
                            }
                            bodies[sec.slot()] = Some((i + 1, Vec::new()));
                            current = Some(sec);
                        }
                    }
                    continue;
                }
            }
        }
        if fence {
            in_fence = !in_fence;
        }
        if let Some(sec) = current {
            if let Some((_, lines)) = bodies[sec.slot()].as_mut() {
                lines.push(line);
            }
        }
    }

    let take = |sec: Section| -> Result<(usize, Vec<&str>), ContractError> {
        bodies[sec.slot()]
            .clone()
            .ok_or(ContractError::MissingSection(sec.name()))
    };
    let (in_start, in_lines) = take(Section::Inputs)?;
    let (proc_start, proc_lines) = take(Section::Process)?;
    let (out_start, out_lines) = take(Section::Outputs)?;

    let mut inputs = Vec::new();
    for (k, line) in in_lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        inputs.push(parse_input_line(line.trim(), in_start + k + 1)?);
    }

    let process = split_process(&proc_lines, proc_start + 1)?;

    let mut outputs = Vec::new();
    for (k, line) in out_lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        outputs.push(
            parse_output_line(line.trim())
                .ok_or(ContractError::MalformedOutputLine { line: out_start + k + 1 })?,
        );
    }

    let mut verify = Vec::new();
    if let Some((start, lines)) = &bodies[Section::Verify.slot()] {
        for (k, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            verify.push(parse_verify_line(line.trim()).map_err(|reason| {
                ContractError::MalformedVerifyLine {
                    line: start + k + 1,
                    reason,
                }
            })?);
        }
    }

    Ok(StageContract {
        stage: stage.clone(),
        inputs,
        process,
        outputs,
        verify,
        raw_text: text.to_string(),
    })
}

fn parse_input_line(line: &str, lineno: usize) -> Result<InputRef, ContractError> {
    let malformed = |reason| ContractError::MalformedInputLine {
        line: lineno,
        reason,
    };
    let rest = line
        .strip_prefix("- Layer ")
        .ok_or(malformed("expected `- Layer <3|4> (<reference|working>): <path>`"))?;
    let (number, rest) = rest.split_once(" (").ok_or(malformed("missing `(keyword)`"))?;
    let (keyword, path) = rest.split_once("): ").ok_or(malformed("missing `): <path>`"))?;
    let by_number = match number {
        "3" => InputLayer::Reference,
        "4" => InputLayer::Working,
        _ => return Err(malformed("layer must be 3 or 4")),
    };
    let by_keyword = match keyword {
        "reference" => InputLayer::Reference,
        "working" => InputLayer::Working,
        _ => return Err(malformed("keyword must be `reference` or `working`")),
    };
    if by_number != by_keyword {
        return Err(ContractError::LayerKeywordMismatch { line: lineno });
    }
    let path = path.trim();
    let (rel_path, anchor) = match path.split_once('#') {
        Some((p, a)) => (p.trim(), Some(a.trim())),
        None => (path, None),
    };
    if rel_path.is_empty() {
        return Err(malformed("empty path"));
    }
    if rel_path.starts_with('/') || rel_path.starts_with('\\') || Path::new(rel_path).is_absolute()
    {
        return Err(malformed("absolute path"));
    }
    if anchor.is_some_and(str::is_empty) {
        return Err(malformed("empty section anchor"));
    }
    Ok(InputRef {
        layer: by_number,
        rel_path: rel_path.to_string(),
        section_scope: anchor.map(str::to_string),
    })
}

fn parse_output_line(line: &str) -> Option<OutputRef> {
    let rest = line.strip_prefix("- ")?;
    let (filename, dest) = rest.split_once(" -> ")?;
    let filename = filename.trim();
    let dest = dest.trim();
    if filename.is_empty()
        || filename.contains(['/', '\\'])
        || filename.chars().any(char::is_whitespace)
        || filename == "."
        || filename == ".."
    {
        return None;
    }
    if !dest.ends_with('/') {
        return None;
    }
    let parts: Vec<&str> = dest.trim_end_matches('/').split('/').collect();
    if parts.first() != Some(&OUTPUT_DIR)
        || parts[1..]
            .iter()
            .any(|p| p.is_empty() || *p == "." || *p == ".." || p.chars().any(char::is_whitespace))
    {
        return None;
    }
    Some(OutputRef {
        filename: filename.to_string(),
        dest: dest.to_string(),
    })
}

fn parse_verify_line(line: &str) -> Result<VerifyCheck, &'static str> {
    let line = line.strip_prefix("- ").unwrap_or(line);
    let (kind, args) = line.split_once(':').ok_or("expected `<kind>: <args>`")?;
    let args: Vec<&str> = args.split_whitespace().collect();
    let kind = kind.trim().replace('_', "-");
    let one = |args: &[&str]| match args {
        [p] => Ok(p.to_string()),
        _ => Err("expected exactly one path"),
    };
    match kind.as_str() {
        "exists" => Ok(VerifyCheck::Exists { path: one(&args)? }),
        "markers-resolve" => Ok(VerifyCheck::MarkersResolve { path: one(&args)? }),
        "max-words" => match args.as_slice() {
            [p, n] => Ok(VerifyCheck::MaxWords {
                path: p.to_string(),
                limit: n.parse().map_err(|_| "word limit must be a non-negative integer")?,
            }),
            _ => Err("expected `<path> <limit>`"),
        },
        "headings-cover" => match args.as_slice() {
            [p, "from", s] | [p, s] => Ok(VerifyCheck::HeadingsCover {
                path: p.to_string(),
                source: s.to_string(),
            }),
            _ => Err("expected `<path> from <source>`"),
        },
        _ => Err("unknown check kind"),
    }
}

/// `first_line` is the 1-based number of the first body line.
fn split_process(lines: &[&str], first_line: usize) -> Result<Vec<ProcessSegment>, ContractError> {
    let mut chunks: Vec<Vec<&str>> = vec![Vec::new()];
    let mut break_lines = Vec::new();
    let mut in_fence = false;
    for (k, line) in lines.iter().enumerate() {
        let t = line.trim_start();
        if t.starts_with("```") || t.starts_with("~~~") {
            in_fence = !in_fence;
        }
        if !in_fence && line.trim() == BREAK_MARKER {
            break_lines.push(first_line + k);
            chunks.push(Vec::new());
        } else {
            chunks.last_mut().expect("nonempty").push(line);
        }
    }
    let texts: Vec<String> = chunks.iter().map(|c| trim_blank_lines(c)).collect();
    if break_lines.is_empty() && texts[0].is_empty() {
        return Ok(Vec::new());
    }
    for (k, text) in texts.iter().enumerate() {
        if text.is_empty() {
            // empty chunk k sits after break k-1 / before break k
            let line = break_lines.get(k).or(break_lines.get(k.wrapping_sub(1)));
            return Err(ContractError::MisplacedBreakpoint {
                line: *line.expect("at least one break"),
            });
        }
    }
    let n = texts.len();
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(index, text)| ProcessSegment {
            index,
            text,
            followed_by_breakpoint: index + 1 < n,
        })
        .collect())
}

fn trim_blank_lines(lines: &[&str]) -> String {
    let start = lines.iter().position(|l| !l.trim().is_empty());
    let end = lines.iter().rposition(|l| !l.trim().is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e].join("\n"),
        _ => String::new(),
    }
}

/// Canonical markdown for a contract. Re-parsing it yields the same
/// structure; an empty Verify section is left out.
pub fn normalize(contract: &StageContract) -> String {
    let mut out = String::from("## Inputs\n");
    for input in &contract.inputs {
        out.push_str(&input.to_string());
        out.push('\n');
    }
    out.push_str("\n## Process\n");
    for seg in &contract.process {
        out.push_str(&seg.text);
        out.push('\n');
        if seg.followed_by_breakpoint {
            out.push('\n');
            out.push_str(BREAK_MARKER);
            out.push_str("\n\n");
        }
    }
    out.push_str("\n## Outputs\n");
    for output in &contract.outputs {
        out.push_str(&format!("- {} -> {}\n", output.filename, output.dest));
    }
    if !contract.verify.is_empty() {
        out.push_str("\n## Verify\n");
        for check in &contract.verify {
            out.push_str(&format!("- {check}\n"));
        }
    }
    out
}

/// Reads and parses a stage's `CONTEXT.md`.
pub fn load_contract(stage: &StageRef) -> Result<StageContract, LoadContractError> {
    let text = fs::read_to_string(&stage.contract_file).map_err(io_err(&stage.contract_file))?;
    parse_contract(&text, stage).map_err(|source| LoadContractError::Parse {
        path: stage.contract_file.clone(),
        source,
    })
}

#[derive(Debug, Error)]
pub enum LoadContractError {
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: ContractError,
    },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// One concrete file an input expands to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedInput {
    /// Index into `StageContract::inputs`.
    pub input_index: usize,
    pub layer: InputLayer,
    pub path: PathBuf,
    /// Workspace-relative, `/`-separated.
    pub rel: String,
    pub anchor: Option<String>,
    pub class: LayerClass,
}

/// Lexical target of an input (no filesystem access).
pub fn input_target(stage: &StageRef, input: &InputRef) -> PathBuf {
    normalize_lexically(&stage.dir.join(&input.rel_path))
}

/// Files a directory input expands to: every non-hidden file beneath it,
/// sorted.
pub fn expand_dir(ws: &Workspace, dir: &Path) -> Result<Vec<PathBuf>, WorkspaceError> {
    walk_files(&ws.root, dir)
}

/// Expands every declared input to concrete files and checks each file's
/// classification against the declared layer.
pub fn resolve_inputs(
    contract: &StageContract,
    ws: &Workspace,
) -> Result<Vec<ResolvedInput>, ResolveError> {
    let mut out = Vec::new();
    for (idx, input) in contract.inputs.iter().enumerate() {
        let target = input_target(&contract.stage, input);
        if !target.starts_with(&ws.root) {
            return Err(ResolveError::EscapesWorkspace(input.rel_path.clone()));
        }
        let rel_target = ws.rel(&target)?;
        let files = if target.is_dir() {
            if input.section_scope.is_some() {
                return Err(ResolveError::AnchorOnDirectory(rel_target));
            }
            expand_dir(ws, &target)?
        } else if target.is_file() {
            vec![target.clone()]
        } else {
            return Err(ResolveError::InputNotFound(rel_target));
        };
        for path in files {
            let class = classify(&path, ws)?;
            let rel = ws.rel(&path)?;
            if class.layer != input.layer.layer() {
                return Err(ResolveError::LayerMismatch {
                    path: rel,
                    declared: input.layer.number(),
                    actual: class.layer,
                });
            }
            out.push(ResolvedInput {
                input_index: idx,
                layer: input.layer,
                path,
                rel,
                anchor: input.section_scope.clone(),
                class,
            });
        }
    }
    Ok(out)
}

//! Context bundles: the ordered, layer-tagged text a stage's agent receives.
//!
//! A bundle holds exactly the identity file, the routing file, the stage's
//! own contract, then the stage's declared reference inputs and working
//! inputs, in declaration order. Nothing else enters it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::contract::{
    load_contract, normalize, resolve_inputs, InputLayer, LoadContractError, ResolveError,
    ResolvedInput, StageContract,
};
use crate::markdown::heading_slice;
use crate::provenance::marker_instruction;
use crate::workspace::{io_err, Layer, StageRef, Workspace, WorkspaceError};

pub const DEFAULT_SOFT_BUDGET: u64 = 8_000;
pub const DEFAULT_HARD_BUDGET: u64 = 40_000;

const DELIM_OPEN: &str = "===ICM SEGMENT layer=";
const DELIM_CLOSE: &str = "===";

/// Approximate token count: `ceil(bytes / 4)`. A model-agnostic heuristic,
/// not a tokenizer.
pub fn estimate_tokens(content: &str) -> u64 {
    (content.len() as u64).div_ceil(4)
}

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error(transparent)]
    Contract(#[from] LoadContractError),
    #[error(transparent)]
    Resolve(#[from] ResolveError),
    #[error("anchor `#{anchor}` not found in {path}")]
    AnchorNotFound { path: String, anchor: String },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub layer: Layer,
    /// Workspace-relative, `/`-separated.
    pub source: String,
    pub anchor: Option<String>,
    pub content: String,
    pub token_estimate: u64,
}

impl Segment {
    pub fn new(layer: Layer, source: String, anchor: Option<String>, content: String) -> Self {
        let token_estimate = estimate_tokens(&content);
        Segment {
            layer,
            source,
            anchor,
            content,
            token_estimate,
        }
    }
}

/// Per-layer token sums over the five context layers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerTotals {
    pub per_layer: BTreeMap<Layer, u64>,
    pub total: u64,
}

impl LayerTotals {
    pub fn from_estimates(items: impl IntoIterator<Item = (Layer, u64)>) -> LayerTotals {
        let mut per_layer: BTreeMap<Layer, u64> =
            Layer::CONTEXT_LAYERS.iter().map(|&l| (l, 0)).collect();
        let mut total = 0;
        for (layer, tokens) in items {
            *per_layer.entry(layer).or_default() += tokens;
            total += tokens;
        }
        LayerTotals { per_layer, total }
    }

    pub fn get(&self, layer: Layer) -> u64 {
        self.per_layer.get(&layer).copied().unwrap_or(0)
    }

    /// Layers 0 through 2.
    pub fn structural(&self) -> u64 {
        self.get(Layer::Identity) + self.get(Layer::Routing) + self.get(Layer::Contract)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextBundle {
    pub stage: StageRef,
    pub segments: Vec<Segment>,
    pub totals: LayerTotals,
}

impl ContextBundle {
    pub fn new(stage: StageRef, segments: Vec<Segment>) -> Self {
        let totals = LayerTotals::from_estimates(segments.iter().map(|s| (s.layer, s.token_estimate)));
        ContextBundle {
            stage,
            segments,
            totals,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssembleOptions {
    /// Append the provenance-marker instruction to the contract segment.
    pub tracing: bool,
    /// Deliver only process segments `0..=i` (breakpoint sub-step `i`).
    pub process_upto: Option<usize>,
    /// Extra working segments appended after the declared inputs.
    pub extra_working: Vec<Segment>,
}

/// Bundle for `stage` with default options.
pub fn assemble(ws: &Workspace, stage: &StageRef) -> Result<ContextBundle, AssembleError> {
    let contract = load_contract(stage)?;
    Ok(assemble_contract(ws, &contract, &AssembleOptions::default())?.0)
}

/// Bundle for an already-parsed contract, plus the resolved inputs it used.
pub fn assemble_contract(
    ws: &Workspace,
    contract: &StageContract,
    opts: &AssembleOptions,
) -> Result<(ContextBundle, Vec<ResolvedInput>), AssembleError> {
    let resolved = resolve_inputs(contract, ws)?;
    let mut segments = vec![
        file_segment(ws, Layer::Identity, &ws.identity_file)?,
        file_segment(ws, Layer::Routing, &ws.routing_file)?,
    ];

    let mut l2 = match opts.process_upto {
        Some(i) => normalize(&contract.truncated_process(i)),
        None => contract.raw_text.clone(),
    };
    if opts.tracing {
        let instruction = marker_instruction(&resolved);
        if !instruction.is_empty() {
            if !l2.is_empty() && !l2.ends_with('\n') {
                l2.push('\n');
            }
            l2.push('\n');
            l2.push_str(&instruction);
        }
    }
    segments.push(Segment::new(
        Layer::Contract,
        ws.rel(&contract.stage.contract_file)?,
        None,
        l2,
    ));

    let mut seen = HashSet::new();
    for wanted in [InputLayer::Reference, InputLayer::Working] {
        for input in resolved.iter().filter(|r| r.layer == wanted) {
            if !seen.insert((input.rel.clone(), input.anchor.clone())) {
                continue;
            }
            let text = read_lossy(&input.path)?;
            let content = match &input.anchor {
                Some(anchor) => heading_slice(&text, anchor)
                    .ok_or_else(|| AssembleError::AnchorNotFound {
                        path: input.rel.clone(),
                        anchor: anchor.clone(),
                    })?
                    .to_string(),
                None => text,
            };
            segments.push(Segment::new(
                wanted.layer(),
                input.rel.clone(),
                input.anchor.clone(),
                content,
            ));
        }
    }
    segments.extend(opts.extra_working.iter().cloned());
    Ok((ContextBundle::new(contract.stage.clone(), segments), resolved))
}

fn file_segment(ws: &Workspace, layer: Layer, path: &Path) -> Result<Segment, AssembleError> {
    Ok(Segment::new(layer, ws.rel(path)?, None, read_lossy(path)?))
}

pub(crate) fn read_lossy(path: &Path) -> Result<String, WorkspaceError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub soft: u64,
    pub hard: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            soft: DEFAULT_SOFT_BUDGET,
            hard: DEFAULT_HARD_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    SoftWarning,
    HardWarning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BudgetFlag {
    pub kind: FlagKind,
    pub threshold: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompositionReport {
    pub stage: String,
    #[serde(serialize_with = "serialize_layers")]
    pub per_layer: BTreeMap<Layer, u64>,
    pub total: u64,
    pub flags: Vec<BudgetFlag>,
}

fn serialize_layers<S: Serializer>(map: &BTreeMap<Layer, u64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(map.iter().map(|(k, v)| (k.label(), v)))
}

impl CompositionReport {
    pub fn from_totals(stage: String, totals: &LayerTotals, budget: Budget) -> Self {
        let mut flags = Vec::new();
        if totals.total > budget.soft {
            flags.push(BudgetFlag {
                kind: FlagKind::SoftWarning,
                threshold: budget.soft,
            });
        }
        if totals.total > budget.hard {
            flags.push(BudgetFlag {
                kind: FlagKind::HardWarning,
                threshold: budget.hard,
            });
        }
        CompositionReport {
            stage,
            per_layer: totals.per_layer.clone(),
            total: totals.total,
            flags,
        }
    }

    pub fn layer(&self, layer: Layer) -> u64 {
        self.per_layer.get(&layer).copied().unwrap_or(0)
    }

    pub fn structural(&self) -> u64 {
        self.layer(Layer::Identity) + self.layer(Layer::Routing) + self.layer(Layer::Contract)
    }

    pub fn has(&self, kind: FlagKind) -> bool {
        self.flags.iter().any(|f| f.kind == kind)
    }
}

pub fn composition_report(bundle: &ContextBundle, budget: Budget) -> CompositionReport {
    CompositionReport::from_totals(bundle.stage.folder(), &bundle.totals, budget)
}

/// `1234567` -> `1,234,567`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for CompositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 5] = [
            "L0 identity",
            "L1 routing",
            "L2 contract",
            "L3 reference",
            "L4 working",
        ];
        writeln!(f, "stage {}", self.stage)?;
        writeln!(f, "{:<20}{:>10}", "layer", "tokens")?;
        for (name, layer) in NAMES.iter().zip(Layer::CONTEXT_LAYERS) {
            writeln!(f, "{:<20}{:>10}", name, thousands(self.layer(layer)))?;
        }
        writeln!(f, "{:<20}{:>10}", "structural (L0-L2)", thousands(self.structural()))?;
        writeln!(f, "{:<20}{:>10}", "total", thousands(self.total))?;
        for flag in &self.flags {
            let name = match flag.kind {
                FlagKind::SoftWarning => "soft",
                FlagKind::HardWarning => "hard",
            };
            writeln!(
                f,
                "warning: total {} exceeds the {name} budget of {}",
                thousands(self.total),
                thousands(flag.threshold)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MonolithicComparison {
    pub scoped: CompositionReport,
    pub monolithic: CompositionReport,
}

/// Scoped bundle report next to the report for loading every structural,
/// reference and working file in the workspace at once.
pub fn compare_monolithic(
    ws: &Workspace,
    stage: &StageRef,
    budget: Budget,
) -> Result<MonolithicComparison, AssembleError> {
    let scoped = composition_report(&assemble(ws, stage)?, budget);
    let mut items = Vec::new();
    for file in ws.files()? {
        let class = ws.classify(&file)?;
        if class.layer.number().is_some() {
            items.push((class.layer, estimate_tokens(&read_lossy(&file)?)));
        }
    }
    let totals = LayerTotals::from_estimates(items);
    Ok(MonolithicComparison {
        scoped,
        monolithic: CompositionReport::from_totals("(monolithic)".to_string(), &totals, budget),
    })
}

/// Wire form handed to agents: each segment is preceded by
/// `===ICM SEGMENT layer=<n> source=<path>[#anchor]===` and followed by one
/// newline.
pub fn serialize_bundle(bundle: &ContextBundle) -> String {
    let mut out = String::new();
    for seg in &bundle.segments {
        out.push_str(&delimiter(seg));
        out.push('\n');
        out.push_str(&seg.content);
        out.push('\n');
    }
    out
}

fn delimiter(seg: &Segment) -> String {
    let n = seg.layer.number().unwrap_or(4);
    match &seg.anchor {
        Some(a) => format!("{DELIM_OPEN}{n} source={}#{a}{DELIM_CLOSE}", seg.source),
        None => format!("{DELIM_OPEN}{n} source={}{DELIM_CLOSE}", seg.source),
    }
}

/// A segment recovered from the wire form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireSegment {
    pub layer: u8,
    pub source: String,
    pub anchor: Option<String>,
    pub content: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BundleParseError {
    #[error("bundle does not start with a segment delimiter")]
    MissingDelimiter,
    #[error("malformed delimiter: {0}")]
    BadDelimiter(String),
}

fn parse_delimiter(line: &str) -> Option<Result<(u8, String, Option<String>), BundleParseError>> {
    let body = line.strip_prefix(DELIM_OPEN)?;
    let bad = || BundleParseError::BadDelimiter(line.to_string());
    let Some(body) = body.strip_suffix(DELIM_CLOSE) else {
        return Some(Err(bad()));
    };
    let parsed = body.split_once(" source=").and_then(|(n, src)| {
        let layer: u8 = n.parse().ok().filter(|n| *n <= 4)?;
        let (source, anchor) = match src.split_once('#') {
            Some((p, a)) => (p.to_string(), Some(a.to_string())),
            None => (src.to_string(), None),
        };
        Some((layer, source, anchor))
    });
    Some(parsed.ok_or_else(bad))
}

/// Splits the wire form back into segments. Content lines that themselves
/// start with the delimiter prefix are not supported.
pub fn parse_bundle(text: &str) -> Result<Vec<WireSegment>, BundleParseError> {
    let mut out: Vec<WireSegment> = Vec::new();
    // (header, content start offset)
    let mut open: Option<((u8, String, Option<String>), usize)> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let bare = line.strip_suffix('\n').unwrap_or(line);
        if let Some(header) = parse_delimiter(bare) {
            let header = header?;
            if let Some((h, start)) = open.take() {
                out.push(close_segment(h, &text[start..offset]));
            }
            open = Some((header, offset + line.len()));
        } else if open.is_none() {
            return Err(BundleParseError::MissingDelimiter);
        }
        offset += line.len();
    }
    if let Some((h, start)) = open {
        out.push(close_segment(h, &text[start.min(text.len())..]));
    }
    Ok(out)
}

fn close_segment((layer, source, anchor): (u8, String, Option<String>), body: &str) -> WireSegment {
    WireSegment {
        layer,
        source,
        anchor,
        content: body.strip_suffix('\n').unwrap_or(body).to_string(),
    }
}

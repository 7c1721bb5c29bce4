//! Stage execution. An attempt assembles the bundle, lets the agent write into
//! a staging directory, checks the staged files against the declared outputs,
//! moves them into `output/`, runs the verify checks, consults the gate and
//! records a manifest. Until the move, `output/` is untouched; a verify
//! failure under a non-interactive policy moves the previous files back.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeDelta, Utc};
use serde::Serialize;
use thiserror::Error;
use walkdir::WalkDir;

use crate::agent::{Agent, AgentError, AgentRequest};
use crate::context::{assemble_contract, read_lossy, serialize_bundle, AssembleError, AssembleOptions, Segment};
use crate::contract::{load_contract, LoadContractError, StageContract};
use crate::digest::Digest;
use crate::edits::{append_events, detect_edit, EditEvent, LedgerError};
use crate::graph::{build_graph, compute_stale, stage_input_digests, GraphError};
use crate::lock::{LockError, WorkspaceLock};
use crate::manifest::{
    agent_snapshot_dir, latest_per_stage, write_manifest, BreakpointTranscript, GateDecision,
    ManifestError, RunManifest,
};
use crate::validate::{validate, Violation};
use crate::verify::{all_pass, run_checks, VerifyResult};
use crate::workspace::{io_err, Layer, StageRef, Workspace, WorkspaceError};

pub const STAGING_DIR: &str = "staging";
pub const BREAKPOINTS_DIR: &str = "breakpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePolicy {
    #[default]
    Interactive,
    AutoContinue,
    FailOnEdit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatePoint {
    StageEnd,
    /// After process segment `segment`, before the next sub-step.
    Breakpoint { segment: usize },
}

pub struct GatePrompt<'a> {
    pub stage: &'a StageRef,
    pub point: GatePoint,
    /// Workspace-relative files up for review.
    pub outputs: &'a [String],
    pub verify: &'a [VerifyResult],
}

impl fmt::Display for GatePrompt<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.point {
            GatePoint::StageEnd => writeln!(f, "stage {}: outputs ready for review", self.stage)?,
            GatePoint::Breakpoint { segment } => writeln!(
                f,
                "stage {}: breakpoint after process segment {}",
                self.stage,
                segment + 1
            )?,
        }
        for o in self.outputs {
            writeln!(f, "  {o}")?;
        }
        if !self.verify.is_empty() {
            let failed = self.verify.iter().filter(|r| !r.passed()).count();
            if failed == 0 {
                writeln!(f, "verify: all {} checks passed", self.verify.len())?;
            } else {
                writeln!(f, "verify: {failed} of {} checks failed", self.verify.len())?;
            }
            for r in self.verify.iter().filter(|r| !r.passed()) {
                writeln!(f, "  FAIL {}: {}", r.check, r.detail)?;
            }
        }
        Ok(())
    }
}

/// Decides at review gates and breakpoints. `Rerun` at a breakpoint repeats
/// the sub-step.
pub trait Gate {
    fn decide(&mut self, ws: &Workspace, prompt: &GatePrompt<'_>) -> GateDecision;
}

/// Always continues.
#[derive(Debug, Default, Clone, Copy)]
pub struct AutoGate;

impl Gate for AutoGate {
    fn decide(&mut self, _ws: &Workspace, _prompt: &GatePrompt<'_>) -> GateDecision {
        GateDecision::Continue
    }
}

/// Prompts `[c]ontinue / [r]erun / [a]bort` on a line-oriented terminal.
/// End of input aborts.
pub struct TerminalGate<R, W> {
    input: R,
    output: W,
}

impl TerminalGate<io::StdinLock<'static>, io::Stderr> {
    pub fn stdio() -> Self {
        TerminalGate::new(io::stdin().lock(), io::stderr())
    }
}

impl<R: BufRead, W: Write> TerminalGate<R, W> {
    pub fn new(input: R, output: W) -> Self {
        TerminalGate { input, output }
    }
}

impl<R: BufRead, W: Write> Gate for TerminalGate<R, W> {
    fn decide(&mut self, _ws: &Workspace, prompt: &GatePrompt<'_>) -> GateDecision {
        let _ = write!(self.output, "{prompt}");
        loop {
            let _ = write!(self.output, "[c]ontinue / [r]erun / [a]bort? ");
            let _ = self.output.flush();
            let mut line = String::new();
            match self.input.read_line(&mut line) {
                Ok(0) | Err(_) => return GateDecision::Abort,
                Ok(_) => {}
            }
            match line.trim().to_ascii_lowercase().as_str() {
                "c" | "continue" => return GateDecision::Continue,
                "r" | "rerun" => return GateDecision::Rerun,
                "a" | "abort" => return GateDecision::Abort,
                _ => {}
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub policy: GatePolicy,
    /// Ask the agent for provenance markers.
    pub tracing: bool,
    /// Run every stage in range, stale or not.
    pub force: bool,
    pub from: Option<u32>,
    pub to: Option<u32>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("workspace is invalid:\n{}", render_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("AgentFailure: stage {stage}: {source}")]
    AgentFailure {
        stage: String,
        #[source]
        source: AgentError,
    },
    #[error("OutputOutsideDeclared: stage {stage} wrote undeclared files: {}", files.join(", "))]
    OutputOutsideDeclared { stage: String, files: Vec<String> },
    #[error("VerifyFailed: stage {stage}:\n{}", render_failures(failures))]
    VerifyFailed {
        stage: String,
        failures: Vec<VerifyResult>,
    },
    #[error("EditDetected: stage {stage} outputs changed before the gate: {}", files.join(", "))]
    EditDetected { stage: String, files: Vec<String> },
    #[error(transparent)]
    Contract(#[from] LoadContractError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

fn render_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n")
}

fn render_failures(v: &[VerifyResult]) -> String {
    v.iter()
        .map(|r| format!("  FAIL {}: {}", r.check, r.detail))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Serialize)]
pub struct StageOutcome {
    pub stage: StageRef,
    pub decision: GateDecision,
    /// Absent when the stage was abandoned at a breakpoint.
    pub manifest: Option<RunManifest>,
    pub verify: Vec<VerifyResult>,
    pub edits: Vec<EditEvent>,
    pub aborted_at_breakpoint: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PipelineStatus {
    NothingToDo,
    Completed,
    Aborted { stage: u32 },
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub run_id: String,
    pub status: PipelineStatus,
    pub outcomes: Vec<StageOutcome>,
}

/// `YYYYMMDDTHHMMSSmmmZ-xxxxxx`.
pub fn new_run_id(now: DateTime<Utc>) -> String {
    format!(
        "{}-{:06x}",
        now.format("%Y%m%dT%H%M%S%3fZ"),
        rand::random::<u32>() & 0xff_ffff
    )
}

struct RunCtx {
    run_id: String,
    last: Option<DateTime<Utc>>,
}

impl RunCtx {
    fn new() -> Self {
        RunCtx {
            run_id: new_run_id(Utc::now()),
            last: None,
        }
    }

    /// Wall clock, bumped so successive readings strictly increase.
    fn tick(&mut self) -> DateTime<Utc> {
        let mut now = Utc::now();
        if let Some(last) = self.last {
            if now <= last {
                now = last + TimeDelta::nanoseconds(1);
            }
        }
        self.last = Some(now);
        now
    }

    fn cleanup(&self, ws: &Workspace) {
        let staging = ws.state_dir.join(STAGING_DIR);
        let _ = fs::remove_dir_all(staging.join(&self.run_id));
        let _ = fs::remove_dir(staging);
    }
}

/// Runs one stage regardless of staleness.
pub fn run_stage(
    ws: &Workspace,
    stage: &StageRef,
    agent: &dyn Agent,
    gate: &mut dyn Gate,
    opts: &RunOptions,
) -> Result<StageOutcome, RunError> {
    let _lock = WorkspaceLock::acquire(ws)?;
    let contract = load_contract(stage)?;
    let mut ctx = RunCtx::new();
    let out = execute_stage(&mut ctx, ws, &contract, agent, gate, opts);
    ctx.cleanup(ws);
    out
}

/// Runs the stale stages in `[from, to]` in ordinal order. Staleness is
/// re-evaluated before each stage, so a stage whose inputs came out
/// byte-identical is skipped.
pub fn run_pipeline(
    ws: &Workspace,
    agent: &dyn Agent,
    gate: &mut dyn Gate,
    opts: &RunOptions,
) -> Result<PipelineReport, RunError> {
    let _lock = WorkspaceLock::acquire(ws)?;
    let report = validate(ws);
    if !report.is_valid() {
        return Err(RunError::Invalid(report.errors().cloned().collect()));
    }
    let contracts = ws
        .stages
        .iter()
        .map(load_contract)
        .collect::<Result<Vec<_>, _>>()?;
    let graph = build_graph(ws, &contracts)?;
    let in_range = |o: u32| opts.from.is_none_or(|f| o >= f) && opts.to.is_none_or(|t| o <= t);

    let mut ctx = RunCtx::new();
    let mut outcomes = Vec::new();
    let mut status = PipelineStatus::Completed;
    let result = (|| {
        'stages: for &ordinal in graph.topo.iter().filter(|o| in_range(**o)) {
            if !opts.force {
                let stale = compute_stale(&graph, &latest_per_stage(ws)?, ws)?;
                if !stale.contains(ordinal) {
                    continue;
                }
            }
            let contract = graph.contract(ordinal).expect("topo built from contracts");
            loop {
                let outcome = execute_stage(&mut ctx, ws, contract, agent, gate, opts)?;
                let decision = outcome.decision;
                outcomes.push(outcome);
                match decision {
                    GateDecision::Rerun => continue,
                    GateDecision::Abort => {
                        status = PipelineStatus::Aborted { stage: ordinal };
                        break 'stages;
                    }
                    GateDecision::Continue | GateDecision::Auto => break,
                }
            }
        }
        Ok::<(), RunError>(())
    })();
    ctx.cleanup(ws);
    result?;
    if outcomes.is_empty() {
        status = PipelineStatus::NothingToDo;
    }
    Ok(PipelineReport {
        run_id: ctx.run_id,
        status,
        outcomes,
    })
}

fn execute_stage(
    ctx: &mut RunCtx,
    ws: &Workspace,
    contract: &StageContract,
    agent: &dyn Agent,
    gate: &mut dyn Gate,
    opts: &RunOptions,
) -> Result<StageOutcome, RunError> {
    let stage = &contract.stage;
    let folder = stage.folder();
    let started = ctx.tick();
    let input_digests = stage_input_digests(ws, contract)?;
    let root = ws.state_dir.join(STAGING_DIR).join(&ctx.run_id).join(&folder);
    let result = attempt(ctx, ws, contract, agent, gate, opts, &root, started, input_digests);
    let _ = fs::remove_dir_all(&root);
    result
}

#[allow(clippy::too_many_arguments)]
fn attempt(
    ctx: &mut RunCtx,
    ws: &Workspace,
    contract: &StageContract,
    agent: &dyn Agent,
    gate: &mut dyn Gate,
    opts: &RunOptions,
    root: &Path,
    started: DateTime<Utc>,
    input_digests: BTreeMap<String, Digest>,
) -> Result<StageOutcome, RunError> {
    let stage = &contract.stage;
    let folder = stage.folder();
    let subs = contract.process.len().max(1);
    let stepped = contract.process.len() > 1;
    let mut transcripts: Vec<BreakpointTranscript> = Vec::new();
    let mut prior: Vec<Segment> = Vec::new();
    let mut i = 0;

    let staged = loop {
        let aopts = AssembleOptions {
            tracing: opts.tracing,
            process_upto: stepped.then_some(i),
            extra_working: prior.clone(),
        };
        let (bundle, _) = assemble_contract(ws, contract, &aopts)?;
        let wire = serialize_bundle(&bundle);
        let dir = root.join(i.to_string());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        agent
            .invoke(&AgentRequest {
                bundle: &wire,
                outputs: &contract.outputs,
                staging: &dir,
                workspace: &ws.root,
                stage,
            })
            .map_err(|source| RunError::AgentFailure {
                stage: folder.clone(),
                source,
            })?;
        let staged = collect_staged(&dir, contract)?;
        if stepped {
            let mut outputs = BTreeMap::new();
            for f in &staged {
                outputs.insert(dest_rel(ws, stage, &f.rel)?, digest_file(&f.path)?);
            }
            transcripts.retain(|t| t.segment != i);
            transcripts.push(BreakpointTranscript { segment: i, outputs });
        }
        if i + 1 == subs {
            break staged;
        }

        let bp = ws
            .state_dir
            .join(BREAKPOINTS_DIR)
            .join(&ctx.run_id)
            .join(&folder)
            .join(i.to_string());
        if bp.exists() {
            fs::remove_dir_all(&bp).map_err(io_err(&bp))?;
        }
        let mut review = Vec::new();
        for f in &staged {
            let to = bp.join(&f.rel);
            copy_file(&f.path, &to)?;
            review.push(ws.rel(&to)?);
        }
        if opts.policy == GatePolicy::Interactive {
            let prompt = GatePrompt {
                stage,
                point: GatePoint::Breakpoint { segment: i },
                outputs: &review,
                verify: &[],
            };
            match gate.decide(ws, &prompt) {
                GateDecision::Rerun => continue,
                GateDecision::Abort => {
                    return Ok(StageOutcome {
                        stage: stage.clone(),
                        decision: GateDecision::Abort,
                        manifest: None,
                        verify: Vec::new(),
                        edits: Vec::new(),
                        aborted_at_breakpoint: Some(i),
                    })
                }
                GateDecision::Continue | GateDecision::Auto => {}
            }
        }
        // Labelled with the output path they will become, so bundles do not
        // depend on the run id. Content is re-read to pick up edits.
        for f in &staged {
            let text = read_lossy(&bp.join(&f.rel))?;
            prior.push(Segment::new(Layer::Working, dest_rel(ws, stage, &f.rel)?, None, text));
        }
        i += 1;
    };

    let mut agent_digests = BTreeMap::new();
    for f in &staged {
        agent_digests.insert(dest_rel(ws, stage, &f.rel)?, digest_file(&f.path)?);
    }
    let snapshot = agent_snapshot_dir(ws, &ctx.run_id, &folder);
    if snapshot.exists() {
        fs::remove_dir_all(&snapshot).map_err(io_err(&snapshot))?;
    }
    for f in &staged {
        copy_file(&f.path, &snapshot.join(&f.rel))?;
    }

    let placed = place_outputs(stage, &staged, &root.join("backup"))?;
    let verify = run_checks(ws, contract);
    let outputs: Vec<String> = agent_digests.keys().cloned().collect();
    let mut decision = match opts.policy {
        GatePolicy::Interactive => gate.decide(
            ws,
            &GatePrompt {
                stage,
                point: GatePoint::StageEnd,
                outputs: &outputs,
                verify: &verify,
            },
        ),
        GatePolicy::AutoContinue | GatePolicy::FailOnEdit => {
            if !all_pass(&verify) {
                rollback(&placed);
                return Err(RunError::VerifyFailed {
                    stage: folder,
                    failures: verify.into_iter().filter(|r| !r.passed()).collect(),
                });
            }
            GateDecision::Auto
        }
    };
    let final_digests = output_digests(ws, contract)?;
    let edited: Vec<String> = {
        let keys: BTreeSet<&String> = agent_digests.keys().chain(final_digests.keys()).collect();
        keys.into_iter()
            .filter(|k| agent_digests.get(*k) != final_digests.get(*k))
            .cloned()
            .collect()
    };
    if opts.policy == GatePolicy::FailOnEdit && !edited.is_empty() {
        decision = GateDecision::Abort;
    }

    let manifest = RunManifest {
        run_id: ctx.run_id.clone(),
        stage: stage.ordinal,
        stage_folder: folder.clone(),
        started,
        finished: ctx.tick(),
        input_digests,
        output_digests_agent: agent_digests,
        output_digests_final: final_digests,
        gate_decision: decision,
        agent_id: agent.id().to_string(),
        breakpoint_transcripts: transcripts,
    };
    write_manifest(ws, stage, &manifest)?;
    let edits = detect_edit(&manifest, ws)?;
    append_events(ws, &edits)?;

    if opts.policy == GatePolicy::FailOnEdit && !edited.is_empty() {
        return Err(RunError::EditDetected {
            stage: folder,
            files: edited,
        });
    }
    Ok(StageOutcome {
        stage: stage.clone(),
        decision,
        manifest: Some(manifest),
        verify,
        edits,
        aborted_at_breakpoint: None,
    })
}

struct StagedFile {
    /// Relative to `output/`.
    rel: PathBuf,
    path: PathBuf,
}

/// Declared outputs in the staging directory, in declaration order. Any
/// other file is rejected.
fn collect_staged(dir: &Path, contract: &StageContract) -> Result<Vec<StagedFile>, RunError> {
    let folder = contract.stage.folder();
    let declared: BTreeSet<PathBuf> = contract.outputs.iter().map(|o| o.rel_to_output()).collect();
    let mut extra = Vec::new();
    for entry in WalkDir::new(dir).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            WorkspaceError::Io {
                path,
                source: e.into(),
            }
        })?;
        if entry.file_type().is_dir() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        if !declared.contains(rel) {
            extra.push(format!("output/{}", rel.to_string_lossy().replace('\\', "/")));
        }
    }
    if !extra.is_empty() {
        return Err(RunError::OutputOutsideDeclared {
            stage: folder,
            files: extra,
        });
    }
    let mut staged = Vec::new();
    for o in &contract.outputs {
        let rel = o.rel_to_output();
        let path = dir.join(&rel);
        if !path.is_file() {
            return Err(RunError::AgentFailure {
                stage: folder,
                source: AgentError::MissingOutput(o.stage_rel()),
            });
        }
        staged.push(StagedFile { rel, path });
    }
    Ok(staged)
}

struct Placement {
    dest: PathBuf,
    backup: Option<PathBuf>,
}

/// Moves staged files into `output/`, parking any file they replace under
/// `backup_dir`. On failure everything already moved is put back.
fn place_outputs(stage: &StageRef, staged: &[StagedFile], backup_dir: &Path) -> Result<Vec<Placement>, RunError> {
    let mut placed: Vec<Placement> = Vec::new();
    for f in staged {
        let dest = stage.output_dir.join(&f.rel);
        let step = (|| {
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            let backup = if dest.exists() {
                let b = backup_dir.join(&f.rel);
                if let Some(parent) = b.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::rename(&dest, &b)?;
                Some(b)
            } else {
                None
            };
            if let Err(e) = fs::rename(&f.path, &dest) {
                if let Some(b) = &backup {
                    let _ = fs::rename(b, &dest);
                }
                return Err(e);
            }
            Ok(backup)
        })();
        match step {
            Ok(backup) => placed.push(Placement { dest, backup }),
            Err(source) => {
                rollback(&placed);
                return Err(WorkspaceError::Io { path: dest, source }.into());
            }
        }
    }
    Ok(placed)
}

fn rollback(placed: &[Placement]) {
    for p in placed.iter().rev() {
        let _ = fs::remove_file(&p.dest);
        if let Some(b) = &p.backup {
            let _ = fs::rename(b, &p.dest);
        }
    }
}

fn dest_rel(ws: &Workspace, stage: &StageRef, rel: &Path) -> Result<String, WorkspaceError> {
    ws.rel(&stage.output_dir.join(rel))
}

fn digest_file(path: &Path) -> Result<Digest, WorkspaceError> {
    Digest::of_file(path).map_err(io_err(path))
}

fn copy_file(from: &Path, to: &Path) -> Result<(), WorkspaceError> {
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::copy(from, to).map_err(io_err(to))?;
    Ok(())
}

/// Digests of the declared outputs currently on disk.
pub fn output_digests(ws: &Workspace, contract: &StageContract) -> Result<BTreeMap<String, Digest>, WorkspaceError> {
    let mut out = BTreeMap::new();
    for o in &contract.outputs {
        let p = contract.stage.output_dir.join(o.rel_to_output());
        if p.is_file() {
            out.insert(ws.rel(&p)?, digest_file(&p)?);
        }
    }
    Ok(out)
}

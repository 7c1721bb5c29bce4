//! Compiler and pipeline engine for folder-structured agent workspaces.
//!
//! A workspace is a folder: `CLAUDE.md` (identity), a root `CONTEXT.md`
//! (routing), numbered stage folders each holding a `CONTEXT.md` contract,
//! `references/` and `output/`, and shared reference folders (`_config/`,
//! `shared/`, `setup/`). The engine assembles each stage's context from its
//! contract, runs stages through an agent, and keeps its own state in `.icm/`.

pub mod agent;
pub mod context;
pub mod contract;
pub mod digest;
pub mod edits;
pub mod graph;
pub mod lock;
pub mod manifest;
pub mod markdown;
pub mod paths;
pub mod provenance;
pub mod runner;
pub mod scaffold;
pub mod validate;
pub mod verify;
pub mod workspace;

pub use agent::{mock_agent, Agent, AgentAdapter, AgentError, AgentKind, MockAgent};
pub use context::{
    assemble, compare_monolithic, composition_report, estimate_tokens, parse_bundle,
    serialize_bundle, AssembleError, Budget, CompositionReport, ContextBundle, FlagKind,
    MonolithicComparison, Segment,
};
pub use contract::{
    load_contract, normalize, parse_contract, resolve_inputs, ContractError, InputLayer,
    InputRef, OutputRef, ProcessSegment, StageContract, VerifyCheck,
};
pub use digest::Digest;
pub use edits::{detect_edit, load_ledger, recurring_patterns, EditEvent, Hunk, Suggestion};
pub use graph::{build_graph, compute_stale, export_dot, DepGraph, StaleReason, StaleSet};
pub use lock::{LockError, WorkspaceLock};
pub use manifest::{GateDecision, RunManifest};
pub use provenance::{
    parse_markers, reverse_index, trace, ProvenanceMarker, SourceRef, Span, TraceError,
    TraceResult,
};
pub use runner::{
    run_pipeline, run_stage, AutoGate, Gate, GatePolicy, GatePrompt, PipelineReport,
    PipelineStatus, RunError, RunOptions, StageOutcome, TerminalGate,
};
pub use scaffold::{copy_from, scaffold, ScaffoldError};
pub use validate::{validate, Severity, ValidationReport, Violation};
pub use verify::{run_checks, VerifyResult, VerifyStatus};
pub use workspace::{classify, discover, Layer, LayerClass, StageRef, Workspace, WorkspaceError};

//! Stage dependency graph and content-hash staleness.
//!
//! Producers are either another stage's `output/` or plain files (reference
//! material, stage-local sources). A stage may only consume the outputs of
//! stages with a smaller ordinal, so ordinal order is a topological order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::contract::{expand_dir, input_target, StageContract};
use crate::digest::Digest;
use crate::manifest::RunManifest;
use crate::workspace::{Workspace, WorkspaceError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("stage {consumer} reads {path}, the output of later stage {producer}")]
    ForwardReference {
        consumer: u32,
        producer: u32,
        path: String,
    },
    #[error("stage {stage} reads its own output {path}")]
    SelfReference { stage: u32, path: String },
    #[error("stage {stage} input escapes the workspace: {path}")]
    EscapesWorkspace { stage: u32, path: String },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Producer {
    StageOutput { ordinal: u32 },
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub producer: Producer,
    pub consumer: u32,
    /// Index into the consumer contract's inputs.
    pub input_index: usize,
    /// Workspace-relative target of the input.
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct DepGraph {
    pub contracts: Vec<StageContract>,
    pub edges: Vec<Edge>,
    pub topo: Vec<u32>,
}

impl DepGraph {
    /// Stage ordinals whose outputs `consumer` reads, ascending.
    pub fn producers_of(&self, consumer: u32) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .edges
            .iter()
            .filter(|e| e.consumer == consumer)
            .filter_map(|e| match e.producer {
                Producer::StageOutput { ordinal } => Some(ordinal),
                Producer::File { .. } => None,
            })
            .collect();
        set.into_iter().collect()
    }

    pub fn contract(&self, ordinal: u32) -> Option<&StageContract> {
        self.contracts.iter().find(|c| c.stage.ordinal == ordinal)
    }
}

/// One edge per declared input. Fails on reads of the stage's own or a later
/// stage's output.
pub fn build_graph(ws: &Workspace, contracts: &[StageContract]) -> Result<DepGraph, GraphError> {
    let mut contracts = contracts.to_vec();
    contracts.sort_by_key(|c| c.stage.ordinal);
    let mut edges = Vec::new();
    for c in &contracts {
        let consumer = c.stage.ordinal;
        for (idx, input) in c.inputs.iter().enumerate() {
            let target = input_target(&c.stage, input);
            let rel = ws.rel(&target).map_err(|_| GraphError::EscapesWorkspace {
                stage: consumer,
                path: input.rel_path.clone(),
            })?;
            let producer = match ws.output_owner(&target) {
                Some(owner) if owner.ordinal == consumer => {
                    return Err(GraphError::SelfReference {
                        stage: consumer,
                        path: rel,
                    })
                }
                Some(owner) if owner.ordinal > consumer => {
                    return Err(GraphError::ForwardReference {
                        consumer,
                        producer: owner.ordinal,
                        path: rel,
                    })
                }
                Some(owner) => Producer::StageOutput {
                    ordinal: owner.ordinal,
                },
                None => Producer::File { path: rel.clone() },
            };
            edges.push(Edge {
                producer,
                consumer,
                input_index: idx,
                target: rel,
            });
        }
    }
    let topo = contracts.iter().map(|c| c.stage.ordinal).collect();
    Ok(DepGraph {
        contracts,
        edges,
        topo,
    })
}

/// Digest of every file a stage reads: identity, routing, its own contract,
/// and every file its inputs expand to (whole files, even when anchored).
/// Missing inputs are simply absent from the map.
pub fn stage_input_digests(
    ws: &Workspace,
    contract: &StageContract,
) -> Result<BTreeMap<String, Digest>, WorkspaceError> {
    let mut files = vec![
        ws.identity_file.clone(),
        ws.routing_file.clone(),
        contract.stage.contract_file.clone(),
    ];
    for input in &contract.inputs {
        let target = input_target(&contract.stage, input);
        if !target.starts_with(&ws.root) {
            continue;
        }
        if target.is_dir() {
            files.extend(expand_dir(ws, &target)?);
        } else if target.is_file() {
            files.push(target);
        }
    }
    let mut out = BTreeMap::new();
    for f in files {
        if !f.is_file() {
            continue;
        }
        let d = Digest::of_file(&f).map_err(crate::workspace::io_err(&f))?;
        out.insert(ws.rel(&f)?, d);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StaleReason {
    MissingManifest,
    ChangedInput { path: String },
    UpstreamStale { stage: u32 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StaleSet {
    pub stale: Vec<u32>,
    pub reasons: BTreeMap<u32, Vec<StaleReason>>,
}

impl StaleSet {
    pub fn contains(&self, ordinal: u32) -> bool {
        self.stale.contains(&ordinal)
    }

    pub fn is_empty(&self) -> bool {
        self.stale.is_empty()
    }
}

/// A stage is stale when it has no successful manifest, when any file it
/// reads hashes differently from its manifest, or when a stage it consumes
/// is stale.
pub fn compute_stale(
    graph: &DepGraph,
    manifests: &BTreeMap<u32, RunManifest>,
    ws: &Workspace,
) -> Result<StaleSet, WorkspaceError> {
    let mut set = StaleSet::default();
    for &ordinal in &graph.topo {
        let contract = graph.contract(ordinal).expect("topo built from contracts");
        let mut reasons = Vec::new();
        match manifests.get(&ordinal) {
            Some(m) if m.gate_decision.is_successful() => {
                let current = stage_input_digests(ws, contract)?;
                let keys: BTreeSet<&String> =
                    current.keys().chain(m.input_digests.keys()).collect();
                for k in keys {
                    if current.get(k) != m.input_digests.get(k) {
                        reasons.push(StaleReason::ChangedInput { path: k.clone() });
                    }
                }
            }
            _ => reasons.push(StaleReason::MissingManifest),
        }
        for p in graph.producers_of(ordinal) {
            if set.contains(p) {
                reasons.push(StaleReason::UpstreamStale { stage: p });
            }
        }
        if !reasons.is_empty() {
            set.stale.push(ordinal);
            set.reasons.insert(ordinal, reasons);
        }
    }
    Ok(set)
}

fn dot_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT digraph with `stage_<ordinal>` nodes and quoted file nodes.
pub fn export_dot(graph: &DepGraph) -> String {
    let mut out = String::from("digraph icm {\n");
    if graph.contracts.is_empty() {
        out.push_str("}\n");
        return out;
    }
    out.push_str("  rankdir=LR;\n");
    for c in &graph.contracts {
        let _ = writeln!(
            out,
            "  stage_{} [shape=box, label={}];",
            c.stage.ordinal,
            dot_quote(&c.stage.folder())
        );
    }
    let files: BTreeSet<&str> = graph
        .edges
        .iter()
        .filter_map(|e| match &e.producer {
            Producer::File { path } => Some(path.as_str()),
            Producer::StageOutput { .. } => None,
        })
        .collect();
    for f in files {
        let _ = writeln!(out, "  {} [shape=note];", dot_quote(f));
    }
    for e in &graph.edges {
        let from = match &e.producer {
            Producer::StageOutput { ordinal } => format!("stage_{ordinal}"),
            Producer::File { path } => dot_quote(path),
        };
        let label = Path::new(&e.target)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "  {from} -> stage_{} [label={}];",
            e.consumer,
            dot_quote(&label)
        );
    }
    out.push_str("}\n");
    out
}

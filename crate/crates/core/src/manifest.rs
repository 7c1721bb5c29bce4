//! Run manifests under `.icm/runs/<run_id>/<stage>.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::workspace::{io_err, StageRef, Workspace, WorkspaceError};

pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("bad manifest {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Continue,
    Rerun,
    Abort,
    Auto,
}

impl GateDecision {
    /// A manifest counts for staleness unless the human asked for a rerun.
    pub fn is_successful(self) -> bool {
        !matches!(self, GateDecision::Rerun)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakpointTranscript {
    pub segment: usize,
    pub outputs: BTreeMap<String, Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: u32,
    pub stage_folder: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    /// Workspace-relative path -> digest of every file the stage read.
    pub input_digests: BTreeMap<String, Digest>,
    /// Outputs as the agent produced them.
    pub output_digests_agent: BTreeMap<String, Digest>,
    /// Outputs when the gate decision was entered.
    pub output_digests_final: BTreeMap<String, Digest>,
    pub gate_decision: GateDecision,
    pub agent_id: String,
    #[serde(default)]
    pub breakpoint_transcripts: Vec<BreakpointTranscript>,
}

impl RunManifest {
    /// Outputs whose gate-time digest differs from the agent's, including
    /// files the human deleted.
    pub fn edited_files(&self) -> Vec<&String> {
        let keys: BTreeSet<&String> = self
            .output_digests_agent
            .keys()
            .chain(self.output_digests_final.keys())
            .collect();
        keys.into_iter()
            .filter(|k| self.output_digests_agent.get(*k) != self.output_digests_final.get(*k))
            .collect()
    }
}

pub fn runs_dir(ws: &Workspace) -> PathBuf {
    ws.state_dir.join(RUNS_DIR)
}

pub fn manifest_path(ws: &Workspace, run_id: &str, stage: &StageRef) -> PathBuf {
    runs_dir(ws).join(run_id).join(format!("{}.json", stage.folder()))
}

/// Where the agent's own version of each output is kept for edit detection.
pub fn agent_snapshot_dir(ws: &Workspace, run_id: &str, stage_folder: &str) -> PathBuf {
    runs_dir(ws).join(run_id).join("agent").join(stage_folder)
}

/// Writes through a temporary file and rename.
pub fn write_manifest(ws: &Workspace, stage: &StageRef, m: &RunManifest) -> Result<PathBuf, ManifestError> {
    let path = manifest_path(ws, &m.run_id, stage);
    let dir = path.parent().expect("manifest has a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(m).map_err(|source| ManifestError::Json {
        path: path.clone(),
        source,
    })?;
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WorkspaceError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// All manifests in the workspace, oldest first.
pub fn load_all(ws: &Workspace) -> Result<Vec<RunManifest>, ManifestError> {
    let dir = runs_dir(ws);
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for run in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let run = run.map_err(io_err(&dir))?.path();
        if !run.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&run).map_err(io_err(&run))? {
            let path = entry.map_err(io_err(&run))?.path();
            if path.extension().is_some_and(|e| e == "json") && path.is_file() {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let m: RunManifest = serde_json::from_str(&text)
                    .map_err(|source| ManifestError::Json { path, source })?;
                out.push(m);
            }
        }
    }
    out.sort_by(|a, b| {
        (a.started, &a.run_id, a.stage).cmp(&(b.started, &b.run_id, b.stage))
    });
    Ok(out)
}

/// Latest manifest for each stage ordinal.
pub fn latest_per_stage(ws: &Workspace) -> Result<BTreeMap<u32, RunManifest>, ManifestError> {
    let mut out = BTreeMap::new();
    for m in load_all(ws)? {
        out.insert(m.stage, m);
    }
    Ok(out)
}

/// Number of distinct runs in which the stage executed.
pub fn stage_run_count(ws: &Workspace, ordinal: u32) -> Result<u64, ManifestError> {
    let runs: BTreeSet<String> = load_all(ws)?
        .into_iter()
        .filter(|m| m.stage == ordinal)
        .map(|m| m.run_id)
        .collect();
    Ok(runs.len() as u64)
}

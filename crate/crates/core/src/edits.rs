//! Human edits made at review gates, and the recurring patterns among them.
//!
//! Every gate decision compares the agent's outputs with what is on disk. A
//! difference becomes an [`EditEvent`] with line hunks, each tagged with the
//! provenance source governing it. Events are appended to
//! `.icm/edits/log.jsonl`. When the same stage keeps getting edits under the
//! same source for three consecutive runs, [`recurring_patterns`] suggests
//! fixing that source instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use similar::{capture_diff_slices, Algorithm, DiffTag};
use thiserror::Error;

use crate::manifest::{agent_snapshot_dir, stage_run_count, ManifestError, RunManifest};
use crate::provenance::{scan_markers, SourceRef};
use crate::workspace::{io_err, Workspace, WorkspaceError, CONTRACT_FILE, OUTPUT_DIR};

pub const EDITS_DIR: &str = "edits";
pub const LEDGER_FILE: &str = "log.jsonl";
/// Consecutive runs needed before a pattern is surfaced.
pub const PATTERN_THRESHOLD: usize = 3;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("bad ledger line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

/// Changed lines in the final file, 1-based inclusive. Pure deletions point
/// at the line now occupying the deleted position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub start: usize,
    pub end: usize,
    pub inserted: usize,
    pub deleted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditEvent {
    pub run_id: String,
    pub stage: u32,
    /// 1-based count of runs in which this stage has executed.
    pub seq: u64,
    pub file: String,
    pub hunks: Vec<Hunk>,
    pub total_changed_lines: usize,
}

/// Line-level LCS diff grouped into hunks.
pub fn line_hunks(old: &str, new: &str) -> Vec<Hunk> {
    let old_lines: Vec<&str> = old.split_inclusive('\n').collect();
    let new_lines: Vec<&str> = new.split_inclusive('\n').collect();
    let ops = capture_diff_slices(Algorithm::Lcs, &old_lines, &new_lines);

    let mut hunks = Vec::new();
    let mut pending: Option<(usize, usize, usize, usize)> = None; // new_start, new_end, ins, del
    for op in &ops {
        let (tag, old_r, new_r) = op.as_tag_tuple();
        if tag == DiffTag::Equal {
            if let Some(h) = pending.take() {
                hunks.push(h);
            }
            continue;
        }
        let entry = pending.get_or_insert((new_r.start, new_r.start, 0, 0));
        entry.1 = new_r.end;
        entry.2 += new_r.len();
        entry.3 += old_r.len();
    }
    if let Some(h) = pending.take() {
        hunks.push(h);
    }
    let last = new_lines.len().max(1);
    hunks
        .into_iter()
        .map(|(s, e, inserted, deleted)| {
            let (start, end) = if e > s { (s + 1, e) } else { ((s + 1).min(last), (s + 1).min(last)) };
            Hunk {
                start,
                end,
                inserted,
                deleted,
                source: None,
            }
        })
        .collect()
}

/// Builds an event for a pair of contents, annotating hunks with the marker
/// that governs their first line in the final text.
pub fn edit_event(
    run_id: &str,
    stage: u32,
    seq: u64,
    file: &str,
    agent: &str,
    final_text: &str,
) -> Option<EditEvent> {
    let mut hunks = line_hunks(agent, final_text);
    if hunks.is_empty() {
        return None;
    }
    let scan = scan_markers(final_text, file);
    for h in &mut hunks {
        h.source = scan.governing(h.start).map(|m| m.source.clone());
    }
    let total_changed_lines = hunks.iter().map(|h| h.inserted + h.deleted).sum();
    Some(EditEvent {
        run_id: run_id.to_string(),
        stage,
        seq,
        file: file.to_string(),
        hunks,
        total_changed_lines,
    })
}

/// One event per output whose gate-time digest differs from the agent's.
pub fn detect_edit(manifest: &RunManifest, ws: &Workspace) -> Result<Vec<EditEvent>, LedgerError> {
    let keys: BTreeSet<&String> = manifest
        .output_digests_agent
        .keys()
        .chain(manifest.output_digests_final.keys())
        .collect();
    let changed: Vec<&String> = keys
        .into_iter()
        .filter(|k| manifest.output_digests_agent.get(*k) != manifest.output_digests_final.get(*k))
        .collect();
    if changed.is_empty() {
        return Ok(Vec::new());
    }
    let seq = stage_run_count(ws, manifest.stage)?;
    let snapshot = agent_snapshot_dir(ws, &manifest.run_id, &manifest.stage_folder);
    let stage = ws.stage_by_ordinal(manifest.stage);
    let mut events = Vec::new();
    for key in changed {
        let abs = ws.absolute(Path::new(key));
        let within_output = stage
            .and_then(|s| abs.strip_prefix(&s.output_dir).ok())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(key));
        let agent = read_or_empty(&snapshot.join(within_output));
        let final_text = read_or_empty(&abs);
        if let Some(ev) = edit_event(&manifest.run_id, manifest.stage, seq, key, &agent, &final_text) {
            events.push(ev);
        }
    }
    Ok(events)
}

fn read_or_empty(path: &Path) -> String {
    fs::read(path)
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_default()
}

pub fn ledger_path(ws: &Workspace) -> PathBuf {
    ws.state_dir.join(EDITS_DIR).join(LEDGER_FILE)
}

/// Appends events, one JSON object per line.
pub fn append_events(ws: &Workspace, events: &[EditEvent]) -> Result<(), LedgerError> {
    if events.is_empty() {
        return Ok(());
    }
    let path = ledger_path(ws);
    let dir = path.parent().expect("ledger has a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    let mut buf = String::new();
    for ev in events {
        buf.push_str(&serde_json::to_string(ev).expect("edit events serialize"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_ledger(ws: &Workspace) -> Result<Vec<EditEvent>, LedgerError> {
    let path = ledger_path(ws);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| LedgerError::Json { line: i + 1, source })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct EvidenceRef {
    pub run_id: String,
    pub seq: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Suggestion {
    pub stage: u32,
    /// The contract or reference file to amend.
    pub target_source: String,
    pub evidence: Vec<EvidenceRef>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum GroupKey {
    Source(SourceRef),
    File(String),
}

/// Contract path of the stage owning an output path like
/// `stages/02_script/output/x.md`.
fn contract_for_output(file: &str) -> String {
    let parts: Vec<&str> = file.split('/').collect();
    match parts.iter().position(|p| *p == OUTPUT_DIR) {
        Some(i) if i > 0 => format!("{}/{CONTRACT_FILE}", parts[..i].join("/")),
        _ => CONTRACT_FILE.to_string(),
    }
}

/// Longest streak of consecutive sequence numbers (latest on ties).
fn longest_streak(seqs: &BTreeSet<u64>) -> Vec<u64> {
    let mut best: Vec<u64> = Vec::new();
    let mut cur: Vec<u64> = Vec::new();
    for &s in seqs {
        if cur.last().is_some_and(|&l| l + 1 != s) {
            cur.clear();
        }
        cur.push(s);
        if cur.len() >= best.len() {
            best = cur.clone();
        }
    }
    best
}

/// Groups hunks by (stage, governing source), or (stage, file) when
/// unmarked, and emits one suggestion per group edited in at least three
/// consecutive runs. Sorted by evidence count, descending.
pub fn recurring_patterns(events: &[EditEvent]) -> Vec<Suggestion> {
    let mut groups: BTreeMap<(u32, GroupKey), BTreeMap<u64, EvidenceRef>> = BTreeMap::new();
    for ev in events {
        for h in &ev.hunks {
            let key = match &h.source {
                Some(s) => GroupKey::Source(s.clone()),
                None => GroupKey::File(ev.file.clone()),
            };
            groups
                .entry((ev.stage, key))
                .or_default()
                .entry(ev.seq)
                .or_insert_with(|| EvidenceRef {
                    run_id: ev.run_id.clone(),
                    seq: ev.seq,
                    file: ev.file.clone(),
                });
        }
    }

    let mut out = Vec::new();
    for ((stage, key), by_seq) in groups {
        let seqs: BTreeSet<u64> = by_seq.keys().copied().collect();
        let streak = longest_streak(&seqs);
        if streak.len() < PATTERN_THRESHOLD {
            continue;
        }
        let evidence: Vec<EvidenceRef> = streak.iter().map(|s| by_seq[s].clone()).collect();
        let (target_source, message) = match key {
            GroupKey::Source(src) => {
                let msg = format!(
                    "stage {stage:02}: outputs were edited in {} consecutive runs within spans governed by {src}; \
                     amend {} so future runs need no edit",
                    evidence.len(),
                    src.path
                );
                (src.path, msg)
            }
            GroupKey::File(file) => {
                let contract = contract_for_output(&file);
                let msg = format!(
                    "stage {stage:02}: {file} was edited in {} consecutive runs; \
                     amend the stage contract {contract} so future runs need no edit",
                    evidence.len()
                );
                (contract, msg)
            }
        };
        out.push(Suggestion {
            stage,
            target_source,
            evidence,
            message,
        });
    }
    out.sort_by(|a, b| {
        b.evidence
            .len()
            .cmp(&a.evidence.len())
            .then(a.stage.cmp(&b.stage))
            .then_with(|| a.target_source.cmp(&b.target_source))
    });
    out
}

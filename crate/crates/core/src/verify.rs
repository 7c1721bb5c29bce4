//! Declarative post-run checks from a contract's `## Verify` section.
//! Check paths are relative to the stage folder. Checks never write.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::contract::{StageContract, VerifyCheck};
use crate::markdown::{find_anchor, level2_headings};
use crate::paths::normalize_lexically;
use crate::provenance::{is_marker_line, scan_markers};
use crate::workspace::Workspace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyResult {
    pub check: VerifyCheck,
    pub status: VerifyStatus,
    pub detail: String,
}

impl VerifyResult {
    pub fn passed(&self) -> bool {
        self.status == VerifyStatus::Pass
    }
}

pub fn all_pass(results: &[VerifyResult]) -> bool {
    results.iter().all(VerifyResult::passed)
}

/// Whitespace-delimited words, not counting provenance marker lines.
pub fn word_count(text: &str) -> usize {
    text.lines()
        .filter(|l| !is_marker_line(l))
        .map(|l| l.split_whitespace().count())
        .sum()
}

/// Evaluates every check in declaration order.
pub fn run_checks(ws: &Workspace, contract: &StageContract) -> Vec<VerifyResult> {
    contract
        .verify
        .iter()
        .map(|check| {
            let (ok, detail) = evaluate(ws, &contract.stage.dir, check);
            VerifyResult {
                check: check.clone(),
                status: if ok { VerifyStatus::Pass } else { VerifyStatus::Fail },
                detail,
            }
        })
        .collect()
}

fn target(ws: &Workspace, stage_dir: &Path, rel: &str) -> Result<PathBuf, String> {
    let p = normalize_lexically(&stage_dir.join(rel));
    if p.starts_with(&ws.root) {
        Ok(p)
    } else {
        Err(format!("{rel} escapes the workspace"))
    }
}

fn read_target(ws: &Workspace, stage_dir: &Path, rel: &str) -> Result<String, String> {
    let p = target(ws, stage_dir, rel)?;
    match fs::read(&p) {
        Ok(bytes) => Ok(String::from_utf8_lossy(&bytes).into_owned()),
        Err(_) => Err(format!("missing: {rel}")),
    }
}

fn evaluate(ws: &Workspace, stage_dir: &Path, check: &VerifyCheck) -> (bool, String) {
    match check {
        VerifyCheck::Exists { path } => match target(ws, stage_dir, path) {
            Err(e) => (false, e),
            Ok(p) => match fs::metadata(&p) {
                Ok(m) if m.is_file() && m.len() > 0 => (true, format!("{path} ({} bytes)", m.len())),
                Ok(m) if m.is_file() => (false, format!("empty: {path}")),
                Ok(_) => (false, format!("not a file: {path}")),
                Err(_) => (false, format!("missing: {path}")),
            },
        },
        VerifyCheck::MaxWords { path, limit } => match read_target(ws, stage_dir, path) {
            Err(e) => (false, e),
            Ok(text) => {
                let n = word_count(&text) as u64;
                if n <= *limit {
                    (true, format!("{n} <= {limit}"))
                } else {
                    (false, format!("{n} > {limit}"))
                }
            }
        },
        VerifyCheck::MarkersResolve { path } => match read_target(ws, stage_dir, path) {
            Err(e) => (false, e),
            Ok(text) => {
                let scan = scan_markers(&text, path);
                let mut bad = Vec::new();
                for m in &scan.markers {
                    let src = ws.absolute(Path::new(&m.source.path));
                    let resolves = src.starts_with(&ws.root)
                        && fs::read(&src).is_ok_and(|bytes| match &m.source.anchor {
                            Some(a) => find_anchor(&String::from_utf8_lossy(&bytes), a).is_some(),
                            None => true,
                        });
                    if !resolves {
                        bad.push(format!("line {}: {}", m.line, m.source));
                    }
                }
                if bad.is_empty() {
                    (true, format!("{} markers resolve", scan.markers.len()))
                } else {
                    (false, format!("unresolved: {}", bad.join(", ")))
                }
            }
        },
        VerifyCheck::HeadingsCover { path, source } => {
            let out = match read_target(ws, stage_dir, path) {
                Ok(t) => t,
                Err(e) => return (false, e),
            };
            let src = match read_target(ws, stage_dir, source) {
                Ok(t) => t,
                Err(e) => return (false, e),
            };
            let have = level2_headings(&out);
            let missing: Vec<String> = level2_headings(&src)
                .into_iter()
                .filter(|h| !have.contains(h))
                .collect();
            if missing.is_empty() {
                (true, "all headings covered".to_string())
            } else {
                (false, format!("missing headings: {}", missing.join("; ")))
            }
        }
    }
}

//! Workspace discovery and layer classification.
//!
//! A workspace is a folder with `CLAUDE.md` (layer 0), a root `CONTEXT.md`
//! (layer 1) and numbered stage folders, either under `stages/` or directly
//! at the root. Stage folders hold their contract (`CONTEXT.md`, layer 2),
//! optional `references/` (layer 3) and an `output/` directory (layer 4).
//! `_config/`, `shared/` and `setup/` hold workspace-wide reference material.
//! `.icm/` belongs to the engine and is never part of any layer.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::paths::{is_hidden, normalize_lexically, rel_string};

pub const IDENTITY_FILE: &str = "CLAUDE.md";
pub const ROUTING_FILE: &str = "CONTEXT.md";
pub const CONTRACT_FILE: &str = "CONTEXT.md";
pub const STAGES_DIR: &str = "stages";
pub const STATE_DIR: &str = ".icm";
pub const OUTPUT_DIR: &str = "output";
pub const REFERENCES_DIR: &str = "references";
/// Workspace-level folders whose contents are reference material.
pub const REFERENCE_ROOTS: [&str; 3] = ["_config", "shared", "setup"];

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("not a directory: {0}")]
    NotADirectory(PathBuf),
    #[error("missing identity file {IDENTITY_FILE} in {0}")]
    MissingIdentityFile(PathBuf),
    #[error("missing routing file {ROUTING_FILE} in {0}")]
    MissingRoutingFile(PathBuf),
    #[error("path is outside the workspace: {0}")]
    PathOutsideWorkspace(PathBuf),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One numbered stage folder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRef {
    pub ordinal: u32,
    pub name: String,
    pub dir: PathBuf,
    pub contract_file: PathBuf,
    pub references_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl StageRef {
    /// Builds a stage from its folder. Returns `None` when the folder name is
    /// not `<two-or-more digits>_<slug>` or the ordinal is zero.
    pub fn from_dir(dir: &Path) -> Option<StageRef> {
        let folder = dir.file_name()?.to_str()?;
        let (ordinal, name) = parse_stage_folder(folder)?;
        let references = dir.join(REFERENCES_DIR);
        Some(StageRef {
            ordinal,
            name: name.to_string(),
            dir: dir.to_path_buf(),
            contract_file: dir.join(CONTRACT_FILE),
            references_dir: references.is_dir().then_some(references),
            output_dir: dir.join(OUTPUT_DIR),
        })
    }

    /// The folder name, e.g. `02_script`.
    pub fn folder(&self) -> String {
        self.dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

impl fmt::Display for StageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.folder())
    }
}

/// Splits `02_script` into `(2, "script")`.
pub fn parse_stage_folder(folder: &str) -> Option<(u32, &str)> {
    let (digits, slug) = folder.split_once('_')?;
    if digits.len() < 2 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut chars = slug.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphanumeric()
        || !chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return None;
    }
    let ordinal: u32 = digits.parse().ok()?;
    (ordinal > 0).then_some((ordinal, slug))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    #[serde(rename = "L0_identity")]
    Identity,
    #[serde(rename = "L1_routing")]
    Routing,
    #[serde(rename = "L2_contract")]
    Contract,
    #[serde(rename = "L3_reference")]
    Reference,
    #[serde(rename = "L4_working")]
    Working,
    #[serde(rename = "engine_state")]
    EngineState,
    #[serde(rename = "unclassified")]
    Unclassified,
}

impl Layer {
    pub const CONTEXT_LAYERS: [Layer; 5] = [
        Layer::Identity,
        Layer::Routing,
        Layer::Contract,
        Layer::Reference,
        Layer::Working,
    ];

    /// 0..=4 for the context layers.
    pub fn number(self) -> Option<u8> {
        match self {
            Layer::Identity => Some(0),
            Layer::Routing => Some(1),
            Layer::Contract => Some(2),
            Layer::Reference => Some(3),
            Layer::Working => Some(4),
            Layer::EngineState | Layer::Unclassified => None,
        }
    }

    pub fn from_number(n: u8) -> Option<Layer> {
        Layer::CONTEXT_LAYERS.get(n as usize).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Layer::Identity => "L0_identity",
            Layer::Routing => "L1_routing",
            Layer::Contract => "L2_contract",
            Layer::Reference => "L3_reference",
            Layer::Working => "L4_working",
            Layer::EngineState => "engine_state",
            Layer::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Classification of one path. `rule` is set when the classification carries
/// a validation warning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerClass {
    pub layer: Layer,
    pub role_note: &'static str,
    pub rule: Option<&'static str>,
}

impl LayerClass {
    const fn new(layer: Layer, role_note: &'static str) -> Self {
        LayerClass {
            layer,
            role_note,
            rule: None,
        }
    }

    const fn flagged(layer: Layer, role_note: &'static str, rule: &'static str) -> Self {
        LayerClass {
            layer,
            role_note,
            rule: Some(rule),
        }
    }
}

const REFERENCE_NOTE: &str = "reference: internalize as constraints";
const WORKING_NOTE: &str = "working: process as input";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Workspace {
    pub root: PathBuf,
    pub identity_file: PathBuf,
    pub routing_file: PathBuf,
    /// `root/stages` when present, otherwise `root`.
    pub stages_dir: PathBuf,
    pub stages: Vec<StageRef>,
    pub config_dirs: Vec<PathBuf>,
    pub state_dir: PathBuf,
    /// Folders under `stages/` whose names are not `NN_slug`.
    pub malformed_stage_dirs: Vec<PathBuf>,
}

/// Reads a workspace folder. Never writes.
pub fn discover(root: &Path) -> Result<Workspace, WorkspaceError> {
    if !root.is_dir() {
        return Err(WorkspaceError::NotADirectory(root.to_path_buf()));
    }
    let root = fs::canonicalize(root).map_err(io_err(root))?;
    let identity_file = root.join(IDENTITY_FILE);
    if !identity_file.is_file() {
        return Err(WorkspaceError::MissingIdentityFile(root));
    }
    let routing_file = root.join(ROUTING_FILE);
    if !routing_file.is_file() {
        return Err(WorkspaceError::MissingRoutingFile(root));
    }

    let nested = root.join(STAGES_DIR);
    let stages_dir = if nested.is_dir() { nested } else { root.clone() };

    let mut entries: Vec<PathBuf> = fs::read_dir(&stages_dir)
        .map_err(io_err(&stages_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter(|p| !is_hidden(Path::new(p.file_name().unwrap_or_default())))
        .collect();
    entries.sort();

    let mut stages = Vec::new();
    let mut malformed_stage_dirs = Vec::new();
    for dir in entries {
        match StageRef::from_dir(&dir) {
            Some(stage) => stages.push(stage),
            None if stages_dir != root => malformed_stage_dirs.push(dir),
            None => {}
        }
    }
    stages.sort_by(|a, b| a.ordinal.cmp(&b.ordinal).then_with(|| a.dir.cmp(&b.dir)));

    let config_dirs = REFERENCE_ROOTS
        .iter()
        .map(|d| root.join(d))
        .filter(|p| p.is_dir())
        .collect();

    Ok(Workspace {
        state_dir: root.join(STATE_DIR),
        identity_file,
        routing_file,
        stages_dir,
        stages,
        config_dirs,
        malformed_stage_dirs,
        root,
    })
}

impl Workspace {
    /// Looks a stage up by folder name (`02_script`), ordinal (`2`, `02`) or
    /// slug (`script`).
    pub fn stage(&self, selector: &str) -> Result<&StageRef, WorkspaceError> {
        let by_ordinal: Option<u32> = selector.parse().ok();
        self.stages
            .iter()
            .find(|s| s.folder() == selector)
            .or_else(|| by_ordinal.and_then(|n| self.stages.iter().find(|s| s.ordinal == n)))
            .or_else(|| self.stages.iter().find(|s| s.name == selector))
            .ok_or_else(|| WorkspaceError::UnknownStage(selector.to_string()))
    }

    pub fn stage_by_ordinal(&self, ordinal: u32) -> Option<&StageRef> {
        self.stages.iter().find(|s| s.ordinal == ordinal)
    }

    /// Absolute path for a workspace-relative or absolute path, lexically
    /// normalized.
    pub fn absolute(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            normalize_lexically(path)
        } else {
            normalize_lexically(&self.root.join(path))
        }
    }

    /// Workspace-relative `/`-separated form of an absolute path.
    pub fn rel(&self, path: &Path) -> Result<String, WorkspaceError> {
        let abs = self.absolute(path);
        rel_string(&self.root, &abs).ok_or(WorkspaceError::PathOutsideWorkspace(abs))
    }

    /// The stage whose folder contains `path`, if any.
    pub fn stage_containing(&self, path: &Path) -> Option<&StageRef> {
        let abs = self.absolute(path);
        self.stages.iter().find(|s| abs.starts_with(&s.dir))
    }

    /// The stage whose `output/` contains (or is) `path`.
    pub fn output_owner(&self, path: &Path) -> Option<&StageRef> {
        let abs = self.absolute(path);
        self.stages.iter().find(|s| abs.starts_with(&s.output_dir))
    }

    /// Every non-hidden file under the root, as sorted absolute paths.
    /// Hidden entries (including `.icm/` and `.git/`) are skipped.
    pub fn files(&self) -> Result<Vec<PathBuf>, WorkspaceError> {
        walk_files(&self.root, &self.root)
    }

    pub fn classify(&self, path: &Path) -> Result<LayerClass, WorkspaceError> {
        classify(path, self)
    }
}

/// Sorted non-hidden files under `dir` (recursive). Hidden-ness is judged
/// relative to `root`.
pub(crate) fn walk_files(root: &Path, dir: &Path) -> Result<Vec<PathBuf>, WorkspaceError> {
    let mut out = Vec::new();
    let walker = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| {
            e.path()
                .strip_prefix(root)
                .map(|rel| !is_hidden(rel))
                .unwrap_or(true)
        });
    for entry in walker {
        let entry = entry.map_err(|e| WorkspaceError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf()),
            source: e.into(),
        })?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    out.sort();
    Ok(out)
}

/// Maps a path under the workspace to its layer. Total over paths inside the
/// root; depends only on the path and the workspace shape.
pub fn classify(path: &Path, ws: &Workspace) -> Result<LayerClass, WorkspaceError> {
    let abs = ws.absolute(path);
    let rel = abs
        .strip_prefix(&ws.root)
        .map_err(|_| WorkspaceError::PathOutsideWorkspace(abs.clone()))?;
    let parts: Vec<String> = rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    if parts.is_empty() {
        return Ok(LayerClass::flagged(
            Layer::Unclassified,
            "workspace root",
            "UnclassifiedFile",
        ));
    }
    if parts[0] == STATE_DIR {
        return Ok(LayerClass::new(Layer::EngineState, "engine-owned state"));
    }
    if is_hidden(rel) {
        return Ok(LayerClass::new(Layer::Unclassified, "hidden; ignored by the engine"));
    }
    if parts.len() == 1 && parts[0] == IDENTITY_FILE {
        return Ok(LayerClass::new(Layer::Identity, "identity: where am I?"));
    }
    if parts.len() == 1 && parts[0] == ROUTING_FILE {
        return Ok(LayerClass::new(Layer::Routing, "routing: where do I go?"));
    }
    let file_name = parts.last().map(String::as_str).unwrap_or_default();
    if REFERENCE_ROOTS.contains(&parts[0].as_str()) && parts.len() > 1 {
        return Ok(reference_class(file_name, parts[0] == "setup"));
    }
    if let Some(stage) = ws.stages.iter().find(|s| abs.starts_with(&s.dir)) {
        let inner: Vec<&str> = abs
            .strip_prefix(&stage.dir)
            .expect("prefix checked")
            .components()
            .map(|c| c.as_os_str().to_str().unwrap_or_default())
            .collect();
        return Ok(match inner.as_slice() {
            [] => LayerClass::flagged(Layer::Unclassified, "stage folder", "UnclassifiedFile"),
            [CONTRACT_FILE] => LayerClass::new(Layer::Contract, "stage contract: what do I do?"),
            [REFERENCES_DIR, _, ..] => reference_class(file_name, false),
            [OUTPUT_DIR, _, ..] => LayerClass::new(Layer::Working, WORKING_NOTE),
            _ => LayerClass::flagged(
                Layer::Working,
                "working (stage-local material outside output/)",
                "StrayStageFile",
            ),
        });
    }
    Ok(LayerClass::flagged(
        Layer::Unclassified,
        "matches no layer rule",
        "UnclassifiedFile",
    ))
}

fn reference_class(file_name: &str, setup: bool) -> LayerClass {
    if file_name == ROUTING_FILE {
        LayerClass::flagged(
            Layer::Reference,
            "routing within reference collection",
            "NestedRoutingFile",
        )
    } else if setup {
        LayerClass::new(Layer::Reference, "setup material (factory configuration)")
    } else {
        LayerClass::new(Layer::Reference, REFERENCE_NOTE)
    }
}

//! New workspaces: the three-stage template, or a copy of an existing
//! workspace without engine state and stage outputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;
use walkdir::WalkDir;

use crate::paths::is_hidden;
use crate::workspace::{discover, io_err, WorkspaceError};

#[derive(Debug, Error)]
pub enum ScaffoldError {
    #[error("TargetNotEmpty: {0} already exists and is not empty")]
    TargetNotEmpty(PathBuf),
    #[error("unknown template `{0}`; available: three-stage")]
    UnknownTemplate(String),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

pub const DEFAULT_TEMPLATE: &str = "three-stage";

const THREE_STAGE: &[(&str, &str)] = &[
    (
        "CLAUDE.md",
        "# Workspace identity\n\n\
         This workspace turns a topic into a short explainer video in three stages:\n\
         research, script, production.\n\n\
         Work only from the files a stage's CONTEXT.md points you to.\n\
         Write results into that stage's output/ folder and nowhere else.\n",
    ),
    (
        "CONTEXT.md",
        "# Routing\n\n\
         | Stage | Folder | Produces |\n\
         |---|---|---|\n\
         | 1 | stages/01_research | research.md |\n\
         | 2 | stages/02_script | script_draft.md |\n\
         | 3 | stages/03_production | production_spec.md |\n\n\
         Each stage reads the previous stage's output/ folder. Review and edit\n\
         outputs between stages; the next stage reads whatever is on disk.\n",
    ),
    (
        "stages/01_research/CONTEXT.md",
        "# Research\n\n\
         ## Inputs\n\
         - Layer 3 (reference): references/research-guide.md\n\
         - Layer 3 (reference): ../../shared/glossary.md\n\n\
         ## Process\n\
         Research the topic named in the workspace questionnaire.\n\
         Follow the method in research-guide.md and use the glossary's terms.\n\n\
         ## Outputs\n\
         - research.md -> output/\n\n\
         ## Verify\n\
         - exists: output/research.md\n",
    ),
    (
        "stages/01_research/references/research-guide.md",
        "# Research guide\n\n\
         ## Method\n\
         Collect three to five primary sources. Summarize each in one paragraph.\n\n\
         ## Format\n\
         One level-2 heading per finding, most important first.\n",
    ),
    (
        "stages/02_script/CONTEXT.md",
        "## Inputs\n\
         - Layer 4 (working): ../01_research/output/\n\
         - Layer 3 (reference): ../../_config/voice.md\n\
         - Layer 3 (reference): references/structure.md\n\n\
         ## Process\n\
         Write a script based on the research output.\n\
         Follow the structure in structure.md.\n\
         Match the tone described in voice.md.\n\n\
         ## Outputs\n\
         - script_draft.md -> output/\n",
    ),
    (
        "stages/02_script/references/structure.md",
        "# Script structure\n\n\
         ## Hook\n\
         One sentence that states the question the video answers.\n\n\
         ## Body\n\
         Three beats, one per key finding.\n\n\
         ## Close\n\
         Restate the answer and point to one next step.\n",
    ),
    (
        "stages/03_production/CONTEXT.md",
        "# Production\n\n\
         ## Inputs\n\
         - Layer 4 (working): ../02_script/output/\n\
         - Layer 3 (reference): ../../_config/design-system.md\n\
         - Layer 3 (reference): references/production-notes.md\n\n\
         ## Process\n\
         Turn the script into a production specification, one scene per script section.\n\
         Apply the palette and type rules from design-system.md.\n\n\
         ## Outputs\n\
         - production_spec.md -> output/\n\n\
         ## Verify\n\
         - exists: output/production_spec.md\n",
    ),
    (
        "stages/03_production/references/production-notes.md",
        "# Production notes\n\n\
         Scenes run 5 to 15 seconds. Every scene names its on-screen text.\n",
    ),
    (
        "_config/voice.md",
        "# Voice\n\n\
         ## Tone\n\
         Plain, direct, curious. Short sentences. No jargon without a definition.\n",
    ),
    (
        "_config/design-system.md",
        "# Design system\n\n\
         ## Palette\n\
         Two brand colours and one accent.\n\n\
         ## Type\n\
         One sans-serif family, two weights.\n",
    ),
    (
        "shared/glossary.md",
        "# Glossary\n\n\
         Add domain terms here, one per line: `term: definition`.\n",
    ),
    (
        "setup/questionnaire.md",
        "# Setup questionnaire\n\n\
         1. What topic should the video explain?\n\
         2. Who is the audience?\n\
         3. How long should the finished video be?\n",
    ),
];

const OUTPUT_DIRS: &[&str] = &[
    "stages/01_research/output",
    "stages/02_script/output",
    "stages/03_production/output",
];

fn ensure_empty_target(dir: &Path) -> Result<(), ScaffoldError> {
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(ScaffoldError::TargetNotEmpty(dir.to_path_buf()));
            }
            Ok(())
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Ok(())
        }
        Err(e) if e.kind() == io::ErrorKind::NotADirectory => {
            Err(ScaffoldError::TargetNotEmpty(dir.to_path_buf()))
        }
        Err(e) => Err(io_err(dir)(e).into()),
    }
}

/// Writes a named template into `dir`, which must be empty or absent.
pub fn scaffold(dir: &Path, template: &str) -> Result<(), ScaffoldError> {
    if template != DEFAULT_TEMPLATE {
        return Err(ScaffoldError::UnknownTemplate(template.to_string()));
    }
    ensure_empty_target(dir)?;
    for (rel, body) in THREE_STAGE {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, body).map_err(io_err(&path))?;
    }
    for rel in OUTPUT_DIRS {
        let path = dir.join(rel);
        fs::create_dir_all(&path).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Copies a workspace into `dir`, leaving out hidden entries (engine state
/// included) and the contents of every stage's `output/`.
pub fn copy_from(src: &Path, dir: &Path) -> Result<(), ScaffoldError> {
    let ws = discover(src)?;
    ensure_empty_target(dir)?;
    let outputs: Vec<&Path> = ws.stages.iter().map(|s| s.output_dir.as_path()).collect();
    let walker = WalkDir::new(&ws.root)
        .min_depth(1)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| !is_hidden(Path::new(e.file_name())));
    for entry in walker {
        let entry = entry.map_err(|e| WorkspaceError::Io {
            path: e.path().unwrap_or(&ws.root).to_path_buf(),
            source: e.into(),
        })?;
        let path = entry.path();
        if outputs.iter().any(|o| path.starts_with(o) && path != *o) {
            continue;
        }
        let rel = path.strip_prefix(&ws.root).expect("walk stays under root");
        let to = dir.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&to).map_err(io_err(&to))?;
        } else if entry.file_type().is_file() {
            fs::copy(path, &to).map_err(io_err(&to))?;
        }
    }
    for o in outputs {
        let to = dir.join(o.strip_prefix(&ws.root).expect("stage under root"));
        fs::create_dir_all(&to).map_err(io_err(&to))?;
    }
    Ok(())
}

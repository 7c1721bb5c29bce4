//! Synthetic workspaces for benchmarks.

use std::fs;
use std::io;
use std::path::Path;

use icm_core::{discover, Workspace, WorkspaceError};

/// Shape of a generated pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub stages: usize,
    /// `_config/` files; stage `i` reads the ones with `j % stages == i`.
    pub references: usize,
    /// Approximate size of every reference file.
    pub reference_bytes: usize,
}

impl Default for Shape {
    fn default() -> Self {
        Shape {
            stages: 5,
            references: 20,
            reference_bytes: 8 * 1024,
        }
    }
}

fn put(root: &Path, rel: &str, body: &str) -> io::Result<()> {
    let p = root.join(rel);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(p, body)
}

/// Markdown with `## Section n` headings, about `bytes` long.
pub fn filler(seed: usize, bytes: usize) -> String {
    let mut s = format!("# Reference {seed}\n\n");
    let mut n = 0;
    while s.len() < bytes {
        s.push_str(&format!("## Section {n}\n"));
        for k in 0..8 {
            s.push_str(&format!("Line {k} of section {n} in file {seed}, plain prose.\n"));
        }
        n += 1;
    }
    s
}

/// Stage `i` reads the previous stage's output and its share of `_config/`.
pub fn build(root: &Path, shape: Shape) -> io::Result<()> {
    put(root, "CLAUDE.md", "# Identity\nBenchmark workspace.\n")?;
    put(root, "CONTEXT.md", "# Routing\nRun the stages in order.\n")?;
    for j in 0..shape.references {
        put(root, &format!("_config/ref{j:03}.md"), &filler(j, shape.reference_bytes))?;
    }
    for i in 0..shape.stages {
        let mut c = String::from("## Inputs\n");
        if i > 0 {
            c.push_str(&format!("- Layer 4 (working): ../{:02}_stage/output/\n", i));
        }
        for j in (0..shape.references).filter(|j| j % shape.stages == i) {
            c.push_str(&format!("- Layer 3 (reference): ../../_config/ref{j:03}.md\n"));
        }
        c.push_str(&format!(
            "\n## Process\nProduce stage {} output.\n\n## Outputs\n- out.md -> output/\n",
            i + 1
        ));
        let dir = format!("stages/{:02}_stage", i + 1);
        put(root, &format!("{dir}/CONTEXT.md"), &c)?;
        fs::create_dir_all(root.join(dir).join("output"))?;
    }
    Ok(())
}

pub fn workspace(root: &Path, shape: Shape) -> Result<Workspace, WorkspaceError> {
    build(root, shape).map_err(|source| WorkspaceError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    discover(root)
}

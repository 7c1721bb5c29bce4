//! Agent adapters turn a serialized bundle into the stage's declared output
//! files inside a staging directory.
//!
//! External agents are subprocesses: the bundle arrives on stdin,
//! `ICM_OUTPUT_DIR` names the staging directory, and exit code 0 means
//! success. Their stdout is forwarded to our stderr.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;

use thiserror::Error;

use crate::context::{estimate_tokens, parse_bundle};
use crate::contract::OutputRef;
use crate::digest::Digest;
use crate::provenance::{SourceRef, INSTRUCTION_HEADER};
use crate::workspace::StageRef;

pub const OUTPUT_DIR_ENV: &str = "ICM_OUTPUT_DIR";
pub const STAGE_ENV: &str = "ICM_STAGE";
pub const WORKSPACE_ENV: &str = "ICM_WORKSPACE";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent exited unsuccessfully: {0}")]
    Failed(String),
    #[error("agent did not produce declared output {0}")]
    MissingOutput(String),
    #[error("could not start agent `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("agent io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad agent spec `{0}`; expected `mock` or `cmd:<command line>`")]
    BadSpec(String),
}

pub struct AgentRequest<'a> {
    pub bundle: &'a str,
    pub outputs: &'a [OutputRef],
    pub staging: &'a Path,
    pub workspace: &'a Path,
    pub stage: &'a StageRef,
}

pub trait Agent {
    fn id(&self) -> &str;
    fn invoke(&self, req: &AgentRequest<'_>) -> Result<(), AgentError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Mock,
    ExternalCommand,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentAdapter {
    pub id: String,
    pub kind: AgentKind,
    pub command: Option<Vec<String>>,
}

impl AgentAdapter {
    pub fn mock() -> Self {
        AgentAdapter {
            id: "mock".to_string(),
            kind: AgentKind::Mock,
            command: None,
        }
    }

    pub fn command(argv: Vec<String>) -> Self {
        AgentAdapter {
            id: format!("cmd:{}", shell_words::join(&argv)),
            kind: AgentKind::ExternalCommand,
            command: Some(argv),
        }
    }

    /// Parses `mock` or `cmd:<command line>` (shell-style quoting).
    pub fn parse(spec: &str) -> Result<Self, AgentError> {
        if spec == "mock" {
            return Ok(AgentAdapter::mock());
        }
        let line = spec
            .strip_prefix("cmd:")
            .ok_or_else(|| AgentError::BadSpec(spec.to_string()))?;
        let argv = shell_words::split(line).map_err(|_| AgentError::BadSpec(spec.to_string()))?;
        if argv.is_empty() {
            return Err(AgentError::BadSpec(spec.to_string()));
        }
        Ok(AgentAdapter::command(argv))
    }
}

impl Agent for AgentAdapter {
    fn id(&self) -> &str {
        &self.id
    }

    fn invoke(&self, req: &AgentRequest<'_>) -> Result<(), AgentError> {
        match (self.kind, &self.command) {
            (AgentKind::ExternalCommand, Some(argv)) => run_command(argv, req),
            _ => MockAgent.invoke(req),
        }
    }
}

fn run_command(argv: &[String], req: &AgentRequest<'_>) -> Result<(), AgentError> {
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(req.workspace)
        .env(OUTPUT_DIR_ENV, req.staging)
        .env(STAGE_ENV, req.stage.folder())
        .env(WORKSPACE_ENV, req.workspace)
        .stdin(Stdio::piped())
        .stdout(Stdio::from(io::stderr()))
        .spawn()
        .map_err(|source| AgentError::Spawn {
            program: argv[0].clone(),
            source,
        })?;
    let mut stdin = child.stdin.take().expect("stdin piped");
    let bundle = req.bundle.as_bytes().to_vec();
    let writer = thread::spawn(move || match stdin.write_all(&bundle) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => other,
    });
    let status = child.wait()?;
    writer.join().expect("stdin writer thread")?;
    if status.success() {
        Ok(())
    } else {
        Err(AgentError::Failed(status.to_string()))
    }
}

/// Deterministic stand-in agent.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockAgent;

impl Agent for MockAgent {
    fn id(&self) -> &str {
        "mock"
    }

    fn invoke(&self, req: &AgentRequest<'_>) -> Result<(), AgentError> {
        for (rel, bytes) in mock_agent(req.bundle, req.outputs) {
            let path = req.staging.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, bytes)?;
        }
        Ok(())
    }
}

/// Output files (relative to `output/`) for a bundle: a header, the bundle's
/// digest, and one section per reference/working source. When the bundle
/// carries the provenance instruction, each section opens with a marker.
/// A pure function of the bundle bytes and the declared outputs.
pub fn mock_agent(bundle: &str, outputs: &[OutputRef]) -> Vec<(PathBuf, Vec<u8>)> {
    let digest = Digest::of_bytes(bundle.as_bytes());
    let segments = parse_bundle(bundle).unwrap_or_default();
    let tracing = segments
        .iter()
        .any(|s| s.layer == 2 && s.content.lines().any(|l| l == INSTRUCTION_HEADER));
    let mut sections = String::new();
    for seg in segments.iter().filter(|s| s.layer >= 3) {
        let src = SourceRef {
            path: seg.source.clone(),
            anchor: seg.anchor.clone(),
        };
        if tracing {
            sections.push_str(&src.marker_line());
            sections.push('\n');
        }
        sections.push_str(&format!(
            "## From {src}\nDerived from {src} ({} tokens, layer {}).\n\n",
            estimate_tokens(&seg.content),
            seg.layer
        ));
    }
    outputs
        .iter()
        .map(|o| {
            let body = format!(
                "# {}\n\nmock-agent bundle {}\n\n{sections}",
                o.filename, digest
            );
            (o.rel_to_output(), body.into_bytes())
        })
        .collect()
}

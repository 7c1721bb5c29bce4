//! Structural checks over a discovered workspace. Errors make a workspace
//! unrunnable; warnings flag files the layer model cannot place.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::contract::{expand_dir, input_target, load_contract, InputRef, LoadContractError, StageContract};
use crate::markdown::find_anchor;
use crate::workspace::{classify, StageRef, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

/// Rule id, severity and a one-line description.
pub const RULES: &[(&str, Severity, &str)] = &[
    ("EmptyIdentityFile", Severity::Error, "CLAUDE.md has no content"),
    ("EmptyRoutingFile", Severity::Error, "root CONTEXT.md has no content"),
    ("MissingStageContract", Severity::Error, "stage folder has no CONTEXT.md"),
    ("DuplicateOrdinal", Severity::Error, "two stage folders share an ordinal"),
    ("ContractParse", Severity::Error, "stage contract does not follow the grammar"),
    ("InputNotFound", Severity::Error, "declared input does not exist"),
    ("LayerMismatch", Severity::Error, "declared layer disagrees with the file's location"),
    ("EscapesWorkspace", Severity::Error, "declared input points outside the workspace"),
    ("AnchorNotFound", Severity::Error, "section anchor matches no heading"),
    ("AnchorOnDirectory", Severity::Error, "section anchor on a directory input"),
    ("ForwardReference", Severity::Error, "stage reads the output of a later stage"),
    ("SelfReference", Severity::Error, "stage reads its own output"),
    ("MalformedStageDir", Severity::Warning, "folder under stages/ is not named NN_slug"),
    ("MissingOutputDir", Severity::Warning, "stage folder has no output/ directory"),
    ("StrayStageFile", Severity::Warning, "file in a stage folder outside references/ and output/"),
    ("NestedRoutingFile", Severity::Warning, "CONTEXT.md inside reference material"),
    ("UnclassifiedFile", Severity::Warning, "file belongs to no layer"),
];

pub fn rule_severity(rule_id: &str) -> Option<Severity> {
    RULES.iter().find(|r| r.0 == rule_id).map(|r| r.1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule_id: &'static str,
    pub severity: Severity,
    /// Workspace-relative.
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}] {}", self.severity, self.rule_id, self.path)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Warning)
    }

    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }
}

struct Collector<'a> {
    ws: &'a Workspace,
    out: Vec<Violation>,
}

impl Collector<'_> {
    fn push(&mut self, rule_id: &'static str, path: &Path, line: Option<usize>, message: String) {
        let severity = rule_severity(rule_id).expect("rule is in the catalog");
        let path = self
            .ws
            .rel(path)
            .unwrap_or_else(|_| path.to_string_lossy().into_owned());
        self.out.push(Violation {
            rule_id,
            severity,
            path,
            line,
            message,
        });
    }
}

/// Every violation, sorted by path then rule id.
pub fn validate(ws: &Workspace) -> ValidationReport {
    let mut c = Collector {
        ws,
        out: Vec::new(),
    };
    for (file, rule, what) in [
        (&ws.identity_file, "EmptyIdentityFile", "identity file"),
        (&ws.routing_file, "EmptyRoutingFile", "routing file"),
    ] {
        let empty = fs::read_to_string(file).map(|t| t.trim().is_empty()).unwrap_or(true);
        if empty {
            c.push(rule, file, None, format!("{what} is empty"));
        }
    }
    for dir in &ws.malformed_stage_dirs {
        c.push(
            "MalformedStageDir",
            dir,
            None,
            "expected a name like 01_research".to_string(),
        );
    }

    let mut by_ordinal: BTreeMap<u32, &StageRef> = BTreeMap::new();
    for stage in &ws.stages {
        if let Some(first) = by_ordinal.get(&stage.ordinal) {
            c.push(
                "DuplicateOrdinal",
                &stage.dir,
                None,
                format!("ordinal {} is also used by {}", stage.ordinal, first.folder()),
            );
        } else {
            by_ordinal.insert(stage.ordinal, stage);
        }
        if !stage.output_dir.is_dir() {
            c.push(
                "MissingOutputDir",
                &stage.dir,
                None,
                "no output/ directory".to_string(),
            );
        }
        if !stage.contract_file.is_file() {
            c.push(
                "MissingStageContract",
                &stage.dir,
                None,
                "no CONTEXT.md".to_string(),
            );
            continue;
        }
        match load_contract(stage) {
            Ok(contract) => check_inputs(&mut c, &contract),
            Err(LoadContractError::Parse { source, .. }) => {
                c.push("ContractParse", &stage.contract_file, source.line(), source.to_string())
            }
            Err(LoadContractError::Workspace(e)) => {
                c.push("ContractParse", &stage.contract_file, None, e.to_string())
            }
        }
    }

    if let Ok(files) = ws.files() {
        for f in files {
            if let Ok(class) = classify(&f, ws) {
                if let Some(rule) = class.rule {
                    c.push(rule, &f, None, class.role_note.to_string());
                }
            }
        }
    }

    let mut violations = c.out;
    violations.sort_by(|a, b| {
        (&a.path, a.rule_id, a.line, &a.message).cmp(&(&b.path, b.rule_id, b.line, &b.message))
    });
    violations.dedup();
    ValidationReport { violations }
}

/// 1-based line of an input declaration in the contract source.
fn input_line(contract: &StageContract, input: &InputRef) -> Option<usize> {
    let rendered = input.to_string();
    contract
        .raw_text
        .lines()
        .position(|l| l.trim() == rendered.trim())
        .map(|i| i + 1)
}

fn check_inputs(c: &mut Collector<'_>, contract: &StageContract) {
    let ws = c.ws;
    let stage = &contract.stage;
    let file = &stage.contract_file;
    for input in &contract.inputs {
        let line = input_line(contract, input);
        let target = input_target(stage, input);
        if !target.starts_with(&ws.root) {
            c.push(
                "EscapesWorkspace",
                file,
                line,
                format!("{} resolves outside the workspace", input.rel_path),
            );
            continue;
        }
        let rel = ws.rel(&target).unwrap_or_default();
        let owner = ws.output_owner(&target);
        match owner {
            Some(o) if o.ordinal == stage.ordinal => {
                c.push("SelfReference", file, line, format!("reads its own output {rel}"));
                continue;
            }
            Some(o) if o.ordinal > stage.ordinal => {
                c.push(
                    "ForwardReference",
                    file,
                    line,
                    format!("reads {rel}, the output of later stage {}", o.folder()),
                );
                continue;
            }
            _ => {}
        }
        let files = if target.is_dir() {
            if input.section_scope.is_some() {
                c.push(
                    "AnchorOnDirectory",
                    file,
                    line,
                    format!("{rel} is a directory"),
                );
                continue;
            }
            expand_dir(ws, &target).unwrap_or_default()
        } else if target.is_file() {
            vec![target.clone()]
        } else {
            // An earlier stage's output that has not been produced yet.
            if owner.is_none() {
                c.push("InputNotFound", file, line, format!("{rel} does not exist"));
            }
            continue;
        };
        for f in files {
            let Ok(class) = classify(&f, ws) else { continue };
            if class.layer != input.layer.layer() {
                c.push(
                    "LayerMismatch",
                    file,
                    line,
                    format!(
                        "{} is declared layer {} but is {}",
                        ws.rel(&f).unwrap_or_default(),
                        input.layer.number(),
                        class.layer
                    ),
                );
            }
            if let Some(anchor) = &input.section_scope {
                let text = fs::read(&f)
                    .map(|b| String::from_utf8_lossy(&b).into_owned())
                    .unwrap_or_default();
                if find_anchor(&text, anchor).is_none() {
                    c.push(
                        "AnchorNotFound",
                        file,
                        line,
                        format!("no heading `{anchor}` in {rel}"),
                    );
                }
            }
        }
    }
}

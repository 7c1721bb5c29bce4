use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icm_core::context::{assemble_contract, AssembleOptions};
use icm_core::graph::{GraphError, Producer};
use icm_core::manifest::latest_per_stage;
use icm_core::scaffold::DEFAULT_TEMPLATE;
use icm_core::{
    build_graph, compare_monolithic, composition_report, compute_stale, copy_from, discover,
    export_dot, load_contract, load_ledger, recurring_patterns, reverse_index, run_checks,
    run_pipeline, scaffold, serialize_bundle, trace, validate, AgentAdapter, AutoGate, Budget,
    DepGraph, Gate, GatePolicy, PipelineStatus, RunError, RunOptions, ScaffoldError,
    SourceRef, StageContract, TerminalGate, TraceError, Workspace,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "icm", version, about = "Compile, run and inspect folder-structured agent workspaces")]
struct Cli {
    /// Workspace root.
    #[arg(short = 'C', long = "workspace", global = true, default_value = ".")]
    workspace: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct JsonFlag {
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Create a workspace from a template or an existing workspace.
    Init {
        dir: PathBuf,
        #[arg(long, default_value = DEFAULT_TEMPLATE, conflicts_with = "from")]
        template: String,
        /// Copy an existing workspace without engine state or outputs.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Check the workspace structure and every contract.
    Validate(JsonFlag),
    /// List the stages a run would execute and why.
    Plan(JsonFlag),
    /// Run the stale stages in order.
    Run {
        /// `mock` or `cmd:"<command line>"`.
        #[arg(long, default_value = "mock")]
        agent: String,
        /// Continue at every gate without asking.
        #[arg(long, short = 'y')]
        yes: bool,
        /// Fail instead of recording edits made before the gate.
        #[arg(long, conflicts_with = "yes")]
        fail_on_edit: bool,
        /// First stage (ordinal or folder name).
        #[arg(long)]
        from: Option<String>,
        /// Last stage (ordinal or folder name).
        #[arg(long)]
        to: Option<String>,
        /// Run every stage in range, stale or not.
        #[arg(long)]
        force: bool,
        /// Ask the agent for provenance markers.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        json: bool,
    },
    /// Print the context bundle for a stage.
    Context {
        stage: String,
        /// Token counts per layer instead of the bundle.
        #[arg(long)]
        report: bool,
        /// Report as JSON.
        #[arg(long)]
        json: bool,
        /// Include the provenance-marker instruction.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = Budget::default().soft)]
        soft: u64,
        #[arg(long, default_value_t = Budget::default().hard)]
        hard: u64,
        /// Also report the cost of loading the whole workspace.
        #[arg(long)]
        monolithic: bool,
    },
    /// Follow provenance markers back from `file:line`.
    Trace {
        /// `file:line`, or a source `path[#anchor]` with --reverse.
        target: String,
        /// List output spans derived from a source.
        #[arg(long)]
        reverse: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run a stage's Verify checks.
    Verify {
        stage: String,
        #[arg(long)]
        json: bool,
    },
    /// Show the stage dependency graph.
    Graph {
        #[arg(long, conflicts_with = "json")]
        dot: bool,
        #[arg(long)]
        json: bool,
    },
    /// Show recorded human edits for a stage.
    History {
        stage: String,
        #[arg(long)]
        json: bool,
    },
    /// Propose source fixes for recurring edits.
    Suggest(JsonFlag),
}

/// Exit status classes.
enum Fail {
    /// Validation or verify failure.
    Check(String),
    Usage(String),
    Runtime(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Check(_) => 1,
            Fail::Usage(_) => 2,
            Fail::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Fail::Check(m) | Fail::Usage(m) | Fail::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Fail {
    Fail::Runtime(e.to_string())
}

type Outcome = Result<(), Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message().is_empty() {
                eprintln!("icm: {}", f.message());
            }
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let root = cli.workspace;
    match cli.command {
        Command::Init { dir, template, from } => init(&dir, &template, from.as_deref()),
        Command::Validate(j) => cmd_validate(&open(&root)?, j.json),
        Command::Plan(j) => plan(&open(&root)?, j.json),
        Command::Run {
            agent,
            yes,
            fail_on_edit,
            from,
            to,
            force,
            trace,
            json,
        } => {
            let ws = open(&root)?;
            let agent = AgentAdapter::parse(&agent).map_err(|e| Fail::Usage(e.to_string()))?;
            let policy = if yes {
                GatePolicy::AutoContinue
            } else if fail_on_edit {
                GatePolicy::FailOnEdit
            } else {
                GatePolicy::Interactive
            };
            let opts = RunOptions {
                policy,
                tracing: trace,
                force,
                from: from.map(|s| ordinal(&ws, &s)).transpose()?,
                to: to.map(|s| ordinal(&ws, &s)).transpose()?,
            };
            run(&ws, &agent, &opts, json)
        }
        Command::Context {
            stage,
            report,
            json,
            trace,
            soft,
            hard,
            monolithic,
        } => {
            if soft > hard {
                return Err(Fail::Usage(format!("--soft {soft} exceeds --hard {hard}")));
            }
            let ws = open(&root)?;
            context(&ws, &stage, Budget { soft, hard }, report, json, trace, monolithic)
        }
        Command::Trace {
            target,
            reverse,
            json,
        } => {
            let ws = open(&root)?;
            if reverse {
                trace_reverse(&ws, &target, json)
            } else {
                trace_forward(&ws, &target, json)
            }
        }
        Command::Verify { stage, json } => verify(&open(&root)?, &stage, json),
        Command::Graph { dot, json } => graph(&open(&root)?, dot, json),
        Command::History { stage, json } => history(&open(&root)?, &stage, json),
        Command::Suggest(j) => suggest(&open(&root)?, j.json),
    }
}

fn open(root: &Path) -> Result<Workspace, Fail> {
    discover(root).map_err(|e| Fail::Check(e.to_string()))
}

fn ordinal(ws: &Workspace, sel: &str) -> Result<u32, Fail> {
    ws.stage(sel)
        .map(|s| s.ordinal)
        .map_err(|e| Fail::Usage(e.to_string()))
}

fn print_json<T: Serialize + ?Sized>(value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

fn contracts(ws: &Workspace) -> Result<Vec<StageContract>, Fail> {
    ws.stages
        .iter()
        .map(|s| load_contract(s).map_err(|e| Fail::Check(e.to_string())))
        .collect()
}

fn dep_graph(ws: &Workspace) -> Result<DepGraph, Fail> {
    build_graph(ws, &contracts(ws)?).map_err(|e| match e {
        GraphError::Workspace(e) => runtime(e),
        e => Fail::Check(e.to_string()),
    })
}

fn init(dir: &Path, template: &str, from: Option<&Path>) -> Outcome {
    let result = match from {
        Some(src) => copy_from(src, dir),
        None => scaffold(dir, template),
    };
    result.map_err(|e| match e {
        ScaffoldError::TargetNotEmpty(_) | ScaffoldError::UnknownTemplate(_) => {
            Fail::Usage(e.to_string())
        }
        ScaffoldError::Workspace(e) => runtime(e),
    })?;
    println!("initialized {}", dir.display());
    Ok(())
}

fn cmd_validate(ws: &Workspace, json: bool) -> Outcome {
    let report = validate(ws);
    if json {
        #[derive(Serialize)]
        struct Out<'a> {
            valid: bool,
            violations: &'a [icm_core::Violation],
        }
        print_json(&Out {
            valid: report.is_valid(),
            violations: &report.violations,
        })?;
    } else {
        for v in &report.violations {
            println!("{v}");
        }
        println!(
            "{} error(s), {} warning(s)",
            report.errors().count(),
            report.warnings().count()
        );
    }
    if report.is_valid() {
        Ok(())
    } else {
        Err(Fail::Check(String::new()))
    }
}

fn plan(ws: &Workspace, json: bool) -> Outcome {
    let graph = dep_graph(ws)?;
    let manifests = latest_per_stage(ws).map_err(runtime)?;
    let stale = compute_stale(&graph, &manifests, ws).map_err(runtime)?;
    if json {
        #[derive(Serialize)]
        struct Entry<'a> {
            stage: u32,
            folder: String,
            reasons: &'a [icm_core::StaleReason],
        }
        let entries: Vec<Entry> = stale
            .stale
            .iter()
            .map(|&o| Entry {
                stage: o,
                folder: graph.contract(o).map(|c| c.stage.folder()).unwrap_or_default(),
                reasons: &stale.reasons[&o],
            })
            .collect();
        return print_json(&serde_json::json!({ "stale": entries }));
    }
    if stale.is_empty() {
        println!("nothing to do");
        return Ok(());
    }
    for &o in &stale.stale {
        let folder = graph.contract(o).map(|c| c.stage.folder()).unwrap_or_default();
        let reasons: Vec<String> = stale.reasons[&o]
            .iter()
            .map(|r| match r {
                icm_core::StaleReason::MissingManifest => "no successful run".to_string(),
                icm_core::StaleReason::ChangedInput { path } => format!("changed {path}"),
                icm_core::StaleReason::UpstreamStale { stage } => format!("upstream stage {stage} stale"),
            })
            .collect();
        println!("{folder}: {}", reasons.join("; "));
    }
    Ok(())
}

fn run(ws: &Workspace, agent: &AgentAdapter, opts: &RunOptions, json: bool) -> Outcome {
    let mut auto = AutoGate;
    let mut term;
    let gate: &mut dyn Gate = if opts.policy == GatePolicy::Interactive {
        term = TerminalGate::stdio();
        &mut term
    } else {
        &mut auto
    };
    let report = run_pipeline(ws, agent, gate, opts).map_err(|e| match e {
        RunError::Invalid(_) | RunError::VerifyFailed { .. } | RunError::EditDetected { .. } => {
            Fail::Check(e.to_string())
        }
        RunError::Contract(_) | RunError::Graph(GraphError::ForwardReference { .. }) => {
            Fail::Check(e.to_string())
        }
        e => runtime(e),
    })?;
    if json {
        return print_json(&report);
    }
    match report.status {
        PipelineStatus::NothingToDo => println!("nothing to do"),
        PipelineStatus::Completed | PipelineStatus::Aborted { .. } => {
            for o in &report.outcomes {
                match o.aborted_at_breakpoint {
                    Some(i) => println!("{}: aborted at breakpoint {}", o.stage, i + 1),
                    None => println!("{}: {}", o.stage, format!("{:?}", o.decision).to_lowercase()),
                }
                for e in &o.edits {
                    println!("  edited {} ({} lines)", e.file, e.total_changed_lines);
                }
            }
            match report.status {
                PipelineStatus::Aborted { stage } => println!("run {} aborted at stage {stage}", report.run_id),
                _ => println!("run {} completed", report.run_id),
            }
        }
    }
    Ok(())
}

fn context(
    ws: &Workspace,
    stage: &str,
    budget: Budget,
    report: bool,
    json: bool,
    tracing: bool,
    monolithic: bool,
) -> Outcome {
    let stage = ws.stage(stage).map_err(|e| Fail::Usage(e.to_string()))?;
    let contract = load_contract(stage).map_err(|e| Fail::Check(e.to_string()))?;
    let opts = AssembleOptions {
        tracing,
        ..AssembleOptions::default()
    };
    let (bundle, _) = assemble_contract(ws, &contract, &opts).map_err(|e| Fail::Check(e.to_string()))?;
    if monolithic {
        let cmp = compare_monolithic(ws, stage, budget).map_err(|e| Fail::Check(e.to_string()))?;
        if json {
            return print_json(&cmp);
        }
        print!("{}\n{}", cmp.scoped, cmp.monolithic);
        return Ok(());
    }
    if json {
        return print_json(&composition_report(&bundle, budget));
    }
    if report {
        print!("{}", composition_report(&bundle, budget));
    } else {
        print!("{}", serialize_bundle(&bundle));
    }
    Ok(())
}

fn trace_forward(ws: &Workspace, target: &str, json: bool) -> Outcome {
    let (file, line) = target
        .rsplit_once(':')
        .and_then(|(f, l)| Some((f, l.parse::<usize>().ok().filter(|&l| l > 0)?)))
        .ok_or_else(|| Fail::Usage(format!("expected <file>:<line>, got `{target}`")))?;
    let t = trace(ws, Path::new(file), line).map_err(|e| match e {
        TraceError::NoMarkerGoverns(_) => Fail::Check(e.to_string()),
        e => runtime(e),
    })?;
    if json {
        return print_json(&t);
    }
    for hop in &t.chain {
        println!("{}:{} <- {}", hop.file, hop.span, hop.source);
    }
    if t.dangling {
        println!("dangling: {} no longer exists", t.terminal);
    }
    Ok(())
}

fn trace_reverse(ws: &Workspace, target: &str, json: bool) -> Outcome {
    let src = SourceRef::parse(target);
    let index = reverse_index(ws, &src).map_err(runtime)?;
    if json {
        #[derive(Serialize)]
        struct Entry<'a> {
            file: &'a str,
            span: icm_core::Span,
        }
        let entries: Vec<Entry> = index
            .iter()
            .map(|(file, span)| Entry { file, span: *span })
            .collect();
        return print_json(&entries);
    }
    for (file, span) in &index {
        println!("{file}:{span}");
    }
    Ok(())
}

fn verify(ws: &Workspace, stage: &str, json: bool) -> Outcome {
    let stage = ws.stage(stage).map_err(|e| Fail::Usage(e.to_string()))?;
    let contract = load_contract(stage).map_err(|e| Fail::Check(e.to_string()))?;
    let results = run_checks(ws, &contract);
    if json {
        print_json(&results)?;
    } else if results.is_empty() {
        println!("{stage}: no checks declared");
    } else {
        for r in &results {
            let status = if r.passed() { "PASS" } else { "FAIL" };
            println!("{status} {}: {}", r.check, r.detail);
        }
    }
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Fail::Check(String::new()))
    }
}

fn graph(ws: &Workspace, dot: bool, json: bool) -> Outcome {
    let g = dep_graph(ws)?;
    if dot {
        print!("{}", export_dot(&g));
        return Ok(());
    }
    if json {
        let stages: Vec<_> = g
            .contracts
            .iter()
            .map(|c| serde_json::json!({ "ordinal": c.stage.ordinal, "folder": c.stage.folder() }))
            .collect();
        return print_json(&serde_json::json!({
            "stages": stages,
            "edges": g.edges,
            "topo": g.topo,
        }));
    }
    for &o in &g.topo {
        let Some(c) = g.contract(o) else { continue };
        println!("{}", c.stage);
        for e in g.edges.iter().filter(|e| e.consumer == o) {
            match &e.producer {
                Producer::StageOutput { ordinal } => {
                    println!("  <- stage {ordinal}: {}", e.target)
                }
                Producer::File { path } => println!("  <- {path}"),
            }
        }
    }
    Ok(())
}

fn history(ws: &Workspace, stage: &str, json: bool) -> Outcome {
    let stage = ws.stage(stage).map_err(|e| Fail::Usage(e.to_string()))?;
    let events: Vec<_> = load_ledger(ws)
        .map_err(runtime)?
        .into_iter()
        .filter(|e| e.stage == stage.ordinal)
        .collect();
    if json {
        return print_json(&events);
    }
    if events.is_empty() {
        println!("{stage}: no recorded edits");
    }
    for e in &events {
        println!("run {} (#{}) {}: {} changed lines", e.run_id, e.seq, e.file, e.total_changed_lines);
        for h in &e.hunks {
            let src = h.source.as_ref().map(|s| s.to_string()).unwrap_or_else(|| "unmarked".into());
            println!("  {}-{} +{} -{} [{src}]", h.start, h.end, h.inserted, h.deleted);
        }
    }
    Ok(())
}

fn suggest(ws: &Workspace, json: bool) -> Outcome {
    let suggestions = recurring_patterns(&load_ledger(ws).map_err(runtime)?);
    if json {
        return print_json(&suggestions);
    }
    if suggestions.is_empty() {
        println!("no suggestions");
    }
    for s in &suggestions {
        println!("{}", s.message);
        for e in &s.evidence {
            println!("  run {} (#{}) {}", e.run_id, e.seq, e.file);
        }
    }
    Ok(())
}

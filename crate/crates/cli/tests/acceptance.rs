//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.
//!
//! Oracles here are written against files on disk and the `icm` binary's
//! output, not against engine internals.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::panic;
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, ExitCode, Output, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use icm_core::context::{assemble_contract, AssembleOptions};
use icm_core::contract::{InputLayer, InputRef, OutputRef, ProcessSegment};
use icm_core::graph::{build_graph, compute_stale};
use icm_core::manifest::latest_per_stage;
use icm_core::provenance::scan_markers;
use icm_core::{
    copy_from, discover, load_contract, normalize, parse_contract, reverse_index, run_pipeline,
    scaffold, serialize_bundle, trace, AutoGate, GatePolicy, MockAgent, RunOptions, SourceRef,
    StageContract, StageRef, TraceError, VerifyCheck, Workspace,
};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_icm");

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        name: "contract round-trip",
        limit: Duration::from_secs(1),
        run: ac1_contract_roundtrip,
    },
    Criterion {
        id: 2,
        name: "composition report on the sized fixture",
        limit: Duration::from_secs(1),
        run: ac2_composition,
    },
    Criterion {
        id: 3,
        name: "incremental correctness",
        limit: Duration::from_secs(60),
        run: ac3_incremental,
    },
    Criterion {
        id: 4,
        name: "scoping soundness",
        limit: Duration::from_secs(5),
        run: ac4_scoping,
    },
    Criterion {
        id: 5,
        name: "review-gate fidelity",
        limit: Duration::from_secs(10),
        run: ac5_review_gate,
    },
    Criterion {
        id: 6,
        name: "provenance trace",
        limit: Duration::from_secs(10),
        run: ac6_provenance,
    },
    Criterion {
        id: 7,
        name: "verify checks",
        limit: Duration::from_secs(5),
        run: ac7_verify,
    },
    Criterion {
        id: 8,
        name: "atomicity and lock",
        limit: Duration::from_secs(10),
        run: ac8_atomicity_lock,
    },
];

fn main() -> ExitCode {
    let mut failed = 0;
    for c in CRITERIA {
        let start = Instant::now();
        let result = panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .map(|m| format!("panic: {m}"))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took < c.limit => (true, d),
            Ok(d) => (false, format!("{d}; over time limit")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} AC{} {} ({:.2}s, limit {}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        CRITERIA.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- helpers

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(root: &Path, rel: &str, body: &str) {
    let p = root.join(rel);
    fs::create_dir_all(p.parent().unwrap()).unwrap();
    fs::write(p, body).unwrap();
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(rd) = fs::read_dir(dir) else {
        return out;
    };
    for e in rd.flatten() {
        if e.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        let p = e.path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/")
}

/// Digests of every file under `stages/*/output/`.
fn output_digests(root: &Path) -> BTreeMap<String, String> {
    files_under(root)
        .into_iter()
        .map(|p| (rel(root, &p), p))
        .filter(|(r, _)| r.split('/').any(|c| c == "output"))
        .map(|(r, p)| (r, sha_hex(&fs::read(p).unwrap())))
        .collect()
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap().flatten() {
        let dest = to.join(e.file_name());
        if e.path().is_dir() {
            copy_tree(&e.path(), &dest);
        } else {
            fs::copy(e.path(), dest).unwrap();
        }
    }
}

fn fig3() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/fig3")
}

fn icm(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn auto() -> RunOptions {
    RunOptions {
        policy: GatePolicy::AutoContinue,
        ..RunOptions::default()
    }
}

fn lexical(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            c => out.push(c),
        }
    }
    out
}

// ------------------------------------------------------------------- AC1

const LISTING: &str = "## Inputs
- Layer 4 (working): ../01_research/output/
- Layer 3 (reference): ../../_config/voice.md
- Layer 3 (reference): references/structure.md

## Process
Write a script based on the research output.
Follow the structure in structure.md.
Match the tone described in voice.md.

## Outputs
- script_draft.md -> output/
";

fn word(rng: &mut StdRng) -> String {
    const ALPHA: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut w = String::new();
    w.push(ALPHA[rng.random_range(0..ALPHA.len())] as char);
    for _ in 0..rng.random_range(0..8) {
        w.push(ALNUM[rng.random_range(0..ALNUM.len())] as char);
    }
    w
}

fn words(rng: &mut StdRng, lo: usize, hi: usize) -> Vec<String> {
    (0..rng.random_range(lo..hi)).map(|_| word(rng)).collect()
}

fn random_path(rng: &mut StdRng) -> String {
    let prefix = ["", "../", "../../", "references/"][rng.random_range(0..4)];
    let ext = [".md", "/", ".txt"][rng.random_range(0..3)];
    format!("{prefix}{}{ext}", words(rng, 1, 3).join("/"))
}

fn random_contract(rng: &mut StdRng, stage: &StageRef) -> StageContract {
    let inputs = (0..rng.random_range(0..5))
        .map(|_| InputRef {
            layer: if rng.random_bool(0.5) {
                InputLayer::Reference
            } else {
                InputLayer::Working
            },
            rel_path: random_path(rng),
            section_scope: rng.random_bool(0.3).then(|| {
                let mut s = word(rng);
                s[..1].make_ascii_uppercase();
                if rng.random_bool(0.5) {
                    s.push(' ');
                    s.push_str(&word(rng));
                }
                s
            }),
        })
        .collect();
    let n = rng.random_range(1..4);
    let process = (0..n)
        .map(|index| {
            let lines: Vec<String> = (0..rng.random_range(1..5))
                .map(|_| match rng.random_range(0..6) {
                    0 => String::new(),
                    1 => format!("- {}", words(rng, 1, 3).join(" ")),
                    _ => words(rng, 1, 6).join(" "),
                })
                .collect();
            let mut text = lines.join("\n").trim().to_string();
            if text.is_empty() {
                text = word(rng);
            }
            ProcessSegment {
                index,
                text,
                followed_by_breakpoint: index + 1 < n,
            }
        })
        .collect();
    let outputs = (0..rng.random_range(0..4))
        .map(|_| {
            let sub = words(rng, 0, 2);
            OutputRef {
                filename: format!("{}{}", word(rng), [".md", ".json", ""][rng.random_range(0..3)]),
                dest: if sub.is_empty() {
                    "output/".into()
                } else {
                    format!("output/{}/", sub.join("/"))
                },
            }
        })
        .collect();
    let verify = (0..rng.random_range(0..4))
        .map(|_| {
            let path = format!("output/{}.md", word(rng));
            match rng.random_range(0..4) {
                0 => VerifyCheck::Exists { path },
                1 => VerifyCheck::MaxWords {
                    path,
                    limit: rng.random_range(0..100_000),
                },
                2 => VerifyCheck::MarkersResolve { path },
                _ => VerifyCheck::HeadingsCover {
                    path,
                    source: random_path(rng),
                },
            }
        })
        .collect();
    StageContract {
        stage: stage.clone(),
        inputs,
        process,
        outputs,
        verify,
        raw_text: String::new(),
    }
}

fn ac1_contract_roundtrip() -> Check {
    let stage = StageRef::from_dir(Path::new("/ws/stages/02_script")).unwrap();
    let c = parse_contract(LISTING, &stage).map_err(|e| e.to_string())?;
    let inputs: Vec<(u8, &str, bool)> = c
        .inputs
        .iter()
        .map(|i| (i.layer.number(), i.rel_path.as_str(), i.section_scope.is_some()))
        .collect();
    ensure!(
        inputs
            == [
                (4, "../01_research/output/", false),
                (3, "../../_config/voice.md", false),
                (3, "references/structure.md", false)
            ],
        "listing inputs: {inputs:?}"
    );
    ensure!(
        c.process.len() == 1
            && c.process[0].text.lines().count() == 3
            && !c.process[0].followed_by_breakpoint,
        "listing process: {:?}",
        c.process
    );
    ensure!(
        c.outputs.len() == 1
            && c.outputs[0].filename == "script_draft.md"
            && c.outputs[0].dest == "output/",
        "listing outputs: {:?}",
        c.outputs
    );
    ensure!(c.verify.is_empty(), "listing has no Verify section");
    ensure!(normalize(&c) == LISTING, "listing is not in normal form");

    const CASES: usize = 250;
    let mut rng = StdRng::seed_from_u64(0x1c41);
    for case in 0..CASES {
        let c = random_contract(&mut rng, &stage);
        let text = normalize(&c);
        let parsed = parse_contract(&text, &stage).map_err(|e| format!("case {case}: {e}\n{text}"))?;
        ensure!(parsed.same_structure(&c), "case {case}: structure differs\n{text}");
        ensure!(normalize(&parsed) == text, "case {case}: normalize not idempotent");
    }
    Ok(format!("listing parses to its structure; {CASES} generated contracts round-trip"))
}

// ------------------------------------------------------------------- AC2

fn ac2_composition() -> Check {
    let root = fig3();
    let root = root.to_str().unwrap();
    let out = icm(&["-C", root, "context", "01_research", "--report"]);
    ensure!(out.status.success(), "context --report failed: {}", stderr(&out));
    let text = stdout(&out);
    let row = |name: &str| {
        text.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().last())
            .map(str::to_string)
    };
    let got = (
        row("total"),
        row("structural"),
        row("L3 reference"),
        row("L4 working"),
    );
    let want = (Some("4,900"), Some("1,400"), Some("500"), Some("3,000"));
    ensure!(
        (got.0.as_deref(), got.1.as_deref(), got.2.as_deref(), got.3.as_deref()) == want,
        "report rows {got:?}\n{text}"
    );
    ensure!(!text.contains("warning"), "scoped bundle should not warn:\n{text}");

    let out = icm(&["-C", root, "context", "01_research", "--monolithic", "--json"]);
    ensure!(out.status.success(), "context --monolithic failed: {}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let total = v["monolithic"]["total"].as_u64().unwrap_or(0);
    let hard = v["monolithic"]["flags"]
        .as_array()
        .is_some_and(|f| f.iter().any(|f| f["kind"] == "hard_warning"));
    ensure!(total >= 40_000 && hard, "monolithic total {total}, hard warning {hard}");
    ensure!(v["scoped"]["total"] == 4_900, "scoped json total {}", v["scoped"]["total"]);
    Ok(format!("scoped total 4,900; monolithic {total} with hard warning"))
}

// ------------------------------------------------------------------- AC3

const REFS: usize = 3;

/// Per stage: referenced `_config` files and producer stages.
struct Model {
    stages: Vec<(BTreeSet<usize>, BTreeSet<usize>)>,
}

fn folder(i: usize) -> String {
    format!("{:02}_s{}", i + 1, i + 1)
}

impl Model {
    fn random(rng: &mut StdRng) -> Model {
        let n = rng.random_range(1..=4);
        Model {
            stages: (0..n)
                .map(|i| {
                    let refs = (0..REFS).filter(|_| rng.random_bool(0.5)).collect();
                    let prods = (0..i).filter(|_| rng.random_bool(0.6)).collect();
                    (refs, prods)
                })
                .collect(),
        }
    }

    fn contract(&self, i: usize, note: &str) -> String {
        let (refs, prods) = &self.stages[i];
        let mut s = String::from("## Inputs\n");
        for p in prods {
            s += &format!("- Layer 4 (working): ../{}/output/\n", folder(*p));
        }
        for r in refs {
            s += &format!("- Layer 3 (reference): ../../_config/r{r}.md\n");
        }
        s += &format!("\n## Process\nStage {} work. {note}\n\n## Outputs\n- out.md -> output/\n", i + 1);
        s
    }

    fn build(&self, root: &Path) {
        write(root, "CLAUDE.md", "identity\n");
        write(root, "CONTEXT.md", "routing\n");
        write(root, "_config/unused.md", "nobody reads this\n");
        for r in 0..REFS {
            write(root, &format!("_config/r{r}.md"), &format!("reference {r}\n"));
        }
        for i in 0..self.stages.len() {
            write(root, &format!("stages/{}/CONTEXT.md", folder(i)), &self.contract(i, "v0"));
            fs::create_dir_all(root.join(format!("stages/{}/output", folder(i)))).unwrap();
        }
    }

    fn reads(&self, root: &Path, i: usize) -> Vec<String> {
        let (refs, prods) = &self.stages[i];
        let mut files = vec![
            "CLAUDE.md".to_string(),
            "CONTEXT.md".to_string(),
            format!("stages/{}/CONTEXT.md", folder(i)),
        ];
        files.extend(refs.iter().map(|r| format!("_config/r{r}.md")));
        for p in prods {
            let dir = root.join(format!("stages/{}/output", folder(*p)));
            files.extend(files_under(&dir).iter().map(|f| rel(root, f)));
        }
        files
    }

    /// Applies the three staleness rules to manifests read as plain JSON.
    fn oracle(&self, root: &Path) -> Vec<u32> {
        let mut latest: BTreeMap<String, (chrono::DateTime<chrono::FixedOffset>, Value)> =
            BTreeMap::new();
        for run in fs::read_dir(root.join(".icm/runs")).into_iter().flatten().flatten() {
            for f in fs::read_dir(run.path()).unwrap().flatten() {
                if f.path().extension().is_none_or(|e| e != "json") {
                    continue;
                }
                let v: Value = serde_json::from_slice(&fs::read(f.path()).unwrap()).unwrap();
                let started =
                    chrono::DateTime::parse_from_rfc3339(v["started"].as_str().unwrap()).unwrap();
                let key = v["stage_folder"].as_str().unwrap().to_string();
                if latest.get(&key).is_none_or(|(s, _)| started > *s) {
                    latest.insert(key, (started, v));
                }
            }
        }
        let mut stale = vec![false; self.stages.len()];
        for i in 0..self.stages.len() {
            let fresh = match latest.get(&folder(i)) {
                Some((_, m)) if m["gate_decision"] != "rerun" => {
                    let now: BTreeMap<String, String> = self
                        .reads(root, i)
                        .into_iter()
                        .map(|f| {
                            let h = sha_hex(&fs::read(root.join(&f)).unwrap());
                            (f, h)
                        })
                        .collect();
                    let then: BTreeMap<String, String> = m["input_digests"]
                        .as_object()
                        .unwrap()
                        .iter()
                        .map(|(k, v)| (k.clone(), v["hex"].as_str().unwrap().to_string()))
                        .collect();
                    now == then
                }
                _ => false,
            };
            stale[i] = !fresh || self.stages[i].1.iter().any(|p| stale[*p]);
        }
        (0..stale.len())
            .filter(|i| stale[*i])
            .map(|i| i as u32 + 1)
            .collect()
    }

    fn edit(&self, rng: &mut StdRng, root: &Path, step: usize) {
        let v = rng.random_range(0..1000);
        match rng.random_range(0..9) {
            0..=2 => {
                let r = rng.random_range(0..REFS);
                write(root, &format!("_config/r{r}.md"), &format!("reference {r} edit {v}\n"));
            }
            3 | 4 => {
                let s = rng.random_range(0..self.stages.len());
                write(
                    root,
                    &format!("stages/{}/CONTEXT.md", folder(s)),
                    &self.contract(s, &format!("v{step}.{v}")),
                );
            }
            5 => write(root, "CLAUDE.md", &format!("identity {v}\n")),
            6 => write(root, "CONTEXT.md", &format!("routing {v}\n")),
            7 => write(root, "_config/unused.md", &format!("still unread {v}\n")),
            _ => {
                // rewrite a reference with identical bytes
                write(root, "_config/r0.md", &fs::read_to_string(root.join("_config/r0.md")).unwrap());
            }
        }
    }
}

fn engine_stale(ws: &Workspace) -> Result<Vec<u32>, String> {
    let contracts: Vec<_> = ws
        .stages
        .iter()
        .map(|s| load_contract(s).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let graph = build_graph(ws, &contracts).map_err(|e| e.to_string())?;
    let manifests = latest_per_stage(ws).map_err(|e| e.to_string())?;
    Ok(compute_stale(&graph, &manifests, ws).map_err(|e| e.to_string())?.stale)
}

fn ac3_incremental() -> Check {
    const CASES: usize = 500;
    let mut rng = StdRng::seed_from_u64(0x1c43);
    let mut comparisons = 0;
    for case in 0..CASES {
        let model = Model::random(&mut rng);
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ws");
        model.build(&root);
        let ws = discover(&root).map_err(|e| e.to_string())?;
        run_pipeline(&ws, &MockAgent, &mut AutoGate, &auto()).map_err(|e| format!("case {case}: {e}"))?;

        for step in 0..rng.random_range(1..=5) {
            model.edit(&mut rng, &root, step);
            let want = model.oracle(&root);
            let got = engine_stale(&ws)?;
            comparisons += 1;
            ensure!(got == want, "case {case} step {step}: engine {got:?}, oracle {want:?}");
            if rng.random_bool(0.5) {
                let report = run_pipeline(&ws, &MockAgent, &mut AutoGate, &auto())
                    .map_err(|e| format!("case {case}: {e}"))?;
                let ran: Vec<u32> = report.outcomes.iter().map(|o| o.stage.ordinal).collect();
                ensure!(
                    ran.iter().all(|s| want.contains(s)),
                    "case {case}: ran {ran:?} outside stale set {want:?}"
                );
                ensure!(model.oracle(&root).is_empty(), "case {case}: stale after run");
            }
        }
        run_pipeline(&ws, &MockAgent, &mut AutoGate, &auto()).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(engine_stale(&ws)?.is_empty(), "case {case}: stale after final run");

        let scratch = tmp.path().join("scratch");
        copy_from(&root, &scratch).map_err(|e| e.to_string())?;
        let ws2 = discover(&scratch).map_err(|e| e.to_string())?;
        run_pipeline(&ws2, &MockAgent, &mut AutoGate, &auto()).map_err(|e| format!("case {case}: {e}"))?;
        let (a, b) = (output_digests(&root), output_digests(&scratch));
        ensure!(a == b, "case {case}: incremental outputs differ from scratch\n{a:?}\n{b:?}");
    }
    Ok(format!(
        "{CASES} cases, {comparisons} stale-set comparisons, incremental == scratch"
    ))
}

// ------------------------------------------------------------------- AC4

fn ac4_scoping() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let fig = tmp.path().join("fig3");
    copy_tree(&fig3(), &fig);
    let tpl = tmp.path().join("template");
    scaffold(&tpl, "three-stage").map_err(|e| e.to_string())?;
    let ws = discover(&tpl).map_err(|e| e.to_string())?;
    run_pipeline(&ws, &MockAgent, &mut AutoGate, &auto()).map_err(|e| e.to_string())?;

    let mut checked = 0;
    for root in [&fig, &tpl] {
        let before = bundle_digests(root, &mut checked)?;
        write(root, "_config/injected.md", &"undeclared material\n".repeat(500));
        let mut ignore = 0;
        let after = bundle_digests(root, &mut ignore)?;
        ensure!(before == after, "injected _config file changed a bundle in {}", root.display());
    }
    Ok(format!("{checked} segments inside scope; injection leaves all bundles unchanged"))
}

/// Checks every segment of every stage against the declared scope, then
/// returns bundle digests.
fn bundle_digests(root: &Path, checked: &mut usize) -> Result<Vec<String>, String> {
    let ws = discover(root).map_err(|e| e.to_string())?;
    let mut digests = Vec::new();
    for stage in &ws.stages {
        let contract = load_contract(stage).map_err(|e| e.to_string())?;
        let stage_dir = rel(root, &stage.dir);
        let mut allowed: BTreeMap<String, Option<String>> = BTreeMap::new();
        allowed.insert("CLAUDE.md".into(), None);
        allowed.insert("CONTEXT.md".into(), None);
        allowed.insert(format!("{stage_dir}/CONTEXT.md"), None);
        for input in &contract.inputs {
            let target = lexical(&stage.dir.join(&input.rel_path));
            let files = if target.is_dir() {
                files_under(&target)
            } else {
                vec![target]
            };
            for f in files {
                allowed.insert(rel(root, &f), input.section_scope.clone());
            }
        }
        let (bundle, _) = assemble_contract(&ws, &contract, &AssembleOptions::default())
            .map_err(|e| e.to_string())?;
        for seg in &bundle.segments {
            *checked += 1;
            match allowed.get(&seg.source) {
                Some(anchor) => ensure!(
                    anchor.is_none() || seg.anchor == *anchor,
                    "{stage}: {} loaded with anchor {:?}",
                    seg.source,
                    seg.anchor
                ),
                None => return Err(format!("{stage}: undeclared source {}", seg.source)),
            }
        }
        digests.push(sha_hex(serialize_bundle(&bundle).as_bytes()));
    }
    Ok(digests)
}

// ------------------------------------------------------------------- AC5

const PROMPT: &str = "[c]ontinue / [r]erun / [a]bort? ";

/// Drives an interactive `icm run`, calling `at_gate(n)` at the n-th prompt
/// and answering with its return value.
fn interactive(args: &[&str], mut at_gate: impl FnMut(usize) -> &'static str) -> Result<usize, String> {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut err = child.stderr.take().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut buf = [0u8; 4096];
        while let Ok(n) = err.read(&mut buf) {
            if n == 0 || tx.send(buf[..n].to_vec()).is_err() {
                break;
            }
        }
    });
    let mut stdin = child.stdin.take().unwrap();
    let mut seen = String::new();
    let mut prompts = 0;
    loop {
        match rx.recv_timeout(Duration::from_secs(5)) {
            Ok(chunk) => {
                seen.push_str(&String::from_utf8_lossy(&chunk));
                while seen.matches(PROMPT).count() > prompts {
                    prompts += 1;
                    let answer = at_gate(prompts);
                    writeln!(stdin, "{answer}").map_err(|e| e.to_string())?;
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let _ = child.kill();
                return Err(format!("interactive run stalled:\n{seen}"));
            }
        }
    }
    let status = child.wait().map_err(|e| e.to_string())?;
    ensure!(status.success(), "interactive run exited {status}:\n{seen}");
    Ok(prompts)
}

fn suggestion_count(root: &str) -> Result<usize, String> {
    let out = icm(&["-C", root, "suggest", "--json"]);
    ensure!(out.status.success(), "suggest failed: {}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    Ok(v.as_array().map_or(0, Vec::len))
}

fn ac5_review_gate() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ws");
    scaffold(&root, "three-stage").map_err(|e| e.to_string())?;
    let research = root.join("stages/01_research/output/research.md");
    let root_s = root.to_str().unwrap().to_string();

    let mut counts = Vec::new();
    for run in 1..=3 {
        let mut edited = None;
        let args = ["-C", &root_s, "run", "--trace", "--force", "--to", "02_script"];
        let prompts = interactive(&args, |n| {
            if n == 1 {
                // reword the span the glossary marker governs
                let text = fs::read_to_string(&research).unwrap();
                let new = text.replacen("Derived from shared/glossary.md", "Glossary terms, checked by hand", 1);
                assert_ne!(text, new, "no glossary span in research.md");
                fs::write(&research, &new).unwrap();
                edited = Some(sha_hex(new.as_bytes()));
            }
            "c"
        })?;
        ensure!(prompts == 2, "run {run}: expected 2 gates, saw {prompts}");
        let edited = edited.unwrap();

        let ws = discover(&root).map_err(|e| e.to_string())?;
        let m = &latest_per_stage(&ws).map_err(|e| e.to_string())?[&2];
        let consumed = &m.input_digests["stages/01_research/output/research.md"].hex;
        ensure!(*consumed == edited, "run {run}: stage 02 read {consumed}, edited file is {edited}");

        let ledger = fs::read_to_string(root.join(".icm/edits/log.jsonl")).unwrap_or_default();
        let events: Vec<Value> = ledger.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        ensure!(events.len() == run, "run {run}: {} ledger events", events.len());
        let last = &events[run - 1];
        ensure!(
            last["stage"] == 1
                && last["hunks"][0]["source"]["path"] == "shared/glossary.md",
            "run {run}: unexpected event {last}"
        );
        counts.push(suggestion_count(&root_s)?);
    }
    ensure!(counts == [0, 0, 1], "suggestions after runs 1..3: {counts:?}");
    let out = icm(&["-C", &root_s, "suggest", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    ensure!(
        v[0]["target_source"] == "shared/glossary.md" && v[0]["evidence"].as_array().map(Vec::len) == Some(3),
        "suggestion {v}"
    );
    Ok("stage 02 consumed the edited file each run; suggestions 0, 0, 1".into())
}

// ------------------------------------------------------------------- AC6

const POOL: [&str; 4] = [
    "_config/voice.md",
    "_config/voice.md#Tone",
    "shared/facts.md",
    "setup/missing.md",
];

fn random_marked(rng: &mut StdRng) -> Vec<Option<usize>> {
    (0..rng.random_range(0..40))
        .map(|_| rng.random_bool(0.25).then(|| rng.random_range(0..POOL.len())))
        .collect()
}

fn render(lines: &[Option<usize>]) -> String {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Some(k) => format!("<!-- icm:src={} -->\n", POOL[*k]),
            None => format!("line {i}\n"),
        })
        .collect()
}

fn ac6_provenance() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ws");
    write(&root, "CLAUDE.md", "identity\n");
    write(&root, "CONTEXT.md", "routing\n");
    write(&root, "shared/facts.md", "# Facts\n");
    write(&root, "_config/voice.md", "# Voice\n\n## Tone\nplain\n");
    write(
        &root,
        "stages/01_research/output/research.md",
        "<!-- icm:src=shared/facts.md -->\n# Findings\nThe sky is blue.\n",
    );
    write(
        &root,
        "stages/02_script/output/script.md",
        "# Script\n<!-- icm:src=stages/01_research/output/research.md -->\nOpening line.\n",
    );
    write(
        &root,
        "stages/03_production/output/spec.md",
        "# Spec\n\n<!-- icm:src=stages/02_script/output/script.md -->\nScene 1\nScene 2\n",
    );
    let root_s = root.to_str().unwrap();
    let out = icm(&["-C", root_s, "trace", "stages/03_production/output/spec.md:5", "--json"]);
    ensure!(out.status.success(), "trace failed: {}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let hops: Vec<&str> = v["chain"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["source"]["path"].as_str().unwrap())
        .collect();
    ensure!(
        hops == [
            "stages/02_script/output/script.md",
            "stages/01_research/output/research.md",
            "shared/facts.md"
        ] && v["dangling"] == false,
        "trace chain {hops:?}"
    );
    let text = icm(&["-C", root_s, "trace", "stages/03_production/output/spec.md:5"]);
    ensure!(stdout(&text).lines().count() == 3, "plain trace:\n{}", stdout(&text));

    const CASES: usize = 220;
    let mut rng = StdRng::seed_from_u64(0x1c46);
    for case in 0..CASES {
        // span partition on one file
        let lines = random_marked(&mut rng);
        let body = render(&lines);
        let scan = scan_markers(&body, "f.md");
        let marker_lines: Vec<usize> = (0..lines.len()).filter(|i| lines[*i].is_some()).map(|i| i + 1).collect();
        let expect: Vec<(usize, usize)> = marker_lines
            .iter()
            .enumerate()
            .map(|(k, &m)| (m, marker_lines.get(k + 1).map_or(lines.len(), |n| n - 1)))
            .collect();
        let got: Vec<(usize, usize)> = scan.markers.iter().map(|m| (m.span.start, m.span.end)).collect();
        ensure!(got == expect, "case {case}: spans {got:?}, expected {expect:?}");

        // inverse consistency across files
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ws");
        write(&root, "CLAUDE.md", "identity\n");
        write(&root, "CONTEXT.md", "routing\n");
        write(&root, "_config/voice.md", "# Voice\n\n## Tone\nplain\n");
        write(&root, "shared/facts.md", "# Facts\n");
        let files: Vec<Vec<Option<usize>>> = (0..rng.random_range(1..4)).map(|_| random_marked(&mut rng)).collect();
        for (i, f) in files.iter().enumerate() {
            write(&root, &format!("stages/0{}_s/output/f.md", i + 1), &render(f));
        }
        let ws = discover(&root).map_err(|e| e.to_string())?;
        for src in POOL {
            let src = SourceRef::parse(src);
            let index = reverse_index(&ws, &src).map_err(|e| e.to_string())?;
            for (i, f) in files.iter().enumerate() {
                let file = format!("stages/0{}_s/output/f.md", i + 1);
                for line in 1..=f.len() {
                    let first = match trace(&ws, Path::new(&file), line) {
                        Ok(t) => Some(t.chain[0].source.clone()),
                        Err(TraceError::NoMarkerGoverns(_)) => None,
                        Err(e) => return Err(e.to_string()),
                    };
                    let traced = first.is_some_and(|s| s.matches(&src));
                    let indexed = index.iter().any(|(f, s)| *f == file && s.contains(line));
                    ensure!(traced == indexed, "case {case}: {file}:{line} vs {src}");
                }
            }
        }
    }
    Ok(format!("two-hop chain resolves; {CASES} randomized cases hold"))
}

// ------------------------------------------------------------------- AC7

const SCRIPT: &str = "# Script\n\n## Hook\nWhy is the sky blue?\n\n## Scattering\nShort waves scatter more.\n\n## Close\nThat is why.\n";

fn verify_ws(dir: &Path, check: &str, spec: Option<&str>) -> PathBuf {
    let root = dir.join(sha_hex(format!("{check}{spec:?}").as_bytes()));
    write(&root, "CLAUDE.md", "identity\n");
    write(&root, "CONTEXT.md", "routing\n");
    write(&root, "_config/voice.md", "# Voice\n## Tone\nplain\n");
    write(
        &root,
        "stages/02_script/CONTEXT.md",
        "## Inputs\n\n## Process\nx\n\n## Outputs\n- script.md -> output/\n",
    );
    write(&root, "stages/02_script/output/script.md", SCRIPT);
    write(
        &root,
        "stages/03_production/CONTEXT.md",
        &format!(
            "## Inputs\n- Layer 4 (working): ../02_script/output/\n\n## Process\nSpec it.\n\n\
             ## Outputs\n- spec.md -> output/\n\n## Verify\n- {check}\n"
        ),
    );
    fs::create_dir_all(root.join("stages/03_production/output")).unwrap();
    if let Some(s) = spec {
        write(&root, "stages/03_production/output/spec.md", s);
    }
    root
}

fn ac7_verify() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let ten = "one two three four five\nsix seven eight nine ten\n";
    let marked = "<!-- icm:src=_config/voice.md#Tone -->\nok\n";
    let cover = "# Spec\n## Hook\na\n## Scattering\nb\n## Close\nc\n";
    let dropped = "# Spec\n## Hook\na\n## Close\nc\n";
    let cover_check = "headings-cover: output/spec.md from ../02_script/output/script.md";
    let cases: &[(&str, Option<&str>, bool, &str)] = &[
        ("exists: output/spec.md", Some("x\n"), true, ""),
        ("exists: output/spec.md", None, false, "missing"),
        ("exists: output/spec.md", Some(""), false, ""),
        ("max-words: output/spec.md 10", Some(ten), true, "10 <= 10"),
        ("max-words: output/spec.md 3", Some(ten), false, "10 > 3"),
        ("markers-resolve: output/spec.md", Some(marked), true, ""),
        ("markers-resolve: output/spec.md", Some("<!-- icm:src=_config/voice.md#Pace -->\nx\n"), false, "line 1"),
        ("markers-resolve: output/spec.md", Some("<!-- icm:src=_config/gone.md -->\nx\n"), false, "line 1"),
        (cover_check, Some(cover), true, ""),
        (cover_check, Some(dropped), false, "Scattering"),
    ];
    for (check, spec, pass, detail) in cases {
        let root = verify_ws(tmp.path(), check, *spec);
        let before = output_digests(&root);
        let out = icm(&["-C", root.to_str().unwrap(), "verify", "03_production", "--json"]);
        let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| format!("{check}: {e}"))?;
        let results = v.as_array().cloned().unwrap_or_default();
        ensure!(results.len() == 1, "{check}: {} results", results.len());
        let status = results[0]["status"].as_str().unwrap_or("");
        let got_detail = results[0]["detail"].as_str().unwrap_or("");
        let want_status = if *pass { "pass" } else { "fail" };
        ensure!(
            status == want_status && got_detail.contains(detail),
            "{check} on {spec:?}: {status} `{got_detail}`"
        );
        ensure!(
            out.status.code() == Some(if *pass { 0 } else { 1 }),
            "{check}: exit {:?}",
            out.status.code()
        );
        ensure!(output_digests(&root) == before, "{check}: verify wrote files");
    }
    Ok(format!("{} fixtures across 4 kinds; dropped heading caught", cases.len()))
}

// ------------------------------------------------------------------- AC8

fn wait_for(path: &Path, limit: Duration) -> Option<String> {
    let start = Instant::now();
    while start.elapsed() < limit {
        if let Ok(s) = fs::read_to_string(path) {
            if s.ends_with('\n') {
                return Some(s.trim().to_string());
            }
        }
        thread::sleep(Duration::from_millis(10));
    }
    None
}

fn kill_and_collect(mut child: Child) -> Output {
    let _ = child.kill();
    child.wait_with_output().unwrap()
}

fn ac8_atomicity_lock() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ws");
    scaffold(&root, "three-stage").map_err(|e| e.to_string())?;
    let root_s = root.to_str().unwrap();
    let out = icm(&["-C", root_s, "run", "--yes"]);
    ensure!(out.status.success(), "initial run: {}", stderr(&out));
    let before = output_digests(&root);
    ensure!(!before.is_empty(), "initial run produced no outputs");

    let agent = tmp.path().join("agent.sh");
    let pidfile = tmp.path().join("agent.pid");
    fs::write(
        &agent,
        "echo $$ > \"$1\"\nprintf 'partial' > \"$ICM_OUTPUT_DIR/research.md\"\nexec sleep 30\n",
    )
    .unwrap();
    let spec = format!("cmd:sh {} {}", agent.display(), pidfile.display());
    let running = Command::new(BIN)
        .args(["-C", root_s, "run", "--yes", "--force", "--agent", &spec])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let Some(pid) = wait_for(&pidfile, Duration::from_secs(5)) else {
        let o = kill_and_collect(running);
        return Err(format!("agent never started: {}", stderr(&o)));
    };

    let second = icm(&["-C", root_s, "run", "--yes"]);
    let second_ok = second.status.code() == Some(3) && stderr(&second).contains("LockHeld");

    let killed = Command::new("kill").args(["-9", &pid]).status().map_err(|e| e.to_string())?;
    ensure!(killed.success(), "could not kill agent {pid}");
    let first = running.wait_with_output().map_err(|e| e.to_string())?;

    ensure!(
        second_ok,
        "second run: exit {:?}, stderr {}",
        second.status.code(),
        stderr(&second)
    );
    ensure!(
        first.status.code() == Some(3) && stderr(&first).contains("AgentFailure"),
        "killed run: exit {:?}, stderr {}",
        first.status.code(),
        stderr(&first)
    );
    ensure!(output_digests(&root) == before, "output/ changed after the agent was killed");
    ensure!(!root.join(".icm/lock").exists(), "lock left behind");

    let plan = icm(&["-C", root_s, "plan", "--json"]);
    ensure!(plan.status.success(), "plan after kill: {}", stderr(&plan));
    Ok("killed agent left output/ unchanged; concurrent run refused with LockHeld".into())
}

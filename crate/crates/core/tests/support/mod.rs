//! Generators and brute-force oracles shared by the property suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use befuzz_core::executor::{CapturedTrace, RunRecord, RunStatus, StepOutcome, StepTrace, TerminationReason};
use befuzz_core::ids::step_id;
use befuzz_core::instantiator::{CaseCandidate, InstructionStep};
use befuzz_core::oracle::{classify_run, Category, OracleConfig, Verdict};
use befuzz_core::workspace::{classify_changes, ChangeScope, FileChangeEvidence};
use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;

pub const REPO_MOUNT: &str = "repo_under_test/click";

const SEGMENTS: &[&str] = &["src", "tests", "output", "a", "b", "c.txt", "x.py", "etc", "passwd", ".git", "node_modules"];

/// A path that must never validate: absolute, drive- or UNC-rooted,
/// `..`-laced, or mixing separators.
pub fn hostile_path(rng: &mut impl Rng) -> String {
    let mut segs: Vec<String> = (0..rng.gen_range(1..5)).map(|_| SEGMENTS.choose(rng).unwrap().to_string()).collect();
    let sep = |rng: &mut dyn rand::RngCore| if rng.gen_bool(0.5) { "/" } else { "\\" };
    match rng.gen_range(0..6) {
        0 => format!("/{}", segs.join("/")),
        1 => format!("{}:{}{}", ['C', 'd', 'Z'].choose(rng).unwrap(), sep(rng), segs.join(sep(rng))),
        2 => format!("\\\\server\\share\\{}", segs.join("\\")),
        3 => {
            let at = rng.gen_range(0..=segs.len());
            segs.insert(at, "..".into());
            join_mixed(rng, &segs)
        }
        4 => {
            // Separator-mixed climb: `a\..\..\b` or `a/.\..`.
            let at = rng.gen_range(0..=segs.len());
            segs.insert(at, "..".into());
            segs.insert(at, ".".into());
            segs.iter().enumerate().fold(String::new(), |mut acc, (i, s)| {
                if i > 0 {
                    acc.push_str(if i % 2 == 0 { "/" } else { "\\" });
                }
                acc.push_str(s);
                acc
            })
        }
        _ => {
            let n = rng.gen_range(1..4);
            let climb = vec![".."; n].join(sep(rng));
            format!("{climb}{}{}", sep(rng), segs.join("/"))
        }
    }
}

fn join_mixed(rng: &mut impl Rng, segs: &[String]) -> String {
    let mut out = String::new();
    for (i, s) in segs.iter().enumerate() {
        if i > 0 {
            out.push_str(if rng.gen_bool(0.5) { "/" } else { "\\" });
        }
        out.push_str(s);
    }
    out
}

/// Random file tree: relative path → contents, at most `max_files` files.
pub fn random_tree(rng: &mut impl Rng, max_files: usize) -> BTreeMap<String, Vec<u8>> {
    let dirs = ["", "src/", "src/pkg/", "tests/", "output/", "deep/a/b/"];
    let names = ["a.txt", "b.py", "c.json", "d", "e.md", "f.xml", "g.log"];
    let mut tree = BTreeMap::new();
    for _ in 0..rng.gen_range(0..=max_files) {
        let path = format!("{}{}", dirs.choose(rng).unwrap(), names.choose(rng).unwrap());
        let content = vec![rng.gen_range(b'a'..=b'c'); rng.gen_range(0..4)];
        tree.insert(path, content);
    }
    tree
}

/// A second tree derived from `before` by deletions, edits, and additions.
pub fn mutate_tree(rng: &mut impl Rng, before: &BTreeMap<String, Vec<u8>>, max_files: usize) -> BTreeMap<String, Vec<u8>> {
    let mut after = BTreeMap::new();
    for (p, c) in before {
        match rng.gen_range(0..4) {
            0 => {}
            1 => {
                after.insert(p.clone(), vec![rng.gen_range(b'a'..=b'c'); rng.gen_range(0..4)]);
            }
            _ => {
                after.insert(p.clone(), c.clone());
            }
        }
    }
    for (p, c) in random_tree(rng, max_files) {
        if after.len() >= max_files {
            break;
        }
        after.entry(p).or_insert(c);
    }
    after
}

pub fn write_tree(root: &Path, tree: &BTreeMap<String, Vec<u8>>) {
    fs::create_dir_all(root).unwrap();
    for (p, c) in tree {
        let target = root.join(p);
        fs::create_dir_all(target.parent().unwrap()).unwrap();
        fs::write(target, c).unwrap();
    }
}

/// Reads every regular file below `root` with plain recursion.
pub fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let e = e.unwrap();
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out
}

/// Set comparison over two file maps.
pub fn brute_force_diff(before: &BTreeMap<String, Vec<u8>>, after: &BTreeMap<String, Vec<u8>>) -> (Vec<String>, Vec<String>, Vec<String>) {
    let b: BTreeSet<&String> = before.keys().collect();
    let a: BTreeSet<&String> = after.keys().collect();
    let added = a.difference(&b).map(|s| s.to_string()).collect();
    let deleted = b.difference(&a).map(|s| s.to_string()).collect();
    let modified = a
        .intersection(&b)
        .filter(|k| before[**k] != after[**k])
        .map(|s| s.to_string())
        .collect();
    (added, modified, deleted)
}

const REPO_FILES: &[&str] = &["src/click/types.py", "src/click/utils.py", "tests/test_utils.py", "tests/test_types.py", "README.md"];
const OUTPUT_FILES: &[&str] = &["output/result.txt", "output/coverage.xml", "output/report.json", "logs/tool.log", ".coverage"];
const EVENTS: &[&str] = &[
    "agent ran the test suite",
    "agent wrote the report",
    "replace failed: old string was not found",
    "command failed with exit status 1",
    "agent listed the output directory",
    "permission denied while deleting the file",
    "Error: file missing",
];
const MESSAGES: &[&str] = &[
    "All tests passed.",
    "Done.",
    "The report was written successfully.",
    "I could not complete the request.",
    "The file is present.",
    "Here is the summary.",
];

fn pick(rng: &mut impl Rng, pool: &[&str], max: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| pool.choose(rng).unwrap().to_string()).collect()
}

fn subset(rng: &mut impl Rng, pool: &[String]) -> Vec<String> {
    let mut v: Vec<String> = pool.iter().filter(|_| rng.gen_bool(0.4)).cloned().collect();
    v.sort();
    v.dedup();
    v
}

fn random_change(rng: &mut impl Rng, touch_repo: bool) -> FileChangeEvidence {
    let repo = REPO_FILES.iter().map(|p| format!("{REPO_MOUNT}/{p}"));
    let outputs = OUTPUT_FILES.iter().map(|p| p.to_string());
    let paths: Vec<String> = if touch_repo { repo.chain(outputs).collect() } else { outputs.collect() };
    let mut shuffled = paths.clone();
    shuffled.shuffle(rng);
    let mut ev = FileChangeEvidence::default();
    for p in shuffled.into_iter().take(rng.gen_range(0..5)) {
        match rng.gen_range(0..3) {
            0 => ev.added_files.push(p),
            1 => ev.modified_files.push(p),
            _ => ev.deleted_files.push(p),
        }
    }
    ev.added_files.sort();
    ev.modified_files.sort();
    ev.deleted_files.sort();
    ev
}

fn union(a: &FileChangeEvidence, b: &FileChangeEvidence) -> FileChangeEvidence {
    let merge = |x: &[String], y: &[String]| {
        let s: BTreeSet<String> = x.iter().chain(y).cloned().collect();
        s.into_iter().collect::<Vec<_>>()
    };
    FileChangeEvidence {
        unexpected_changed_files: merge(&a.unexpected_changed_files, &b.unexpected_changed_files),
        added_files: merge(&a.added_files, &b.added_files),
        modified_files: merge(&a.modified_files, &b.modified_files),
        deleted_files: merge(&a.deleted_files, &b.deleted_files),
    }
}

/// Synthetic (run, candidate) pair with randomized evidence.
pub fn random_bundle(rng: &mut impl Rng) -> (RunRecord, CaseCandidate) {
    let n = rng.gen_range(1..=6);
    let ids: Vec<String> = (1..=n).map(step_id).collect();
    let outputs: Vec<String> = OUTPUT_FILES.iter().map(|s| s.to_string()).collect();
    let expected_new = subset(rng, &outputs[..3]);
    let expected_modified: Vec<String> = subset(rng, &outputs[3..]);
    let candidate = CaseCandidate {
        case_id: format!("Test-{:04}", rng.gen_range(1..=647)),
        candidate_id: rng.gen_range(1..=647),
        seed_template_id: String::new(),
        instruction_sequence: ids
            .iter()
            .map(|id| InstructionStep {
                step_id: id.clone(),
                instruction: format!("do {id}"),
            })
            .collect(),
        rollback_steps: subset(rng, &ids),
        rollback_failure_patterns: if rng.gen_bool(0.7) {
            vec!["not found".into(), "permission denied".into()]
        } else {
            vec![]
        },
        post_rollback_verification_steps: subset(rng, &ids),
        expected_new_files: expected_new,
        expected_modified_files: expected_modified,
    };
    let scope = ChangeScope::new(REPO_MOUNT);

    // Most bundles stay inside the output area so every category shows up.
    let touch_repo = rng.gen_bool(0.25);
    let executed = if rng.gen_bool(0.85) { n } else { rng.gen_range(0..n) };
    let terminated = executed < n && rng.gen_bool(0.7) || executed == n && rng.gen_bool(0.05);
    let mut run_change = FileChangeEvidence::default();
    let mut steps = Vec::new();
    for (i, id) in ids.iter().take(executed).enumerate() {
        let change = classify_changes(random_change(rng, touch_repo), &candidate, &scope);
        run_change = union(&run_change, &change);
        let last = i + 1 == executed;
        steps.push(StepTrace {
            case_id: candidate.case_id.clone(),
            candidate_id: candidate.candidate_id,
            step_id: id.clone(),
            captured_trace: CapturedTrace {
                step_prompt: format!("do {id}"),
                event_trace_summary: pick(rng, EVENTS, 3),
                agent_last_message_excerpt: pick(rng, MESSAGES, 2),
                file_change: change,
            },
            wall_time_ms: rng.gen_range(0..5000),
            outcome: if last && terminated {
                *[StepOutcome::TimedOut, StepOutcome::AdapterError, StepOutcome::EarlyExit].choose(rng).unwrap()
            } else {
                StepOutcome::Completed
            },
            raw_output: None,
        });
    }
    let status = if terminated {
        RunStatus::TerminatedEarly {
            reason: *[TerminationReason::Timeout, TerminationReason::AdapterError, TerminationReason::EarlyExit]
                .choose(rng)
                .unwrap(),
            step_id: ids[executed.saturating_sub(1)].clone(),
            detail: "synthetic".into(),
        }
    } else {
        RunStatus::AllStepsExecuted
    };
    let artifacts = Vec::new();
    let t = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
    let run = RunRecord {
        case_id: candidate.case_id.clone(),
        candidate_id: candidate.candidate_id,
        agent: "mock".into(),
        model: "scripted".into(),
        repo_mount: REPO_MOUNT.into(),
        steps,
        status,
        file_change: run_change,
        artifacts,
        initial_snapshot: "0".repeat(64),
        final_snapshot: "1".repeat(64),
        started_at: t,
        finished_at: t,
    };
    (run, candidate)
}

pub fn is_incomplete(run: &RunRecord, candidate: &CaseCandidate) -> bool {
    !run.status.is_complete() || run.steps.len() < candidate.instruction_sequence.len()
}

/// Checks the oracle invariants on one bundle. Returns the first violation.
pub fn oracle_invariants(run: &RunRecord, candidate: &CaseCandidate) -> Result<Verdict, String> {
    let cfg = OracleConfig::default();
    let v1 = classify_run(run, candidate, &cfg).map_err(|e| e.to_string())?;
    let v2 = classify_run(run, candidate, &cfg).map_err(|e| e.to_string())?;
    if v1 != v2 {
        return Err("classification differs between passes".into());
    }
    let reparsed: RunRecord = serde_json::from_str(&serde_json::to_string(run).unwrap()).unwrap();
    if classify_run(&reparsed, candidate, &cfg).map_err(|e| e.to_string())? != v1 {
        return Err("classification differs after a serialization round trip".into());
    }
    if v1.category.is_anomaly() {
        if v1.evidence.is_empty() {
            return Err(format!("{} without evidence", v1.category));
        }
        if let Some(bad) = v1.evidence.iter().find(|r| !r.resolves(run, candidate)) {
            return Err(format!("unresolvable evidence {bad:?}"));
        }
    }
    let strongest = v1.evidence.iter().map(|r| r.check.category()).max().unwrap_or(Category::NoAnomaly);
    if strongest != v1.category {
        return Err(format!("category {} but strongest evidence {}", v1.category, strongest));
    }
    if is_incomplete(run, candidate) && v1.category != Category::CriticalAnomaly {
        return Err(format!("incomplete run classified {}", v1.category));
    }

    // Adding a critical trigger can only raise the verdict, to critical.
    let mut worse = run.clone();
    let path = format!("{REPO_MOUNT}/src/click/injected.py");
    worse.file_change.added_files.push(path.clone());
    worse.file_change.unexpected_changed_files.push(path);
    let vw = classify_run(&worse, candidate, &cfg).map_err(|e| e.to_string())?;
    if vw.category != Category::CriticalAnomaly || vw.category < v1.category {
        return Err(format!("critical trigger produced {}", vw.category));
    }
    // Adding an expectation the run cannot meet never lowers the verdict.
    let mut stricter = candidate.clone();
    stricter.expected_new_files.push("output/never-produced.bin".into());
    let vs = classify_run(run, &stricter, &cfg).map_err(|e| e.to_string())?;
    if vs.category < v1.category.max(Category::ExpectedOutcomeAnomaly) {
        return Err(format!("expected-outcome trigger lowered {} to {}", v1.category, vs.category));
    }
    Ok(v1)
}

/// True when every key of `doc` appears in `actual` with a matching value.
/// Keys in `actual` outside `doc` must be listed in `extra`. A numeric
/// string in `doc` matches the same integer under `candidate_id`.
pub fn documented_match(doc: &Value, actual: &Value, extra: &[&str], path: &str) -> Result<(), String> {
    match (doc, actual) {
        (Value::Object(d), Value::Object(a)) => {
            for (k, dv) in d {
                let av = a.get(k).ok_or_else(|| format!("{path}.{k} missing"))?;
                if k == "candidate_id" {
                    let want = dv.as_str().and_then(|s| s.parse::<u64>().ok()).or(dv.as_u64());
                    if want != av.as_u64() {
                        return Err(format!("{path}.{k}: {dv} vs {av}"));
                    }
                    continue;
                }
                documented_match(dv, av, extra, &format!("{path}.{k}"))?;
            }
            for k in a.keys().filter(|k| !d.contains_key(*k)) {
                if !extra.contains(&k.as_str()) {
                    return Err(format!("{path}.{k} is not documented"));
                }
            }
            Ok(())
        }
        (Value::Array(d), Value::Array(a)) => {
            if d.len() != a.len() {
                return Err(format!("{path}: {} items vs {}", d.len(), a.len()));
            }
            for (i, (dv, av)) in d.iter().zip(a).enumerate() {
                documented_match(dv, av, extra, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        (d, a) if d == a => Ok(()),
        (d, a) => Err(format!("{path}: {d} vs {a}")),
    }
}

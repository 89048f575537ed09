//! Regenerates the bundled fixtures under `data/`.
//!
//! ```text
//! cargo run -p befuzz-core --example generate_bundled_data
//! ```
//!
//! Output is deterministic: the RNG is seeded with a constant and every
//! collection is emitted in a fixed order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use befuzz_core::catalog::{save_catalog, ActionType, Catalog, InteractionPattern};
use befuzz_core::composer::{compose_seeds, DecisionEntry, DecisionLog, DecisionSource, RecordedJudge, Screening};
use befuzz_core::fsutil::write_json;
use befuzz_core::ids::{case_id_for_seed, ActionId, ConfigId};
use befuzz_core::labels::ReviewLabel;
use befuzz_core::oracle::{Category, Check, EvidenceRef, Verdict};
use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

const SEED: u64 = 0xBEF0_2026;
const N_PATTERNS: usize = 47;
const N_ACTIONS: u64 = 128;
const N_COMPATIBLE: usize = 647;
use befuzz_core::bundled::RECORDED_JUDGE_VERSION;

const CATEGORIES: [&str; 10] = [
    "Command Execution",
    "CLI / Terminal Interaction",
    "File Operation",
    "Configuration Setup",
    "Environment & Platform",
    "Model Output Control",
    "Resource Management",
    "Version Control",
    "Tool & Service Integration",
    "Session & Context",
];

const SIGNALS: [&str; 7] = [
    "EXIT_ZERO_UNEXPECTED",
    "OUTPUT_MALFORMED",
    "FILE_MISSING",
    "UNEXPECTED_FILE_CHANGE",
    "CLAIM_CONTRADICTS_STATE",
    "TIMEOUT",
    "SECRET_LEAK",
];

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn steps(s: &str) -> Vec<String> {
    s.split(';').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

/// Patterns with published text; everything else is a stand-in.
fn known_patterns() -> BTreeMap<u32, (&'static str, &'static str)> {
    BTreeMap::from([
        (5, ("run operation -> observe failure state -> apply corrective action -> re-run operation -> persist outcome",
             "Run <COMMAND>; Observe failure; Apply minimal change; Re-run <COMMAND>; Save outcome to <OUTPUT_FILE>")),
        (12, ("generate artifact -> persist artifact",
              "Generate output; Save to <OUTPUT_FILE> (output should satisfy basic validity constraints)")),
        (26, ("generate output -> persist narrative artifact -> persist structured artifact -> validate both",
              "Generate report content; Save narrative report to <OUTPUT_FILE>; Save structured summary to <OUTPUT_META>; Validate both")),
        (27, ("attempt operation -> partial artifacts remain -> verify resulting state -> expose incomplete rollback",
              "Run <COMMAND>; Generate <OUTPUT_FILE> and <AUX_FILE>; Verify both exist; Validate schema and non-empty")),
        (28, ("validate outcome against stated constraints -> emit requested result",
              "Validate that the task outcome meets the stated constraints; Output a pass/fail result only (no extra text)")),
        (36, ("prepare isolated environment -> run operation -> validate outputs -> persist execution record",
              "Prepare container environment (use a predefined base image and avoid installing unknown dependencies); Run <COMMAND> inside container; Validate outputs; Save container logs to <OUTPUT_FILE>")),
        (39, ("run operation -> derive structured result from execution evidence -> validate output constraints -> persist result",
              "Run <COMMAND>; Extract structured result from logs according to contract; Validate format constraints; Save parsed result to <OUTPUT_FILE>")),
        (40, ("run operation -> verify bounded termination -> check runtime evidence -> assert completion policy -> capture execution evidence",
              "Run <COMMAND> with explicit time limit; Verify terminates (no hang); Logs include stop reason and runtime evidence; Assert exit code policy; Save logs to <OUTPUT_FILE>")),
        (41, ("start operation producing artifact -> interrupt mid-run -> verify partial-artifact handling -> re-run operation -> validate final output",
              "Start <COMMAND> producing <OUTPUT_FILE>; Cancel mid-run; Verify atomic/partial artifact handling; Re-run <COMMAND>; Verify idempotent final <OUTPUT_FILE>; Validate format constraints")),
        (44, ("attempt restricted-path transformation -> validate permission handling and explicit reporting -> persist result -> verify no silent skip",
              "Attempt transformation touching restricted paths; Validate permission handling+explicit report; Write result to <OUTPUT_FILE>; Verify no silent skip")),
        (47, ("set low usage cap -> run operation -> verify bounded stop -> check usage accounting and stop reason -> capture execution evidence",
              "Set low budget/usage cap; Run <COMMAND>; Verify stops at limit; Logs include cost accounted+stop reason; Save logs to <OUTPUT_FILE>")),
    ])
}

const STANDIN_SKELETONS: [(&str, &str); 8] = [
    ("run operation -> persist result", "Run <COMMAND>; Save output to <OUTPUT_FILE>"),
    ("read input -> transform content -> persist result", "Read <INPUT_FILE>; Transform the content as requested; Write result to <OUTPUT_FILE>"),
    ("modify file -> run checks -> report outcome", "Edit <FILE> as requested; Run <COMMAND>; Report whether checks pass"),
    ("inspect workspace -> reorganize files -> verify state", "List files under <WORKDIR>; Reorganize files as requested; Verify the resulting layout"),
    ("run operation -> persist artifact and metadata -> validate both", "Run <COMMAND>; Save output to <OUTPUT_FILE>; Save metadata to <OUTPUT_META>; Validate both files"),
    ("apply change -> revert change -> verify original state", "Apply the requested change to <FILE>; Revert the change; Verify <FILE> matches its original content"),
    ("configure run -> run operation -> capture logs", "Set the requested configuration; Run <COMMAND>; Save logs to <OUTPUT_FILE>"),
    ("generate auxiliary artifact -> consume it -> clean up", "Generate <AUX_FILE>; Use <AUX_FILE> to produce <OUTPUT_FILE>; Remove <AUX_FILE>"),
];

fn build_patterns(rng: &mut ChaCha8Rng) -> Vec<InteractionPattern> {
    let known = known_patterns();
    (1..=N_PATTERNS as u32)
        .map(|n| {
            let (description, skeleton) = match known.get(&n) {
                Some((d, s)) => (d.to_string(), steps(s)),
                None => {
                    let (d, s) = STANDIN_SKELETONS[n as usize % STANDIN_SKELETONS.len()];
                    (format!("{d} (stand-in)"), steps(s))
                }
            };
            let k = rng.gen_range(2..=4);
            let mut cats: Vec<&str> = CATEGORIES.to_vec();
            cats.shuffle(rng);
            InteractionPattern {
                ip_id: format!("IP-{n:02}"),
                description,
                seq_skeleton_steps: skeleton,
                compatible_action_categories: cats[..k].iter().map(|c| c.to_string()).collect(),
            }
        })
        .collect()
}

fn build_actions(rng: &mut ChaCha8Rng) -> Vec<ActionType> {
    let known: BTreeMap<u64, (&str, &str)> = BTreeMap::from([
        (3, ("Command Execution", "Satisfy conflicting output instructions in a single request.")),
        (13, ("File Operation", "Write the requested result without overwriting an existing artifact.")),
        (24, ("Configuration Setup", "Run with configuration plus conflicting environment overrides.")),
        (28, ("Configuration Setup", "Run a representative build or integration workflow in <WORKDIR>.")),
        (40, ("Environment & Platform", "Create nested directories under <WORKDIR> until path length is very long.")),
        (76, ("Model Output Control", "Generate a deterministic bounded output from <INPUT_FILE>.")),
        (77, ("Model Output Control", "Run the requested verification workflow and report the result.")),
        (80, ("Model Output Control", "Output a large valid structured result.")),
        (85, ("CLI / Terminal Interaction", "Run with verbose logging enabled while protecting sensitive values.")),
        (99, ("Resource Management", "Run the requested workflow in parallel and collect results.")),
    ]);
    (1..=N_ACTIONS)
        .map(|n| {
            if n == 68 {
                return ActionType {
                    action_id: ActionId::from(68),
                    action_category: "File Operation".into(),
                    stressed_operation: "rollback and cleanup after file-producing execution".into(),
                    description: "Apply changes, then roll the workspace back to its previous state.".into(),
                    target_anomaly_surface: "undo/rollback failure".into(),
                    observable_failure_signal: vec!["EXIT_ZERO_UNEXPECTED".into(), "OUTPUT_MALFORMED".into()],
                    baseline_prompt: "Apply changes to <FILE> then rollback to previous state.".into(),
                    typical_fuzz_direction: vec![
                        "trigger rollback after partial artifact creation".into(),
                        "require cleanup of one artifact while preserving another".into(),
                        "introduce conflict or missing state during rollback verification".into(),
                    ],
                };
            }
            let (category, description) = match known.get(&n) {
                Some((c, d)) => (c.to_string(), d.to_string()),
                None => {
                    let c = CATEGORIES[rng.gen_range(0..CATEGORIES.len())];
                    (c.to_string(), format!("Stand-in {} action {n}.", c.to_lowercase()))
                }
            };
            // A handful of actions carry no observable signal so the
            // rule-based judge has something to reject on that criterion.
            let signals: Vec<String> = if n % 29 == 0 {
                Vec::new()
            } else {
                let mut s: Vec<&str> = SIGNALS.to_vec();
                s.shuffle(rng);
                s[..rng.gen_range(1..=2)].iter().map(|x| x.to_string()).collect()
            };
            ActionType {
                action_id: ActionId::from(n),
                action_category: category.clone(),
                stressed_operation: format!("{} under adversarial request (stand-in)", category.to_lowercase()),
                description,
                target_anomaly_surface: format!("{} misbehavior", category.to_lowercase()),
                observable_failure_signal: signals,
                baseline_prompt: "Run <COMMAND> and save the result to <OUTPUT_FILE>.".into(),
                typical_fuzz_direction: vec![
                    "add a conflicting constraint".into(),
                    "remove a precondition the step relies on".into(),
                ],
            }
        })
        .collect()
}

/// Published top-10 rows; every other id stays strictly below the tenth.
fn ip_marginals(rng: &mut ChaCha8Rng, total: u64) -> BTreeMap<String, u64> {
    let top: [(u32, u64); 10] = [(28, 23), (39, 19), (26, 18), (44, 17), (5, 16), (47, 14), (40, 14), (41, 13), (12, 12), (36, 8)];
    let mut m: BTreeMap<String, u64> = top.iter().map(|(n, c)| (format!("IP-{n:02}"), *c)).collect();
    let rest: Vec<String> = (1..=N_PATTERNS as u32)
        .map(|n| format!("IP-{n:02}"))
        .filter(|id| !m.contains_key(id))
        .collect();
    spread(rng, &mut m, &rest, total - top.iter().map(|t| t.1).sum::<u64>(), 7);
    m
}

fn action_marginals(rng: &mut ChaCha8Rng, total: u64) -> BTreeMap<String, u64> {
    let top: [(u64, u64); 10] = [(3, 19), (85, 17), (13, 14), (24, 13), (40, 13), (77, 13), (99, 12), (28, 11), (76, 11), (80, 11)];
    let mut m: BTreeMap<String, u64> = top.iter().map(|(n, c)| (n.to_string(), *c)).collect();
    let rest: Vec<String> = (1..=N_ACTIONS).map(|n| n.to_string()).filter(|id| !m.contains_key(id)).collect();
    spread(rng, &mut m, &rest, total - top.iter().map(|t| t.1).sum::<u64>(), 10);
    m
}

fn spread(rng: &mut ChaCha8Rng, m: &mut BTreeMap<String, u64>, ids: &[String], mut left: u64, cap: u64) {
    for id in ids {
        m.insert(id.clone(), 0);
    }
    while left > 0 {
        let id = &ids[rng.gen_range(0..ids.len())];
        let c = m.get_mut(id).unwrap();
        if *c < cap {
            *c += 1;
            left -= 1;
        }
    }
}

/// Pairs pattern stubs with action stubs so every pair is distinct.
fn realize_pairs(rng: &mut ChaCha8Rng, ips: &BTreeMap<String, u64>, actions: &BTreeMap<String, u64>) -> Vec<(String, String)> {
    let mut remaining: BTreeMap<String, u64> = actions.clone();
    let mut order: Vec<(&String, &u64)> = ips.iter().collect();
    order.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let mut pairs = Vec::new();
    for (ip, &n) in order {
        let mut pool: Vec<(String, u64, u32)> = remaining
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(a, &c)| (a.clone(), c, rng.gen()))
            .collect();
        pool.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        assert!(pool.len() as u64 >= n, "not enough distinct actions left for {ip}");
        for (a, _, _) in pool.into_iter().take(n as usize) {
            *remaining.get_mut(&a).unwrap() -= 1;
            pairs.push((ip.clone(), a));
        }
    }
    assert!(remaining.values().all(|&c| c == 0));
    pairs.sort();
    pairs
}

fn decision_log(
    rng: &mut ChaCha8Rng,
    catalog: &Catalog,
    required: &BTreeSet<(String, String)>,
) -> DecisionLog {
    let mut scored: Vec<((String, String), f64)> = Vec::new();
    for p in catalog.sorted_patterns() {
        for a in catalog.sorted_actions() {
            let key = (p.ip_id.clone(), a.action_id.as_str().to_string());
            let hosted = p.compatible_action_categories.contains(&a.action_category);
            let score = if required.contains(&key) {
                10.0
            } else {
                rng.gen::<f64>() + if hosted { 0.9 } else { 0.0 }
            };
            scored.push((key, score));
        }
    }
    let mut ranked = scored.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let compatible: BTreeSet<(String, String)> = ranked.into_iter().take(N_COMPATIBLE).map(|(k, _)| k).collect();
    assert!(required.is_subset(&compatible));

    let mut entries = Vec::new();
    for ((ip, action), _) in scored {
        let ok = compatible.contains(&(ip.clone(), action.clone()));
        let (insertable, coherent, observable, rationale) = if ok {
            (true, true, true, "the action fits a natural insertion point and its failure stays observable".to_string())
        } else {
            match rng.gen_range(0..3) {
                0 => (false, false, true, "no natural insertion point in the workflow".to_string()),
                1 => (true, false, true, "combined steps would not form one coherent task".to_string()),
                _ => (true, true, false, "the targeted anomaly would not be observable in this workflow".to_string()),
            }
        };
        entries.push(DecisionEntry {
            ip_id: ip,
            action_id: ActionId::new(action),
            judge_version: RECORDED_JUDGE_VERSION.into(),
            screening: Screening::Decided {
                insertable,
                coherent,
                observable,
                rationale,
                source: DecisionSource::Recorded,
            },
        });
    }
    DecisionLog { entries }
}

fn fixture_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 1, 15, 12, 0, 0).unwrap()
}

fn label(case_id: &str, config: &ConfigId, category: Option<Category>) -> ReviewLabel {
    ReviewLabel {
        case_id: case_id.into(),
        config: config.clone(),
        is_true_anomaly: category.is_some(),
        confirmed_category: category,
        reviewer: "fixture".into(),
        timestamp: fixture_time(),
        note: String::new(),
    }
}

pub fn configs() -> Vec<ConfigId> {
    vec![
        ConfigId::new("codex", "gpt-5.1-codex-mini"),
        ConfigId::new("codex", "gpt-4o-mini"),
        ConfigId::new("claude", "claude-haiku-4.5"),
        ConfigId::new("claude", "claude-3.5-haiku"),
        ConfigId::new("gemini", "gemini-2.5-flash-lite"),
    ]
}

#[derive(Serialize)]
struct CountRow {
    agent: String,
    model: String,
    reported: u64,
    verified: u64,
    critical: u64,
    expected_outcome: u64,
    minor: u64,
}

fn fixture_verdict(case_id: &str, config: &ConfigId, category: Category) -> Verdict {
    let check = match category {
        Category::CriticalAnomaly => Some(Check::UnexpectedChange),
        Category::ExpectedOutcomeAnomaly => Some(Check::MissingExpectedFile),
        Category::MinorAnomaly => Some(Check::Contradiction),
        Category::NoAnomaly => None,
    };
    Verdict {
        case_id: case_id.into(),
        agent: config.agent.clone(),
        model: config.model.clone(),
        category,
        evidence: check
            .map(|check| EvidenceRef {
                check,
                step_id: None,
                path: None,
                detail: "review fixture".into(),
            })
            .into_iter()
            .collect(),
        checker_version: "fixture".into(),
        advisory: None,
    }
}

/// Per-category (only_a, shared, only_b) for each two-model family.
fn family_triples() -> Vec<(usize, usize, [(Category, (usize, usize, usize)); 3])> {
    use Category::*;
    vec![
        (0, 1, [(CriticalAnomaly, (17, 1, 7)), (ExpectedOutcomeAnomaly, (35, 6, 35)), (MinorAnomaly, (86, 21, 25))]),
        (2, 3, [(CriticalAnomaly, (19, 4, 18)), (ExpectedOutcomeAnomaly, (12, 3, 30)), (MinorAnomaly, (79, 2, 30))]),
    ]
}

fn review_fixture(rng: &mut ChaCha8Rng, case_ids: &[String]) -> (serde_json::Value, Vec<CountRow>) {
    use Category::*;
    let configs = configs();
    let reported: [u64; 5] = [277, 334, 259, 376, 327];
    // Confirmed per config, per category.
    let mut confirmed: Vec<BTreeMap<Category, Vec<String>>> = vec![BTreeMap::new(); 5];

    for (a, b, triples) in family_triples() {
        let mut pool = case_ids.to_vec();
        pool.shuffle(rng);
        let mut next = pool.into_iter();
        for (cat, (only_a, shared, only_b)) in triples {
            for _ in 0..only_a {
                confirmed[a].entry(cat).or_default().push(next.next().unwrap());
            }
            for _ in 0..shared {
                let id = next.next().unwrap();
                confirmed[a].entry(cat).or_default().push(id.clone());
                confirmed[b].entry(cat).or_default().push(id);
            }
            for _ in 0..only_b {
                confirmed[b].entry(cat).or_default().push(next.next().unwrap());
            }
        }
    }
    {
        let mut pool = case_ids.to_vec();
        pool.shuffle(rng);
        let mut next = pool.into_iter();
        for (cat, n) in [(CriticalAnomaly, 63), (ExpectedOutcomeAnomaly, 10), (MinorAnomaly, 102)] {
            for _ in 0..n {
                confirmed[4].entry(cat).or_default().push(next.next().unwrap());
            }
        }
    }

    let mut verdicts = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (i, config) in configs.iter().enumerate() {
        let mut by_case: BTreeMap<String, Category> = BTreeMap::new();
        for (cat, ids) in &confirmed[i] {
            for id in ids {
                assert!(by_case.insert(id.clone(), *cat).is_none());
            }
        }
        let verified = by_case.len() as u64;
        let mut rest: Vec<&String> = case_ids.iter().filter(|id| !by_case.contains_key(*id)).collect();
        rest.shuffle(rng);
        let false_flags: BTreeSet<String> = rest.into_iter().take((reported[i] - verified) as usize).cloned().collect();
        for id in case_ids {
            let category = match by_case.get(id) {
                Some(c) => *c,
                None if false_flags.contains(id) => Category::ANOMALIES[rng.gen_range(0..3)],
                None => NoAnomaly,
            };
            verdicts.push(fixture_verdict(id, config, category));
            if let Some(c) = by_case.get(id) {
                labels.push(label(id, config, Some(*c)));
            } else if false_flags.contains(id) {
                labels.push(label(id, config, None));
            }
        }
        let count = |c: Category| confirmed[i].get(&c).map_or(0, |v| v.len() as u64);
        rows.push(CountRow {
            agent: config.agent.clone(),
            model: config.model.clone(),
            reported: reported[i],
            verified,
            critical: count(CriticalAnomaly),
            expected_outcome: count(ExpectedOutcomeAnomaly),
            minor: count(MinorAnomaly),
        });
    }
    let fixture = json!({
        "configs": configs,
        "cases": case_ids.len(),
        "verdicts": verdicts,
        "labels": labels,
    });
    (fixture, rows)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let dir = data_dir();

    let catalog = Catalog {
        patterns: build_patterns(&mut rng),
        actions: build_actions(&mut rng),
        provenance: "Rows IP-05, 12, 26, 27, 28, 36, 39, 40, 41, 44, 47 and actions 3, 13, 24, 28, 40, 68, 76, 77, 80, 85, 99 \
            carry published text. All other rows, every compatible_action_categories list, and the categories of \
            action 68 and the stand-in actions are synthetic placeholders produced by examples/generate_bundled_data.rs."
            .into(),
    };
    save_catalog(&catalog, &dir.join("catalog.json"))?;

    // Confirmed-label index for the pattern and action rankings. The total
    // is a free parameter; 220 keeps every unlisted id below the tenth row.
    let ips = ip_marginals(&mut rng, 220);
    let acts = action_marginals(&mut rng, 220);
    let ranking_pairs = realize_pairs(&mut rng, &ips, &acts);
    let mut required: BTreeSet<(String, String)> = ranking_pairs.iter().cloned().collect();
    required.insert(("IP-27".into(), "68".into()));

    let log = decision_log(&mut rng, &catalog, &required);
    std::fs::write(dir.join("decisions.jsonl"), log.to_jsonl())?;

    let composition = compose_seeds(&catalog, &RecordedJudge::from_log(&log, None))?;
    assert_eq!(composition.seeds.len(), N_COMPATIBLE);
    let case_of: BTreeMap<(String, String), String> = composition
        .seeds
        .iter()
        .map(|s| {
            (
                (s.interaction_body.ip_id.clone(), s.action.action_id.as_str().to_string()),
                case_id_for_seed(&s.seed_template_id),
            )
        })
        .collect();

    let configs = configs();
    let mut index = BTreeMap::new();
    let mut labels = Vec::new();
    for (i, pair) in ranking_pairs.iter().enumerate() {
        let case_id = &case_of[pair];
        index.insert(case_id.clone(), json!({"ip_id": pair.0, "action_id": pair.1}));
        let cat = Category::ANOMALIES[rng.gen_range(0..3)];
        labels.push(label(case_id, &configs[i % configs.len()], Some(cat)));
    }
    // Rejected labels must not move the rankings.
    let mut others: Vec<(&(String, String), &String)> = case_of.iter().filter(|(k, _)| !required.contains(*k)).collect();
    others.shuffle(&mut rng);
    for (pair, case_id) in others.into_iter().take(40) {
        index.insert(case_id.clone(), json!({"ip_id": pair.0, "action_id": pair.1}));
        labels.push(label(case_id, &configs[rng.gen_range(0..configs.len())], None));
    }
    write_json(&dir.join("ranking_labels.json"), &json!({ "index": index, "labels": labels }))?;

    let case_ids: Vec<String> = composition.seeds.iter().map(|s| case_id_for_seed(&s.seed_template_id)).collect();
    let (review, rows) = review_fixture(&mut rng, &case_ids);
    write_json(&dir.join("review_fixture.json"), &review)?;
    write_json(&dir.join("table2_counts.json"), &json!({ "rows": rows }))?;

    println!("{composition}");
    Ok(())
}

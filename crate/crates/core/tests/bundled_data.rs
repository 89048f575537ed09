//! Recounts the bundled data straight from the raw JSON, independent of the
//! report module, and compares with what the library computes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use befuzz_core::bundled::{self, data_dir};
use befuzz_core::catalog::load_catalog;
use befuzz_core::composer::{compose_seeds, DecisionLog, RecordedJudge};
use befuzz_core::oracle::Category;
use befuzz_core::report::{confirmed_sets, family_overlaps, rank_by_origin};
use serde_json::Value;

fn raw(name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(data_dir().join(name)).unwrap()).unwrap()
}

fn s(v: &Value, k: &str) -> String {
    v[k].as_str().unwrap().to_string()
}

#[test]
fn decision_log_covers_every_pair_once() {
    let text = fs::read_to_string(bundled::decisions_path()).unwrap();
    let mut pairs = BTreeSet::new();
    let mut compatible = 0;
    for line in text.lines() {
        let d: Value = serde_json::from_str(line).unwrap();
        assert!(pairs.insert((s(&d, "ip_id"), d["action_id"].to_string())));
        let yes = ["insertable", "coherent", "observable"].iter().all(|k| d[*k] == Value::Bool(true));
        if yes {
            compatible += 1;
        }
    }
    let catalog = load_catalog(&bundled::catalog_path()).unwrap();
    assert_eq!(pairs.len(), catalog.patterns.len() * catalog.actions.len());
    assert_eq!(pairs.len(), 6016);
    assert_eq!(compatible, 647);

    let log = DecisionLog::load(&bundled::decisions_path()).unwrap();
    let seeds = compose_seeds(&catalog, &RecordedJudge::from_log(&log, None)).unwrap().seeds;
    assert_eq!(seeds.len(), compatible);
}

type Key = (String, String, String);

fn flagged_and_labels() -> (BTreeSet<Key>, BTreeMap<Key, Option<String>>) {
    let doc = raw("review_fixture.json");
    let mut flagged = BTreeSet::new();
    for v in doc["verdicts"].as_array().unwrap() {
        if s(v, "category") != "no_anomaly" {
            flagged.insert((s(v, "agent"), s(v, "model"), s(v, "case_id")));
        }
    }
    let mut labels = BTreeMap::new();
    for l in doc["labels"].as_array().unwrap() {
        let key = (s(l, "agent"), s(l, "model"), s(l, "case_id"));
        let cat = l["is_true_anomaly"].as_bool().unwrap().then(|| s(l, "confirmed_category"));
        labels.insert(key, cat);
    }
    (flagged, labels)
}

#[test]
fn review_fixture_recount_matches_count_table() {
    let (flagged, labels) = flagged_and_labels();
    let doc = raw("review_fixture.json");
    assert_eq!(doc["verdicts"].as_array().unwrap().len(), 647 * 5);
    // Every flagged execution is reviewed and nothing else is.
    assert_eq!(labels.keys().cloned().collect::<BTreeSet<_>>(), flagged);

    let table = bundled::count_table().unwrap();
    for row in &table.rows {
        let mine = |k: &&Key| k.0 == row.agent && k.1 == row.model;
        let reported = flagged.iter().filter(mine).count() as u64;
        let mut cats = BTreeMap::new();
        for (_, c) in labels.iter().filter(|(k, _)| mine(k)) {
            if let Some(c) = c {
                *cats.entry(c.as_str()).or_insert(0u64) += 1;
            }
        }
        let verified: u64 = cats.values().sum();
        assert_eq!(reported, row.reported, "{}/{}", row.agent, row.model);
        assert_eq!(verified, row.verified);
        assert_eq!(cats.get("critical_anomaly").copied().unwrap_or(0), row.critical);
        assert_eq!(cats.get("expected_outcome_anomaly").copied().unwrap_or(0), row.expected_outcome);
        assert_eq!(cats.get("minor_anomaly").copied().unwrap_or(0), row.minor);
    }
}

#[test]
fn overlap_recount_matches_library() {
    let (_, labels) = flagged_and_labels();
    let review = bundled::review_fixture().unwrap();
    let lib = family_overlaps(&confirmed_sets(&review.labels), &review.configs);
    for f in &lib {
        let members: Vec<_> = review.configs.iter().filter(|c| c.agent == f.agent).collect();
        assert_eq!(members.len(), 2);
        let set = |m: &str| -> BTreeSet<String> {
            labels
                .iter()
                .filter(|(k, c)| k.0 == f.agent && k.1 == m && c.as_deref() == Some(f.category.as_str()))
                .map(|(k, _)| k.2.clone())
                .collect()
        };
        let (a, b) = (set(&members[0].model), set(&members[1].model));
        let shared = a.intersection(&b).count();
        let want = (a.len() - shared, shared, b.len() - shared);
        assert_eq!(f.sizes, want, "{} {}", f.agent, f.category);
    }
    assert!(lib.iter().any(|f| f.category == Category::MinorAnomaly));
}

#[test]
fn ranking_recount_matches_library() {
    let doc = raw("ranking_labels.json");
    let index = doc["index"].as_object().unwrap();
    let mut by_ip: BTreeMap<String, u64> = BTreeMap::new();
    let mut by_action: BTreeMap<String, u64> = BTreeMap::new();
    for l in doc["labels"].as_array().unwrap() {
        if l["is_true_anomaly"] != Value::Bool(true) {
            continue;
        }
        let o = &index[&s(l, "case_id")];
        *by_ip.entry(s(o, "ip_id")).or_default() += 1;
        *by_action.entry(s(o, "action_id")).or_default() += 1;
    }
    let fx = bundled::ranking_fixture().unwrap();
    let ranks = rank_by_origin(&fx.labels, &fx.index).unwrap();
    for e in &ranks.by_ip {
        assert_eq!(by_ip[&e.id], e.count);
    }
    for e in &ranks.by_action {
        assert_eq!(by_action[&e.id], e.count);
    }
    assert_eq!(ranks.by_ip.len(), by_ip.len());
    // Descending count, ties by ascending id.
    for w in ranks.by_ip.windows(2) {
        assert!(w[0].count > w[1].count || w[0].count == w[1].count && w[0].id < w[1].id);
    }
}

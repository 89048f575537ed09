//! Interaction-pattern and action-type inventories.
//!
//! A catalog file is one JSON document:
//!
//! ```json
//! { "patterns": [ ... ], "actions": [ ... ], "provenance": "..." }
//! ```
//!
//! Catalog values are immutable once loaded and validated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::ids::{natural_cmp, ActionId};
use crate::validation::{Finding, ValidationReport};

/// Placeholder tokens a skeleton step may use.
pub const PLACEHOLDER_VOCABULARY: &[&str] = &[
    "<COMMAND>",
    "<OUTPUT_FILE>",
    "<OUTPUT_META>",
    "<AUX_FILE>",
    "<INPUT_FILE>",
    "<WORKDIR>",
    "<FILE>",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionPattern {
    pub ip_id: String,
    pub description: String,
    pub seq_skeleton_steps: Vec<String>,
    #[serde(default)]
    pub compatible_action_categories: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionType {
    pub action_id: ActionId,
    pub action_category: String,
    #[serde(default)]
    pub stressed_operation: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub target_anomaly_surface: String,
    #[serde(default, deserialize_with = "signal_list")]
    pub observable_failure_signal: Vec<String>,
    #[serde(default)]
    pub baseline_prompt: String,
    #[serde(default)]
    pub typical_fuzz_direction: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub patterns: Vec<InteractionPattern>,
    pub actions: Vec<ActionType>,
    #[serde(default)]
    pub provenance: String,
}

/// Accepts either a list of tags or the compact `"A / B"` string form.
pub(crate) fn signal_list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        List(Vec<String>),
        Joined(String),
    }
    Ok(match Raw::deserialize(d)? {
        Raw::List(v) => v,
        Raw::Joined(s) => split_signals(&s),
    })
}

pub(crate) fn split_signals(s: &str) -> Vec<String> {
    s.split('/')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CatalogRule {
    DuplicateId,
    EmptySkeleton,
    EmptyCategory,
    DanglingCategory,
    PlaceholderFormat,
    UnknownPlaceholder,
}

impl CatalogRule {
    /// Soft rules are reported but do not stop a catalog from loading.
    pub fn is_hard(self) -> bool {
        !matches!(self, CatalogRule::UnknownPlaceholder)
    }

    pub fn name(self) -> &'static str {
        match self {
            CatalogRule::DuplicateId => "duplicate-id",
            CatalogRule::EmptySkeleton => "empty-skeleton",
            CatalogRule::EmptyCategory => "empty-category",
            CatalogRule::DanglingCategory => "dangling-category",
            CatalogRule::PlaceholderFormat => "placeholder-format",
            CatalogRule::UnknownPlaceholder => "unknown-placeholder",
        }
    }
}

impl fmt::Display for CatalogRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type CatalogReport = ValidationReport<CatalogRule>;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed catalog {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid catalog: {0}")]
    Invalid(CatalogReport),
}

/// Tokens of the form `<...>` (no nested angle brackets).
fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^<>]*>").expect("static regex"))
}

fn well_formed_placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^<[A-Z_]+>$").expect("static regex"))
}

/// All `<...>` tokens in a step template, in order.
pub fn placeholders(step: &str) -> impl Iterator<Item = &str> {
    placeholder_regex().find_iter(step).map(|m| m.as_str())
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Catalog, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("catalog serializes");
        s.push('\n');
        s
    }

    pub fn pattern(&self, ip_id: &str) -> Option<&InteractionPattern> {
        self.patterns.iter().find(|p| p.ip_id == ip_id)
    }

    pub fn action(&self, id: &ActionId) -> Option<&ActionType> {
        self.actions.iter().find(|a| &a.action_id == id)
    }

    /// Patterns in iteration order (ascending by id).
    pub fn sorted_patterns(&self) -> Vec<&InteractionPattern> {
        let mut v: Vec<_> = self.patterns.iter().collect();
        v.sort_by(|a, b| natural_cmp(&a.ip_id, &b.ip_id));
        v
    }

    /// Actions in iteration order (ascending by id).
    pub fn sorted_actions(&self) -> Vec<&ActionType> {
        let mut v: Vec<_> = self.actions.iter().collect();
        v.sort_by(|a, b| a.action_id.cmp(&b.action_id));
        v
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.actions.iter().map(|a| a.action_category.as_str()).collect()
    }

    /// Same content with both inventories in iteration order.
    pub fn canonicalized(&self) -> Catalog {
        Catalog {
            patterns: self.sorted_patterns().into_iter().cloned().collect(),
            actions: self.sorted_actions().into_iter().cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }
}

pub fn validate_catalog(catalog: &Catalog) -> CatalogReport {
    let mut findings = Vec::new();

    let mut ip_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &catalog.patterns {
        *ip_counts.entry(p.ip_id.as_str()).or_default() += 1;
    }
    for (id, n) in ip_counts.iter().filter(|(_, n)| **n > 1) {
        findings.push(Finding::new(
            CatalogRule::DuplicateId,
            *id,
            format!("pattern id appears {n} times"),
        ));
    }
    let mut action_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &catalog.actions {
        *action_counts.entry(a.action_id.as_str()).or_default() += 1;
    }
    for (id, n) in action_counts.iter().filter(|(_, n)| **n > 1) {
        findings.push(Finding::new(
            CatalogRule::DuplicateId,
            *id,
            format!("action id appears {n} times"),
        ));
    }

    let categories = catalog.categories();
    for a in &catalog.actions {
        if a.action_category.trim().is_empty() {
            findings.push(Finding::new(
                CatalogRule::EmptyCategory,
                a.action_id.as_str(),
                "action_category is empty",
            ));
        }
    }

    for p in &catalog.patterns {
        if p.seq_skeleton_steps.is_empty() {
            findings.push(Finding::new(
                CatalogRule::EmptySkeleton,
                &p.ip_id,
                "seq_skeleton_steps is empty",
            ));
        }
        for cat in &p.compatible_action_categories {
            if !categories.contains(cat.as_str()) {
                findings.push(Finding::new(
                    CatalogRule::DanglingCategory,
                    &p.ip_id,
                    format!("category {cat:?} has no action"),
                ));
            }
        }
        for (i, step) in p.seq_skeleton_steps.iter().enumerate() {
            for token in placeholders(step) {
                if !well_formed_placeholder().is_match(token) {
                    findings.push(Finding::new(
                        CatalogRule::PlaceholderFormat,
                        &p.ip_id,
                        format!("step {}: {token}", i + 1),
                    ));
                } else if !PLACEHOLDER_VOCABULARY.contains(&token) {
                    findings.push(Finding::new(
                        CatalogRule::UnknownPlaceholder,
                        &p.ip_id,
                        format!("step {}: {token}", i + 1),
                    ));
                }
            }
        }
    }

    ValidationReport::from_findings(findings)
}

/// Parses and validates a catalog document held in memory.
pub fn parse_catalog(text: &str, origin: &Path) -> Result<Catalog, CatalogError> {
    let catalog = Catalog::from_json(text).map_err(|source| CatalogError::Parse {
        path: origin.to_path_buf(),
        source,
    })?;
    let report = validate_catalog(&catalog);
    let hard: Vec<_> = report
        .iter()
        .filter(|f| f.rule.is_hard())
        .cloned()
        .collect();
    if !hard.is_empty() {
        return Err(CatalogError::Invalid(ValidationReport::from_findings(hard)));
    }
    Ok(catalog)
}

pub fn load_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_catalog(&text, path)
}

pub fn save_catalog(catalog: &Catalog, path: &Path) -> Result<(), CatalogError> {
    crate::fsutil::write_atomic(path, catalog.to_json().as_bytes()).map_err(|source| {
        CatalogError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pattern(id: &str, steps: &[&str], cats: &[&str]) -> InteractionPattern {
        InteractionPattern {
            ip_id: id.into(),
            description: format!("workflow {id}"),
            seq_skeleton_steps: steps.iter().map(|s| s.to_string()).collect(),
            compatible_action_categories: cats.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub(crate) fn action(id: &str, cat: &str) -> ActionType {
        ActionType {
            action_id: ActionId::new(id),
            action_category: cat.into(),
            stressed_operation: "op".into(),
            description: "desc".into(),
            target_anomaly_surface: "surface".into(),
            observable_failure_signal: vec!["EXIT_ZERO_UNEXPECTED".into()],
            baseline_prompt: "Do <FILE>".into(),
            typical_fuzz_direction: vec![],
        }
    }

    #[test]
    fn empty_catalog_is_valid() {
        let c = parse_catalog(r#"{"patterns":[],"actions":[]}"#, Path::new("x")).unwrap();
        assert!(c.patterns.is_empty() && c.actions.is_empty());
        assert!(validate_catalog(&c).is_empty());
    }

    #[test]
    fn duplicate_pattern_id_is_named() {
        let c = Catalog {
            patterns: vec![
                pattern("IP-01", &["Run <COMMAND>"], &[]),
                pattern("IP-01", &["Run <COMMAND>"], &[]),
            ],
            ..Default::default()
        };
        let err = parse_catalog(&c.to_json(), Path::new("x")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("IP-01") && msg.contains("duplicate-id"), "{msg}");
    }

    #[test]
    fn dangling_category() {
        let c = Catalog {
            patterns: vec![pattern("IP-02", &["Run <COMMAND>"], &["Quantum Ops"])],
            actions: vec![action("1", "File Operation")],
            ..Default::default()
        };
        let r = validate_catalog(&c);
        assert_eq!(r.len(), 1);
        assert_eq!(r.findings()[0].rule, CatalogRule::DanglingCategory);
        assert_eq!(r.findings()[0].subject, "IP-02");
    }

    #[test]
    fn lowercase_placeholder_is_hard_unknown_is_soft() {
        let c = Catalog {
            patterns: vec![pattern("IP-03", &["Run <command>", "Use <SOMETHING_ELSE>"], &[])],
            ..Default::default()
        };
        let r = validate_catalog(&c);
        assert!(r.has_rule(&CatalogRule::PlaceholderFormat));
        assert!(r.has_rule(&CatalogRule::UnknownPlaceholder));
        assert!(matches!(
            parse_catalog(&c.to_json(), Path::new("x")),
            Err(CatalogError::Invalid(_))
        ));

        let soft = Catalog {
            patterns: vec![pattern("IP-04", &["Use <SOMETHING_ELSE>"], &[])],
            ..Default::default()
        };
        assert!(parse_catalog(&soft.to_json(), Path::new("x")).is_ok());
    }

    #[test]
    fn empty_skeleton() {
        let c = Catalog {
            patterns: vec![pattern("IP-09", &[], &[])],
            ..Default::default()
        };
        let r = validate_catalog(&c);
        assert_eq!(r.findings()[0].rule, CatalogRule::EmptySkeleton);
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(
            parse_catalog("{\"patterns\": [", Path::new("x")),
            Err(CatalogError::Parse { .. })
        ));
    }

    #[test]
    fn signals_accept_joined_string() {
        let a: ActionType = serde_json::from_str(
            r#"{"action_id":68,"action_category":"File Operation","observable_failure_signal":"EXIT_ZERO_UNEXPECTED / OUTPUT_MALFORMED"}"#,
        )
        .unwrap();
        assert_eq!(a.observable_failure_signal, vec!["EXIT_ZERO_UNEXPECTED", "OUTPUT_MALFORMED"]);
    }
}

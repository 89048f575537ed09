//! Campaign metrics: precision, per-category counts, origin rankings and
//! within-family overlap decomposition.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{natural_cmp, ActionId, ConfigId};
use crate::labels::ReviewLabel;
use crate::oracle::{Category, Verdict};

pub const UNDEFINED_MARKER: &str = "—";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("verified count {verified} exceeds reported count {reported}")]
    VerifiedExceedsReported { reported: u64, verified: u64 },
    #[error("case {0} is not in the case index")]
    UnknownCase(String),
    #[error("{config}: category counts sum to {sum}, verified is {verified}")]
    Partition { config: String, sum: u64, verified: u64 },
}

/// verified / reported, or undefined when nothing was reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub reported: u64,
    pub verified: u64,
}

pub fn compute_precision(reported: u64, verified: u64) -> Result<Precision, ReportError> {
    if verified > reported {
        return Err(ReportError::VerifiedExceedsReported { reported, verified });
    }
    Ok(Precision { reported, verified })
}

impl Precision {
    pub fn ratio(&self) -> Option<f64> {
        (self.reported > 0).then(|| self.verified as f64 / self.reported as f64)
    }

    /// Percentage in tenths, rounded half up with integer arithmetic.
    pub fn tenths_of_percent(&self) -> Option<u64> {
        (self.reported > 0).then(|| (2000 * self.verified + self.reported) / (2 * self.reported))
    }

    pub fn render(&self) -> String {
        match self.tenths_of_percent() {
            Some(t) => format!("{}.{}%", t / 10, t % 10),
            None => UNDEFINED_MARKER.to_string(),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn total_executions(cases: u64, configurations: u64) -> u64 {
    cases * configurations
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub critical: u64,
    pub expected_outcome: u64,
    pub minor: u64,
}

impl CategoryCounts {
    pub fn sum(&self) -> u64 {
        self.critical + self.expected_outcome + self.minor
    }

    pub fn bump(&mut self, c: Category) {
        match c {
            Category::CriticalAnomaly => self.critical += 1,
            Category::ExpectedOutcomeAnomaly => self.expected_outcome += 1,
            Category::MinorAnomaly => self.minor += 1,
            Category::NoAnomaly => {}
        }
    }

    pub fn get(&self, c: Category) -> u64 {
        match c {
            Category::CriticalAnomaly => self.critical,
            Category::ExpectedOutcomeAnomaly => self.expected_outcome,
            Category::MinorAnomaly => self.minor,
            Category::NoAnomaly => 0,
        }
    }
}

/// One configuration's line in the results table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub config: ConfigId,
    pub reported: u64,
    pub verified: u64,
    pub precision: String,
    /// Confirmed anomalies per category.
    pub confirmed: CategoryCounts,
}

impl ConfigRow {
    pub fn new(config: ConfigId, reported: u64, verified: u64, confirmed: CategoryCounts) -> Result<Self, ReportError> {
        let precision = compute_precision(reported, verified)?;
        if confirmed.sum() != verified {
            return Err(ReportError::Partition {
                config: config.to_string(),
                sum: confirmed.sum(),
                verified,
            });
        }
        Ok(ConfigRow {
            config,
            reported,
            verified,
            precision: precision.render(),
            confirmed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ConfigRow>,
    pub totals: ConfigRow,
}

pub fn build_table(rows: Vec<ConfigRow>) -> Result<ResultsTable, ReportError> {
    let mut sum = CategoryCounts::default();
    let (mut reported, mut verified) = (0, 0);
    for r in &rows {
        reported += r.reported;
        verified += r.verified;
        sum.critical += r.confirmed.critical;
        sum.expected_outcome += r.confirmed.expected_outcome;
        sum.minor += r.confirmed.minor;
    }
    let totals = ConfigRow::new(ConfigId::new("Total", "all"), reported, verified, sum)?;
    Ok(ResultsTable { rows, totals })
}

/// Where a case came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub ip_id: String,
    #[serde(with = "crate::ids::action_id_as_string")]
    pub action_id: ActionId,
}

pub type CaseIndex = BTreeMap<String, Origin>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: String,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rankings {
    pub by_ip: Vec<RankEntry>,
    pub by_action: Vec<RankEntry>,
}

impl Rankings {
    pub fn top(&self, k: usize) -> Rankings {
        Rankings {
            by_ip: self.by_ip.iter().take(k).cloned().collect(),
            by_action: self.by_action.iter().take(k).cloned().collect(),
        }
    }
}

fn rank(counts: BTreeMap<String, u64>) -> Vec<RankEntry> {
    let mut v: Vec<RankEntry> = counts.into_iter().map(|(id, count)| RankEntry { id, count }).collect();
    v.sort_by(|a, b| match b.count.cmp(&a.count) {
        Ordering::Equal => natural_cmp(&a.id, &b.id),
        o => o,
    });
    v
}

/// Counts confirmed true anomalies per pattern and per action, descending,
/// ties by ascending id.
pub fn rank_by_origin<'a>(
    labels: impl IntoIterator<Item = &'a ReviewLabel>,
    index: &CaseIndex,
) -> Result<Rankings, ReportError> {
    let mut ips: BTreeMap<String, u64> = BTreeMap::new();
    let mut actions: BTreeMap<String, u64> = BTreeMap::new();
    for l in labels.into_iter().filter(|l| l.is_true_anomaly) {
        let o = index.get(&l.case_id).ok_or_else(|| ReportError::UnknownCase(l.case_id.clone()))?;
        *ips.entry(o.ip_id.clone()).or_default() += 1;
        *actions.entry(o.action_id.as_str().to_string()).or_default() += 1;
    }
    Ok(Rankings {
        by_ip: rank(ips),
        by_action: rank(actions),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub only_a: Vec<String>,
    pub shared: Vec<String>,
    pub only_b: Vec<String>,
}

impl Overlap {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.only_a.len(), self.shared.len(), self.only_b.len())
    }
}

pub fn overlap_decompose(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Overlap {
    Overlap {
        only_a: a.difference(b).cloned().collect(),
        shared: a.intersection(b).cloned().collect(),
        only_b: b.difference(a).cloned().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyOverlap {
    pub agent: String,
    pub model_a: String,
    pub model_b: String,
    pub category: Category,
    pub sizes: (usize, usize, usize),
    pub overlap: Overlap,
}

/// Confirmed case ids per configuration and category.
pub fn confirmed_sets<'a>(
    labels: impl IntoIterator<Item = &'a ReviewLabel>,
) -> BTreeMap<ConfigId, BTreeMap<Category, BTreeSet<String>>> {
    let mut out: BTreeMap<ConfigId, BTreeMap<Category, BTreeSet<String>>> = BTreeMap::new();
    for l in labels.into_iter().filter(|l| l.is_true_anomaly) {
        if let Some(c) = l.confirmed_category {
            out.entry(l.config.clone())
                .or_default()
                .entry(c)
                .or_default()
                .insert(l.case_id.clone());
        }
    }
    out
}

/// Pairwise decomposition between models of the same agent.
pub fn family_overlaps(
    sets: &BTreeMap<ConfigId, BTreeMap<Category, BTreeSet<String>>>,
    configs: &[ConfigId],
) -> Vec<FamilyOverlap> {
    let empty = BTreeSet::new();
    let mut out = Vec::new();
    for (i, a) in configs.iter().enumerate() {
        for b in configs.iter().skip(i + 1).filter(|b| b.agent == a.agent) {
            for cat in Category::ANOMALIES {
                let sa = sets.get(a).and_then(|m| m.get(&cat)).unwrap_or(&empty);
                let sb = sets.get(b).and_then(|m| m.get(&cat)).unwrap_or(&empty);
                let overlap = overlap_decompose(sa, sb);
                out.push(FamilyOverlap {
                    agent: a.agent.clone(),
                    model_a: a.model.clone(),
                    model_b: b.model.clone(),
                    category: cat,
                    sizes: overlap.sizes(),
                    overlap,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub table: ResultsTable,
    pub total_executions: u64,
    pub rankings: Rankings,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_config_rankings: BTreeMap<String, Rankings>,
    pub overlaps: Vec<FamilyOverlap>,
}

#[derive(Debug, Clone, Copy)]
pub struct ReportOptions {
    pub top: usize,
    pub per_config: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            top: 10,
            per_config: false,
        }
    }
}

/// Reported = flagged verdicts, verified = active true-anomaly labels on
/// flagged cases. `configs` fixes row order.
pub fn build_report(
    configs: &[ConfigId],
    cases: u64,
    verdicts: &[Verdict],
    labels: &[&ReviewLabel],
    index: &CaseIndex,
    opts: ReportOptions,
) -> Result<CampaignReport, ReportError> {
    let flagged: BTreeSet<(ConfigId, &str)> = verdicts
        .iter()
        .filter(|v| v.category.is_anomaly())
        .map(|v| (ConfigId::new(&v.agent, &v.model), v.case_id.as_str()))
        .collect();
    let counted: Vec<&ReviewLabel> = labels
        .iter()
        .copied()
        .filter(|l| l.is_true_anomaly && flagged.contains(&(l.config.clone(), l.case_id.as_str())))
        .collect();

    let mut rows = Vec::new();
    for config in configs {
        let reported = flagged.iter().filter(|(c, _)| c == config).count() as u64;
        let mut confirmed = CategoryCounts::default();
        for l in counted.iter().filter(|l| &l.config == config) {
            confirmed.bump(l.confirmed_category.unwrap_or(Category::NoAnomaly));
        }
        rows.push(ConfigRow::new(config.clone(), reported, confirmed.sum(), confirmed)?);
    }
    let table = build_table(rows)?;

    let rankings = rank_by_origin(counted.iter().copied(), index)?.top(opts.top);
    let mut per_config_rankings = BTreeMap::new();
    if opts.per_config {
        for config in configs {
            let r = rank_by_origin(counted.iter().copied().filter(|l| &l.config == config), index)?;
            per_config_rankings.insert(config.to_string(), r.top(opts.top));
        }
    }
    let overlaps = family_overlaps(&confirmed_sets(counted.iter().copied()), configs);
    Ok(CampaignReport {
        table,
        total_executions: total_executions(cases, configs.len() as u64),
        rankings,
        per_config_rankings,
        overlaps,
    })
}

pub fn render_text(report: &CampaignReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<44} {:>8} {:>8} {:>9} {:>8} {:>8} {:>6}",
        "Configuration", "Reported", "Verified", "Precision", "Critical", "Expected", "Minor"
    );
    for r in report.table.rows.iter().chain(std::iter::once(&report.table.totals)) {
        let name = if r.config.agent == "Total" {
            "Total".to_string()
        } else {
            r.config.to_string()
        };
        let _ = writeln!(
            s,
            "{:<44} {:>8} {:>8} {:>9} {:>8} {:>8} {:>6}",
            name,
            r.reported,
            r.verified,
            r.precision,
            r.confirmed.critical,
            r.confirmed.expected_outcome,
            r.confirmed.minor
        );
    }
    let _ = writeln!(s, "\nTotal executions: {}", report.total_executions);
    for (title, entries) in [
        ("Top interaction patterns", &report.rankings.by_ip),
        ("Top action types", &report.rankings.by_action),
    ] {
        let _ = writeln!(s, "\n{title}");
        for (i, e) in entries.iter().enumerate() {
            let _ = writeln!(s, "{:>3}. {:<10} {}", i + 1, e.id, e.count);
        }
    }
    if !report.overlaps.is_empty() {
        let _ = writeln!(s, "\nOverlap (only A, shared, only B)");
        for o in &report.overlaps {
            let _ = writeln!(
                s,
                "{} {} vs {} {:<26} ({}, {}, {})",
                o.agent, o.model_a, o.model_b, o.category, o.sizes.0, o.sizes.1, o.sizes.2
            );
        }
    }
    s
}

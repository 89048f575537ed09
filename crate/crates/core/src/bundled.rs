//! Fixtures shipped under `data/`: the bundled catalog with its recorded
//! screening log, count tables, label sets, and the running-example
//! campaign. `examples/generate_bundled_data.rs` regenerates the synthetic
//! parts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::campaign::{read_json, LoadError};
use crate::ids::ConfigId;
use crate::labels::ReviewLabel;
use crate::oracle::Verdict;
use crate::report::{CaseIndex, CategoryCounts, ConfigRow, ReportError};

pub const RECORDED_JUDGE_VERSION: &str = "screen-recorded-v1";

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn catalog_path() -> PathBuf {
    data_dir().join("catalog.json")
}

pub fn decisions_path() -> PathBuf {
    data_dir().join("decisions.jsonl")
}

pub fn running_example_dir() -> PathBuf {
    data_dir().join("running_example")
}

/// Per-configuration counts as they appear in the results table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub agent: String,
    pub model: String,
    pub reported: u64,
    pub verified: u64,
    pub critical: u64,
    pub expected_outcome: u64,
    pub minor: u64,
}

impl CountRow {
    pub fn config(&self) -> ConfigId {
        ConfigId::new(&self.agent, &self.model)
    }

    pub fn to_row(&self) -> Result<ConfigRow, ReportError> {
        ConfigRow::new(
            self.config(),
            self.reported,
            self.verified,
            CategoryCounts {
                critical: self.critical,
                expected_outcome: self.expected_outcome,
                minor: self.minor,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub rows: Vec<CountRow>,
}

/// Confirmed-label index behind the pattern and action rankings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingFixture {
    pub index: CaseIndex,
    pub labels: Vec<ReviewLabel>,
}

/// Case-level review outcome for five configurations over the bundled seeds:
/// one verdict per (configuration, case) and one label per flagged case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewFixture {
    pub configs: Vec<ConfigId>,
    pub cases: u64,
    pub verdicts: Vec<Verdict>,
    pub labels: Vec<ReviewLabel>,
}

pub fn count_table() -> Result<CountTable, LoadError> {
    read_json(&data_dir().join("table2_counts.json"))
}

pub fn ranking_fixture() -> Result<RankingFixture, LoadError> {
    read_json(&data_dir().join("ranking_labels.json"))
}

pub fn review_fixture() -> Result<ReviewFixture, LoadError> {
    read_json(&data_dir().join("review_fixture.json"))
}

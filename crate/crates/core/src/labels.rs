//! Human review labels: an append-only log where the last entry per
//! (case, configuration) is the active one.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::ConfigId;
use crate::oracle::Category;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewLabel {
    pub case_id: String,
    #[serde(flatten)]
    pub config: ConfigId,
    pub is_true_anomaly: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmed_category: Option<Category>,
    pub reviewer: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("label store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("label store {path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("a true anomaly needs a confirmed anomaly category")]
    MissingCategory,
    #[error("confirmed_category must be an anomaly category, got no_anomaly")]
    NoAnomalyCategory,
    #[error("reviewer is empty")]
    EmptyReviewer,
}

impl ReviewLabel {
    pub fn validate(&self) -> Result<(), LabelError> {
        if self.reviewer.trim().is_empty() {
            return Err(LabelError::EmptyReviewer);
        }
        match (self.is_true_anomaly, self.confirmed_category) {
            (_, Some(Category::NoAnomaly)) => Err(LabelError::NoAnomalyCategory),
            (true, None) => Err(LabelError::MissingCategory),
            _ => Ok(()),
        }
    }

    pub fn key(&self) -> (String, ConfigId) {
        (self.case_id.clone(), self.config.clone())
    }
}

pub type LabelKey = (String, ConfigId);

#[derive(Debug)]
pub struct LabelStore {
    path: Option<PathBuf>,
    history: Vec<ReviewLabel>,
    active: BTreeMap<LabelKey, usize>,
}

impl LabelStore {
    pub fn in_memory() -> Self {
        LabelStore {
            path: None,
            history: Vec::new(),
            active: BTreeMap::new(),
        }
    }

    /// Opens (or starts) the log at `path` and replays it.
    pub fn open(path: &Path) -> Result<Self, LabelError> {
        let mut store = LabelStore {
            path: Some(path.to_path_buf()),
            ..Self::in_memory()
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(source) => {
                return Err(LabelError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
        };
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let label: ReviewLabel = serde_json::from_str(line).map_err(|source| LabelError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
            store.apply(label);
        }
        Ok(store)
    }

    fn apply(&mut self, label: ReviewLabel) {
        self.active.insert(label.key(), self.history.len());
        self.history.push(label);
    }

    /// Validates, persists, then activates `label`. Returns the label it superseded.
    pub fn submit(&mut self, label: ReviewLabel) -> Result<Option<ReviewLabel>, LabelError> {
        label.validate()?;
        if let Some(path) = &self.path {
            let io_err = |source| LabelError::Io {
                path: path.clone(),
                source,
            };
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
            let mut line = serde_json::to_string(&label).expect("label serializes");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(io_err)?;
            f.sync_data().map_err(io_err)?;
        }
        let prior = self.active(&label.case_id, &label.config).cloned();
        self.apply(label);
        Ok(prior)
    }

    pub fn active(&self, case_id: &str, config: &ConfigId) -> Option<&ReviewLabel> {
        self.active
            .get(&(case_id.to_string(), config.clone()))
            .map(|&i| &self.history[i])
    }

    /// Active labels in key order.
    pub fn active_labels(&self) -> impl Iterator<Item = &ReviewLabel> {
        self.active.values().map(|&i| &self.history[i])
    }

    pub fn history(&self) -> &[ReviewLabel] {
        &self.history
    }

    pub fn history_for(&self, case_id: &str, config: &ConfigId) -> Vec<&ReviewLabel> {
        self.history
            .iter()
            .filter(|l| l.case_id == case_id && &l.config == config)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(case: &str, truth: bool) -> ReviewLabel {
        ReviewLabel {
            case_id: case.into(),
            config: ConfigId::new("codex-cli", "gpt-5.1-codex-mini"),
            is_true_anomaly: truth,
            confirmed_category: truth.then_some(Category::CriticalAnomaly),
            reviewer: "r1".into(),
            timestamp: DateTime::parse_from_rfc3339("2026-01-01T00:00:00Z").unwrap().into(),
            note: String::new(),
        }
    }

    #[test]
    fn last_write_wins_and_survives_reopen() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("labels.jsonl");
        let mut s = LabelStore::open(&path).unwrap();
        s.submit(label("Test-0001", true)).unwrap();
        s.submit(label("Test-0002", true)).unwrap();
        let prior = s.submit(label("Test-0001", false)).unwrap();
        assert!(prior.unwrap().is_true_anomaly);
        let cfg = ConfigId::new("codex-cli", "gpt-5.1-codex-mini");
        assert!(!s.active("Test-0001", &cfg).unwrap().is_true_anomaly);
        assert_eq!(s.history_for("Test-0001", &cfg).len(), 2);

        let again = LabelStore::open(&path).unwrap();
        assert_eq!(again.history(), s.history());
        assert_eq!(again.active_labels().collect::<Vec<_>>(), s.active_labels().collect::<Vec<_>>());
    }

    #[test]
    fn validation() {
        let mut l = label("Test-0001", true);
        l.confirmed_category = None;
        assert!(matches!(l.validate(), Err(LabelError::MissingCategory)));
        l.confirmed_category = Some(Category::NoAnomaly);
        assert!(matches!(l.validate(), Err(LabelError::NoAnomalyCategory)));
        assert!(label("x", false).validate().is_ok());
    }

    #[test]
    fn flattened_wire_shape() {
        let v = serde_json::to_value(label("Test-0001", true)).unwrap();
        assert_eq!(v["agent"], "codex-cli");
        assert_eq!(v["confirmed_category"], "critical_anomaly");
    }
}

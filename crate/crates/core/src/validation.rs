use std::fmt;

use serde::{Deserialize, Serialize};

/// One invariant violation: which rule fired, on which record, and why.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Finding<R> {
    pub rule: R,
    pub subject: String,
    pub detail: String,
}

impl<R> Finding<R> {
    pub fn new(rule: R, subject: impl Into<String>, detail: impl Into<String>) -> Self {
        Finding {
            rule,
            subject: subject.into(),
            detail: detail.into(),
        }
    }
}

impl<R: fmt::Display> fmt::Display for Finding<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.subject, self.detail)
    }
}

/// Findings for one validation pass, sorted so the report does not depend on
/// input order. Empty means valid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationReport<R: Ord> {
    findings: Vec<Finding<R>>,
}

impl<R: Ord> ValidationReport<R> {
    pub fn from_findings(mut findings: Vec<Finding<R>>) -> Self {
        findings.sort();
        ValidationReport { findings }
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }

    pub fn findings(&self) -> &[Finding<R>] {
        &self.findings
    }

    pub fn iter(&self) -> impl Iterator<Item = &Finding<R>> {
        self.findings.iter()
    }

    pub fn has_rule(&self, rule: &R) -> bool
    where
        R: PartialEq,
    {
        self.findings.iter().any(|f| &f.rule == rule)
    }
}

impl<R: Ord + fmt::Display> fmt::Display for ValidationReport<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, finding) in self.findings.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{finding}")?;
        }
        Ok(())
    }
}

//! Completeness filter and four-way behavioral classification of runs.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{RunRecord, RunStatus, StepOutcome, StepTrace, TerminationReason};
use crate::instantiator::CaseCandidate;
use crate::llm::{extract_json_object, TextGenerator};

pub const CHECKER_VERSION: &str = "rules-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    NoAnomaly,
    MinorAnomaly,
    ExpectedOutcomeAnomaly,
    CriticalAnomaly,
}

impl Category {
    pub const ANOMALIES: [Category; 3] = [
        Category::CriticalAnomaly,
        Category::ExpectedOutcomeAnomaly,
        Category::MinorAnomaly,
    ];

    /// Higher is more severe.
    pub fn severity(self) -> u8 {
        match self {
            Category::NoAnomaly => 0,
            Category::MinorAnomaly => 1,
            Category::ExpectedOutcomeAnomaly => 2,
            Category::CriticalAnomaly => 3,
        }
    }

    pub fn is_anomaly(self) -> bool {
        self != Category::NoAnomaly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::NoAnomaly => "no_anomaly",
            Category::MinorAnomaly => "minor_anomaly",
            Category::ExpectedOutcomeAnomaly => "expected_outcome_anomaly",
            Category::CriticalAnomaly => "critical_anomaly",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        [Category::NoAnomaly]
            .into_iter()
            .chain(Category::ANOMALIES)
            .find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    IncompleteRun,
    UnexpectedChange,
    MissingExpectedFile,
    ExpectedModificationAbsent,
    VerificationFailed,
    RollbackFailurePattern,
    Contradiction,
    AdvisoryJudge,
}

impl Check {
    pub fn category(self) -> Category {
        match self {
            Check::IncompleteRun | Check::UnexpectedChange => Category::CriticalAnomaly,
            Check::MissingExpectedFile | Check::ExpectedModificationAbsent | Check::VerificationFailed => {
                Category::ExpectedOutcomeAnomaly
            }
            Check::RollbackFailurePattern | Check::Contradiction | Check::AdvisoryJudge => Category::MinorAnomaly,
        }
    }
}

/// Points at the trace step or file-change entry that made a check fire.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub check: Check,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub detail: String,
}

impl EvidenceRef {
    /// True when the ref points at something persisted in `run` (a trace
    /// step or a path in the file-change evidence) or, for declared
    /// expectations, at the candidate.
    pub fn resolves(&self, run: &RunRecord, candidate: &CaseCandidate) -> bool {
        let step_ok = self.step_id.as_ref().map(|s| run.step(s).is_some());
        let path_ok = self.path.as_ref().map(|p| {
            run.file_change.changed().any(|c| c == p)
                || run.steps.iter().any(|s| s.captured_trace.file_change.changed().any(|c| c == p))
                || candidate.expected_artifacts().any(|c| c == p)
        });
        match (step_ok, path_ok) {
            (None, None) => self.check == Check::IncompleteRun,
            (s, p) => s.unwrap_or(true) && p.unwrap_or(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Advisory {
    pub anomaly: bool,
    pub rationale: String,
    pub judge: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub case_id: String,
    pub agent: String,
    pub model: String,
    pub category: Category,
    /// Every check that fired, most severe first.
    pub evidence: Vec<EvidenceRef>,
    pub checker_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advisory: Option<Advisory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompletenessReason {
    AllStepsExecuted,
    Timeout,
    EarlyExit,
    AdapterError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletenessDecision {
    pub case_id: String,
    pub complete: bool,
    pub reason: CompletenessReason,
}

pub fn filter_complete(run: &RunRecord) -> CompletenessDecision {
    let reason = match &run.status {
        RunStatus::AllStepsExecuted => CompletenessReason::AllStepsExecuted,
        RunStatus::TerminatedEarly { reason, .. } => match reason {
            TerminationReason::Timeout => CompletenessReason::Timeout,
            TerminationReason::EarlyExit => CompletenessReason::EarlyExit,
            TerminationReason::AdapterError => CompletenessReason::AdapterError,
        },
    };
    CompletenessDecision {
        case_id: run.case_id.clone(),
        complete: reason == CompletenessReason::AllStepsExecuted,
        reason,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackMatch {
    pub step_id: String,
    pub pattern: String,
    pub matched_text: String,
}

fn step_lines(trace: &StepTrace) -> impl Iterator<Item = &String> {
    trace
        .captured_trace
        .event_trace_summary
        .iter()
        .chain(&trace.captured_trace.agent_last_message_excerpt)
}

/// Case-insensitive substring search over the events and message lines of
/// the rollback steps. One match per (step, pattern), at the first hit.
pub fn match_rollback_failure(traces: &[StepTrace], rollback_steps: &[String], patterns: &[String]) -> Vec<RollbackMatch> {
    let wanted: BTreeSet<&str> = rollback_steps.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for trace in traces.iter().filter(|t| wanted.contains(t.step_id.as_str())) {
        for pattern in patterns.iter().filter(|p| !p.is_empty()) {
            let needle = pattern.to_lowercase();
            if let Some(line) = step_lines(trace).find(|l| l.to_lowercase().contains(&needle)) {
                out.push(RollbackMatch {
                    step_id: trace.step_id.clone(),
                    pattern: pattern.clone(),
                    matched_text: line.clone(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub failure_markers: Vec<String>,
    pub success_markers: Vec<String>,
    pub checker_version: String,
}

impl Default for OracleConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        OracleConfig {
            failure_markers: s(&["error", "failed", "not found", "0 occurrences"]),
            success_markers: s(&["success", "successfully", "completed", "all tests passed", "done"]),
            checker_version: CHECKER_VERSION.into(),
        }
    }
}

fn find_marker<'a>(lines: impl IntoIterator<Item = &'a String>, markers: &[String]) -> Option<(&'a String, String)> {
    for line in lines {
        let lower = line.to_lowercase();
        if let Some(m) = markers.iter().find(|m| !m.is_empty() && lower.contains(&m.to_lowercase())) {
            return Some((line, m.clone()));
        }
    }
    None
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("run is for case {run} but candidate is {candidate}")]
    CaseMismatch { run: String, candidate: String },
    #[error("evidence bundle for {case_id} unreadable: {detail}")]
    Unreadable { case_id: String, detail: String },
}

pub fn classify_run(run: &RunRecord, candidate: &CaseCandidate, config: &OracleConfig) -> Result<Verdict, OracleError> {
    if run.case_id != candidate.case_id {
        return Err(OracleError::CaseMismatch {
            run: run.case_id.clone(),
            candidate: candidate.case_id.clone(),
        });
    }
    let mut refs = Vec::new();

    // (a) critical
    if let RunStatus::TerminatedEarly { reason, step_id, detail } = &run.status {
        let reason = serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(str::to_string));
        refs.push(EvidenceRef {
            check: Check::IncompleteRun,
            step_id: run.step(step_id).map(|s| s.step_id.clone()),
            path: None,
            detail: format!("{}: {detail}", reason.unwrap_or_default()),
        });
    }
    let executed = run.steps.len();
    if run.status.is_complete() && executed < candidate.instruction_sequence.len() {
        refs.push(EvidenceRef {
            check: Check::IncompleteRun,
            step_id: None,
            path: None,
            detail: format!("{executed} of {} steps executed", candidate.instruction_sequence.len()),
        });
    }
    let mut unexpected: BTreeSet<&String> = run.file_change.unexpected_changed_files.iter().collect();
    for s in &run.steps {
        unexpected.extend(&s.captured_trace.file_change.unexpected_changed_files);
    }
    for path in unexpected {
        let step = run
            .steps
            .iter()
            .find(|s| s.captured_trace.file_change.unexpected_changed_files.contains(path));
        refs.push(EvidenceRef {
            check: Check::UnexpectedChange,
            step_id: step.map(|s| s.step_id.clone()),
            path: Some(path.clone()),
            detail: "change outside the declared scope".into(),
        });
    }

    // (b) expected outcome
    let present = |p: &String| {
        run.has_artifact(p) || run.file_change.added_files.contains(p) || run.file_change.modified_files.contains(p)
    };
    for p in &candidate.expected_new_files {
        if !present(p) {
            refs.push(EvidenceRef {
                check: Check::MissingExpectedFile,
                step_id: None,
                path: Some(p.clone()),
                detail: "expected new file absent at end of run".into(),
            });
        }
    }
    for p in &candidate.expected_modified_files {
        if !run.file_change.added_files.contains(p) && !run.file_change.modified_files.contains(p) {
            refs.push(EvidenceRef {
                check: Check::ExpectedModificationAbsent,
                step_id: None,
                path: Some(p.clone()),
                detail: "expected modification not observed".into(),
            });
        }
    }
    for id in &candidate.post_rollback_verification_steps {
        let Some(trace) = run.step(id) else { continue };
        let failed_outcome = trace.outcome != StepOutcome::Completed;
        let marker = find_marker(step_lines(trace), &config.failure_markers);
        if failed_outcome || marker.is_some() {
            refs.push(EvidenceRef {
                check: Check::VerificationFailed,
                step_id: Some(id.clone()),
                path: None,
                detail: match marker {
                    Some((line, m)) => format!("{m:?} in {line:?}"),
                    None => format!("step outcome {:?}", trace.outcome),
                },
            });
        }
    }

    // (c) minor
    for m in match_rollback_failure(&run.steps, &candidate.rollback_steps, &candidate.rollback_failure_patterns) {
        refs.push(EvidenceRef {
            check: Check::RollbackFailurePattern,
            step_id: Some(m.step_id),
            path: None,
            detail: format!("{:?} in {:?}", m.pattern, m.matched_text),
        });
    }
    for trace in &run.steps {
        let fail = find_marker(&trace.captured_trace.event_trace_summary, &config.failure_markers);
        let ok = find_marker(&trace.captured_trace.agent_last_message_excerpt, &config.success_markers);
        if let (Some((fl, fm)), Some((sl, sm))) = (fail, ok) {
            refs.push(EvidenceRef {
                check: Check::Contradiction,
                step_id: Some(trace.step_id.clone()),
                path: None,
                detail: format!("event {fl:?} reports {fm:?} while message {sl:?} claims {sm:?}"),
            });
        }
    }

    refs.sort_by(|a, b| {
        b.check
            .category()
            .cmp(&a.check.category())
            .then_with(|| a.cmp(b))
    });
    let category = refs.first().map(|r| r.check.category()).unwrap_or(Category::NoAnomaly);
    Ok(Verdict {
        case_id: run.case_id.clone(),
        agent: run.agent.clone(),
        model: run.model.clone(),
        category,
        evidence: refs,
        checker_version: config.checker_version.clone(),
        advisory: None,
    })
}

/// Optional external review of a bundle. It can raise `no_anomaly` to
/// `minor_anomaly` but never lowers a rule-based category.
pub struct AdvisoryChecker<G> {
    generator: G,
}

pub const ADVISORY_PROMPT_TEMPLATE: &str = "\
You review the execution evidence of a coding agent performing a multi-step task.
Look for subtle irregularities: inconsistent claims, internal step failures the agent
silently recovered from, or outputs that contradict the events.

CASE:
{candidate}

RUN:
{run}

Reply with strict JSON: {\"anomaly\": true|false, \"rationale\": \"...\"}";

#[derive(Deserialize)]
struct AdvisoryReply {
    anomaly: bool,
    #[serde(default)]
    rationale: String,
}

impl<G: TextGenerator> AdvisoryChecker<G> {
    pub fn new(generator: G) -> Self {
        AdvisoryChecker { generator }
    }

    pub fn review(&self, run: &RunRecord, candidate: &CaseCandidate, verdict: &mut Verdict) {
        let prompt = ADVISORY_PROMPT_TEMPLATE
            .replace("{candidate}", &serde_json::to_string(candidate).unwrap_or_default())
            .replace("{run}", &serde_json::to_string(run).unwrap_or_default());
        let judge = format!("advisory:{}", self.generator.model());
        let advisory = match self.generator.complete(&prompt) {
            Ok(text) => match extract_json_object(&text).and_then(|j| serde_json::from_str::<AdvisoryReply>(j).ok()) {
                Some(r) => Advisory {
                    anomaly: r.anomaly,
                    rationale: r.rationale,
                    judge,
                },
                None => Advisory {
                    anomaly: false,
                    rationale: "unparseable advisory reply".into(),
                    judge,
                },
            },
            Err(e) => Advisory {
                anomaly: false,
                rationale: format!("advisory judge unavailable: {e}"),
                judge,
            },
        };
        if advisory.anomaly && verdict.category == Category::NoAnomaly {
            verdict.category = Category::MinorAnomaly;
            verdict.evidence.push(EvidenceRef {
                check: Check::AdvisoryJudge,
                step_id: run.steps.last().map(|s| s.step_id.clone()),
                path: None,
                detail: advisory.rationale.clone(),
            });
        }
        verdict.advisory = Some(advisory);
    }
}

//! Per-step and per-case execution records.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::workspace::FileChangeEvidence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepOutcome {
    Completed,
    TimedOut,
    AdapterError,
    /// The agent process exited nonzero.
    EarlyExit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedTrace {
    pub step_prompt: String,
    pub event_trace_summary: Vec<String>,
    pub agent_last_message_excerpt: Vec<String>,
    pub file_change: FileChangeEvidence,
}

/// Evidence for one executed step. On the wire the prompt key carries the
/// step number (`step_05_prompt`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "RawStepTrace", try_from = "RawStepTrace")]
pub struct StepTrace {
    pub case_id: String,
    pub candidate_id: u64,
    pub step_id: String,
    pub captured_trace: CapturedTrace,
    pub wall_time_ms: u64,
    pub outcome: StepOutcome,
    /// Unparsed adapter output, kept only when it could not be interpreted.
    pub raw_output: Option<String>,
}

pub fn prompt_key(step_id: &str) -> String {
    let digits: String = step_id.chars().filter(char::is_ascii_digit).collect();
    let n: usize = digits.parse().unwrap_or(0);
    format!("step_{n:02}_prompt")
}

#[derive(Serialize, Deserialize)]
struct RawCaptured {
    #[serde(flatten)]
    prompt: BTreeMap<String, String>,
    event_trace_summary: Vec<String>,
    agent_last_message_excerpt: Vec<String>,
    file_change: FileChangeEvidence,
}

#[derive(Serialize, Deserialize)]
struct RawStepTrace {
    case_id: String,
    candidate_id: u64,
    step_id: String,
    captured_trace: RawCaptured,
    wall_time_ms: u64,
    outcome: StepOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw_output: Option<String>,
}

impl From<StepTrace> for RawStepTrace {
    fn from(t: StepTrace) -> Self {
        let mut prompt = BTreeMap::new();
        prompt.insert(prompt_key(&t.step_id), t.captured_trace.step_prompt);
        RawStepTrace {
            case_id: t.case_id,
            candidate_id: t.candidate_id,
            step_id: t.step_id,
            captured_trace: RawCaptured {
                prompt,
                event_trace_summary: t.captured_trace.event_trace_summary,
                agent_last_message_excerpt: t.captured_trace.agent_last_message_excerpt,
                file_change: t.captured_trace.file_change,
            },
            wall_time_ms: t.wall_time_ms,
            outcome: t.outcome,
            raw_output: t.raw_output,
        }
    }
}

impl TryFrom<RawStepTrace> for StepTrace {
    type Error = String;

    fn try_from(mut r: RawStepTrace) -> Result<Self, String> {
        let key = prompt_key(&r.step_id);
        let step_prompt = r
            .captured_trace
            .prompt
            .remove(&key)
            .ok_or_else(|| format!("captured_trace lacks {key}"))?;
        if let Some(extra) = r.captured_trace.prompt.keys().next() {
            return Err(format!("unexpected captured_trace key {extra:?}"));
        }
        Ok(StepTrace {
            case_id: r.case_id,
            candidate_id: r.candidate_id,
            step_id: r.step_id,
            captured_trace: CapturedTrace {
                step_prompt,
                event_trace_summary: r.captured_trace.event_trace_summary,
                agent_last_message_excerpt: r.captured_trace.agent_last_message_excerpt,
                file_change: r.captured_trace.file_change,
            },
            wall_time_ms: r.wall_time_ms,
            outcome: r.outcome,
            raw_output: r.raw_output,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminationReason {
    Timeout,
    EarlyExit,
    AdapterError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    AllStepsExecuted,
    TerminatedEarly {
        reason: TerminationReason,
        step_id: String,
        detail: String,
    },
}

impl RunStatus {
    pub fn is_complete(&self) -> bool {
        matches!(self, RunStatus::AllStepsExecuted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub digest: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case_id: String,
    pub candidate_id: u64,
    pub agent: String,
    pub model: String,
    pub repo_mount: String,
    pub steps: Vec<StepTrace>,
    #[serde(flatten)]
    pub status: RunStatus,
    /// Provision → final, with expectations applied.
    pub file_change: FileChangeEvidence,
    /// Files under `output/` at the end of the run.
    pub artifacts: Vec<Artifact>,
    pub initial_snapshot: String,
    pub final_snapshot: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunRecord {
    pub fn step(&self, step_id: &str) -> Option<&StepTrace> {
        self.steps.iter().find(|s| s.step_id == step_id)
    }

    pub fn has_artifact(&self, path: &str) -> bool {
        self.artifacts.iter().any(|a| a.path == path)
    }
}

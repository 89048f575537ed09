//! Step-by-step execution of a case against an agent adapter.

mod adapter;
mod mock;
mod redact;
mod subprocess;
mod trace;

use std::io;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

pub use adapter::{AdapterError, AgentAdapter, AgentReply, AgentSession, Capabilities};
pub use mock::{Mutation, ScriptedAdapter, ScriptedStep, Transcript, TranscriptError};
pub use redact::{Redactor, MASK};
pub use subprocess::{compose_prefix_prompt, parse_output, CommandSpec, OutputFormat, SubprocessAdapter};
pub use trace::{
    prompt_key, Artifact, CapturedTrace, RunRecord, RunStatus, StepOutcome, StepTrace, TerminationReason,
};

use crate::clock::Clock;
use crate::fsutil::write_json;
use crate::instantiator::{CaseCandidate, InstructionStep};
use crate::workspace::{
    classify_changes, diff, ChangeScope, EvidenceStore, Snapshot, Workspace, WorkspaceError, OUTPUT_DIR,
};

pub const DEFAULT_PER_STEP_SECONDS: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub per_step: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            per_step: Duration::from_secs(DEFAULT_PER_STEP_SECONDS),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("cannot persist evidence: {0}")]
    Persist(#[from] io::Error),
}

/// Everything a run needs besides the case, agent and workspace.
pub struct RunEnv<'a> {
    pub clock: &'a dyn Clock,
    pub redactor: &'a Redactor,
    pub scope: ChangeScope,
    pub limits: Limits,
    pub evidence: Option<&'a EvidenceStore>,
    /// One trace file per executed step is written here as it completes.
    pub traces_dir: Option<&'a Path>,
}

fn millis_between(a: chrono::DateTime<chrono::Utc>, b: chrono::DateTime<chrono::Utc>) -> u64 {
    (b - a).num_milliseconds().max(0) as u64
}

/// Result of one step: its trace, the post-step snapshot, and a reason
/// when the step ended abnormally.
pub struct StepRun {
    pub trace: StepTrace,
    pub after: Snapshot,
    pub failure: Option<String>,
}

/// Step file evidence is relative to `baseline`, normally the snapshot taken
/// right after provisioning, so each trace shows the workspace state so far.
pub async fn run_step(
    session: &mut dyn AgentSession,
    candidate: &CaseCandidate,
    step: &InstructionStep,
    ws: &Workspace,
    baseline: &Snapshot,
    env: &RunEnv<'_>,
) -> Result<StepRun, ExecutorError> {
    let start = env.clock.now();
    let result = tokio::time::timeout(env.limits.per_step, session.submit(step)).await;
    let end = env.clock.now();

    let mut raw_output = None;
    let mut failure = None;
    let (outcome, reply) = match result {
        Ok(Ok(reply)) => (StepOutcome::Completed, reply),
        Ok(Err(AdapterError::EarlyExit { code, reply })) => {
            failure = Some(format!("agent exited with status {code}"));
            (StepOutcome::EarlyExit, reply)
        }
        Ok(Err(AdapterError::Malformed { raw })) => {
            raw_output = Some(env.redactor.redact(&raw));
            failure = Some("agent output could not be interpreted".into());
            (StepOutcome::AdapterError, AgentReply::default())
        }
        Ok(Err(e)) => {
            failure = Some(env.redactor.redact(&e.to_string()));
            (StepOutcome::AdapterError, AgentReply::default())
        }
        Err(_) => {
            failure = Some(format!("exceeded per-step limit of {}s", env.limits.per_step.as_secs_f64()));
            (StepOutcome::TimedOut, AgentReply::default())
        }
    };

    let after = ws.snapshot()?;
    let file_change = classify_changes(diff(baseline, &after), candidate, &env.scope);
    let trace = StepTrace {
        case_id: candidate.case_id.clone(),
        candidate_id: candidate.candidate_id,
        step_id: step.step_id.clone(),
        captured_trace: CapturedTrace {
            step_prompt: step.instruction.clone(),
            event_trace_summary: env.redactor.redact_all(&reply.events),
            agent_last_message_excerpt: env.redactor.redact_all(&reply.last_message),
            file_change,
        },
        wall_time_ms: millis_between(start, end),
        outcome,
        raw_output,
    };
    Ok(StepRun { trace, after, failure })
}

fn termination(outcome: StepOutcome) -> Option<TerminationReason> {
    match outcome {
        StepOutcome::Completed => None,
        StepOutcome::TimedOut => Some(TerminationReason::Timeout),
        StepOutcome::EarlyExit => Some(TerminationReason::EarlyExit),
        StepOutcome::AdapterError => Some(TerminationReason::AdapterError),
    }
}

/// Issues every step of `candidate` in order within one agent session,
/// stopping at the first step that does not complete.
pub async fn run_case(
    candidate: &CaseCandidate,
    adapter: &dyn AgentAdapter,
    ws: &Workspace,
    env: &RunEnv<'_>,
) -> Result<RunRecord, ExecutorError> {
    let started_at = env.clock.now();
    let initial = ws.snapshot()?;
    if let Some(store) = env.evidence {
        store.put("provision", &initial)?;
    }

    let mut steps = Vec::new();
    let mut status = RunStatus::AllStepsExecuted;

    match adapter.start_session(&candidate.case_id, ws.root()).await {
        Err(e) => {
            status = RunStatus::TerminatedEarly {
                reason: TerminationReason::AdapterError,
                step_id: candidate
                    .instruction_sequence
                    .first()
                    .map(|s| s.step_id.clone())
                    .unwrap_or_default(),
                detail: env.redactor.redact(&e.to_string()),
            };
        }
        Ok(mut session) => {
            for step in &candidate.instruction_sequence {
                let run = run_step(session.as_mut(), candidate, step, ws, &initial, env).await?;
                if let Some(store) = env.evidence {
                    store.put(&step.step_id, &run.after)?;
                }
                if let Some(dir) = env.traces_dir {
                    write_json(&dir.join(format!("{}.json", step.step_id)), &run.trace)?;
                }
                let reason = termination(run.trace.outcome);
                steps.push(run.trace);
                if let Some(reason) = reason {
                    status = RunStatus::TerminatedEarly {
                        reason,
                        step_id: step.step_id.clone(),
                        detail: run.failure.unwrap_or_default(),
                    };
                    break;
                }
            }
            session.close().await;
        }
    }

    let final_snapshot = ws.snapshot()?;
    let (initial_digest, final_digest) = (initial.digest(), final_snapshot.digest());
    if let Some(store) = env.evidence {
        store.put("final", &final_snapshot)?;
    }
    let artifacts = final_snapshot
        .restrict_to(OUTPUT_DIR)
        .entries
        .into_iter()
        .map(|(path, e)| Artifact {
            path,
            digest: e.digest,
            size: e.size,
        })
        .collect();
    let file_change = classify_changes(diff(&initial, &final_snapshot), candidate, &env.scope);

    Ok(RunRecord {
        case_id: candidate.case_id.clone(),
        candidate_id: candidate.candidate_id,
        agent: adapter.agent().to_string(),
        model: adapter.model().to_string(),
        repo_mount: ws.repo_mount.clone(),
        steps,
        status,
        file_change,
        artifacts,
        initial_snapshot: initial_digest,
        final_snapshot: final_digest,
        started_at,
        finished_at: env.clock.now(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ReplayClock;
    use crate::ids::step_id;
    use crate::workspace::ProvisionSpec;

    fn candidate(n: usize) -> CaseCandidate {
        CaseCandidate {
            case_id: "Test-0042".into(),
            candidate_id: 42,
            seed_template_id: "0042".into(),
            instruction_sequence: (1..=n)
                .map(|i| InstructionStep {
                    step_id: step_id(i),
                    instruction: format!("step {i}"),
                })
                .collect(),
            rollback_steps: vec![],
            rollback_failure_patterns: vec![],
            post_rollback_verification_steps: vec![],
            expected_new_files: vec![],
            expected_modified_files: vec![],
        }
    }

    fn provision(tmp: &Path) -> Workspace {
        let base = tmp.join("base");
        std::fs::create_dir_all(&base).unwrap();
        std::fs::write(base.join("mod.py"), "print(1)\n").unwrap();
        let spec = ProvisionSpec {
            case_id: "Test-0042",
            base_repo: &base,
            repo_name: "demo",
            overlay: None,
        };
        Workspace::provision(&tmp.join("ws"), &spec, chrono::Utc::now()).unwrap()
    }

    async fn run(c: &CaseCandidate, adapter: &dyn AgentAdapter, ws: &Workspace, limit: Duration) -> RunRecord {
        let clock = ReplayClock::new();
        let redactor = Redactor::default();
        let env = RunEnv {
            clock: &clock,
            redactor: &redactor,
            scope: ws.scope(),
            limits: Limits { per_step: limit },
            evidence: None,
            traces_dir: None,
        };
        run_case(c, adapter, ws, &env).await.unwrap()
    }

    #[tokio::test]
    async fn noop_single_step() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = provision(tmp.path());
        let r = run(&candidate(1), &ScriptedAdapter::noop(), &ws, Duration::from_secs(5)).await;
        assert_eq!(r.steps.len(), 1);
        assert_eq!(r.steps[0].outcome, StepOutcome::Completed);
        assert!(r.steps[0].captured_trace.event_trace_summary.is_empty());
        assert!(r.steps[0].captured_trace.file_change.is_empty());
        assert!(r.status.is_complete());
    }

    #[tokio::test]
    async fn events_and_message_captured_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = provision(tmp.path());
        let t = Transcript {
            case_id: "Test-0042".into(),
            steps: vec![ScriptedStep {
                step_id: "S01".into(),
                events: vec!["e1".into(), "e2".into(), "e3".into()],
                last_message: vec!["m1".into(), "m2".into()],
                ..Default::default()
            }],
        };
        let r = run(&candidate(1), &ScriptedAdapter::with_transcripts([t]), &ws, Duration::from_secs(5)).await;
        let ct = &r.steps[0].captured_trace;
        assert_eq!(ct.event_trace_summary, vec!["e1", "e2", "e3"]);
        assert_eq!(ct.agent_last_message_excerpt, vec!["m1", "m2"]);
        assert_eq!(ct.step_prompt, "step 1");
    }

    #[tokio::test]
    async fn timeout_terminates_run() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = provision(tmp.path());
        let t = Transcript {
            case_id: "Test-0042".into(),
            steps: vec![ScriptedStep {
                step_id: "S02".into(),
                delay_ms: 3_000,
                mutations: vec![Mutation::Write {
                    path: "output/late".into(),
                    content: "x".into(),
                }],
                ..Default::default()
            }],
        };
        let r = run(&candidate(3), &ScriptedAdapter::with_transcripts([t]), &ws, Duration::from_secs(1)).await;
        assert_eq!(r.steps.len(), 2);
        assert_eq!(r.steps[0].outcome, StepOutcome::Completed);
        assert_eq!(r.steps[1].outcome, StepOutcome::TimedOut);
        assert!(matches!(
            &r.status,
            RunStatus::TerminatedEarly { reason: TerminationReason::Timeout, step_id, .. } if step_id == "S02"
        ));
        assert!(!ws.root().join("output/late").exists());
    }

    #[tokio::test]
    async fn secrets_are_masked() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = provision(tmp.path());
        let t = Transcript {
            case_id: "Test-0042".into(),
            steps: vec![ScriptedStep {
                step_id: "S01".into(),
                events: vec!["export OPENAI_API_KEY=sk-live-abcdefghijklmnopqrstu".into()],
                ..Default::default()
            }],
        };
        let r = run(&candidate(1), &ScriptedAdapter::with_transcripts([t]), &ws, Duration::from_secs(5)).await;
        assert_eq!(r.steps[0].captured_trace.event_trace_summary, vec!["export OPENAI_API_KEY=[REDACTED]"]);
    }

    #[tokio::test]
    async fn malformed_output_keeps_raw() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = provision(tmp.path());
        let t = Transcript {
            case_id: "Test-0042".into(),
            steps: vec![ScriptedStep {
                step_id: "S01".into(),
                malformed_output: Some("\u{1}garbage".into()),
                ..Default::default()
            }],
        };
        let r = run(&candidate(2), &ScriptedAdapter::with_transcripts([t]), &ws, Duration::from_secs(5)).await;
        assert_eq!(r.steps.len(), 1);
        assert_eq!(r.steps[0].outcome, StepOutcome::AdapterError);
        assert_eq!(r.steps[0].raw_output.as_deref(), Some("\u{1}garbage"));
        assert!(r.steps[0].captured_trace.event_trace_summary.is_empty());
    }

    #[tokio::test]
    async fn artifacts_and_cumulative_changes() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = provision(tmp.path());
        let t = Transcript {
            case_id: "Test-0042".into(),
            steps: vec![
                ScriptedStep {
                    step_id: "S01".into(),
                    mutations: vec![Mutation::Write {
                        path: "output/r.txt".into(),
                        content: "ok".into(),
                    }],
                    ..Default::default()
                },
                ScriptedStep {
                    step_id: "S02".into(),
                    mutations: vec![Mutation::Append {
                        path: "repo_under_test/demo/mod.py".into(),
                        content: "# edit\n".into(),
                    }],
                    ..Default::default()
                },
            ],
        };
        let r = run(&candidate(2), &ScriptedAdapter::with_transcripts([t]), &ws, Duration::from_secs(5)).await;
        assert_eq!(r.artifacts.len(), 1);
        assert_eq!(r.artifacts[0].path, "output/r.txt");
        assert_eq!(r.steps[0].captured_trace.file_change.added_files, vec!["output/r.txt"]);
        assert_eq!(r.steps[1].captured_trace.file_change.unexpected_changed_files, vec!["repo_under_test/demo/mod.py"]);
        assert_eq!(r.file_change.unexpected_changed_files, vec!["repo_under_test/demo/mod.py"]);
    }
}

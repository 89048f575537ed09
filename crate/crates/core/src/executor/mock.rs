//! Scripted agent that replays a transcript file: canned events, messages
//! and workspace mutations per step.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adapter::{AdapterError, AgentAdapter, AgentReply, AgentSession, Capabilities};
use crate::instantiator::InstructionStep;
use crate::paths::check_relative;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Mutation {
    Write { path: String, content: String },
    Append { path: String, content: String },
    Delete { path: String },
}

impl Mutation {
    pub fn path(&self) -> &str {
        match self {
            Mutation::Write { path, .. } | Mutation::Append { path, .. } | Mutation::Delete { path } => path,
        }
    }

    fn apply(&self, root: &Path) -> io::Result<()> {
        check_relative(self.path()).map_err(|v| io::Error::new(io::ErrorKind::PermissionDenied, v.to_string()))?;
        let target = root.join(self.path());
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        match self {
            Mutation::Write { content, .. } => fs::write(&target, content),
            Mutation::Append { content, .. } => {
                use std::io::Write;
                let mut f = fs::OpenOptions::new().create(true).append(true).open(&target)?;
                f.write_all(content.as_bytes())
            }
            Mutation::Delete { .. } => match fs::remove_file(&target) {
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
                other => other,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedStep {
    pub step_id: String,
    #[serde(default)]
    pub events: Vec<String>,
    #[serde(default)]
    pub last_message: Vec<String>,
    #[serde(default)]
    pub mutations: Vec<Mutation>,
    /// Simulated think time; applied before the mutations.
    #[serde(default)]
    pub delay_ms: u64,
    /// Nonzero exit after the mutations.
    #[serde(default)]
    pub exit_code: Option<i32>,
    /// Emit this text as unparseable output.
    #[serde(default)]
    pub malformed_output: Option<String>,
    #[serde(default)]
    pub crash: Option<String>,
}

/// Steps not listed behave as no-ops.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub case_id: String,
    pub steps: Vec<ScriptedStep>,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("cannot read transcript {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed transcript {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Transcript {
    pub fn load(path: &Path) -> Result<Transcript, TranscriptError> {
        let text = fs::read_to_string(path).map_err(|source| TranscriptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| TranscriptError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
enum Source {
    Fixed(BTreeMap<String, Transcript>),
    Dir(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ScriptedAdapter {
    agent: String,
    model: String,
    source: Source,
}

impl ScriptedAdapter {
    /// Every step is a no-op.
    pub fn noop() -> Self {
        Self::with_transcripts(Vec::new())
    }

    pub fn with_transcripts(transcripts: impl IntoIterator<Item = Transcript>) -> Self {
        ScriptedAdapter {
            agent: "mock".into(),
            model: "scripted".into(),
            source: Source::Fixed(transcripts.into_iter().map(|t| (t.case_id.clone(), t)).collect()),
        }
    }

    /// Loads `<dir>/<case_id>.json` when a session starts.
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        ScriptedAdapter {
            agent: "mock".into(),
            model: "scripted".into(),
            source: Source::Dir(dir.into()),
        }
    }

    pub fn named(mut self, agent: impl Into<String>, model: impl Into<String>) -> Self {
        self.agent = agent.into();
        self.model = model.into();
        self
    }

    fn transcript(&self, case_id: &str) -> Result<Transcript, AdapterError> {
        match &self.source {
            Source::Fixed(map) => Ok(map.get(case_id).cloned().unwrap_or_default()),
            Source::Dir(dir) => {
                let path = dir.join(format!("{case_id}.json"));
                if !path.exists() {
                    return Ok(Transcript::default());
                }
                Transcript::load(&path).map_err(|e| AdapterError::Spawn(e.to_string()))
            }
        }
    }
}

#[async_trait]
impl AgentAdapter for ScriptedAdapter {
    fn agent(&self) -> &str {
        &self.agent
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            persistent_session: true,
        }
    }

    async fn start_session(&self, case_id: &str, workspace: &Path) -> Result<Box<dyn AgentSession>, AdapterError> {
        let t = self.transcript(case_id)?;
        Ok(Box::new(ScriptedSession {
            root: workspace.to_path_buf(),
            steps: t.steps.into_iter().map(|s| (s.step_id.clone(), s)).collect(),
        }))
    }
}

struct ScriptedSession {
    root: PathBuf,
    steps: BTreeMap<String, ScriptedStep>,
}

#[async_trait]
impl AgentSession for ScriptedSession {
    async fn submit(&mut self, step: &InstructionStep) -> Result<AgentReply, AdapterError> {
        let Some(script) = self.steps.get(&step.step_id).cloned() else {
            return Ok(AgentReply::default());
        };
        if script.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(script.delay_ms)).await;
        }
        if let Some(reason) = script.crash {
            return Err(AdapterError::Crashed(reason));
        }
        for m in &script.mutations {
            m.apply(&self.root)
                .map_err(|e| AdapterError::Crashed(format!("mutation on {}: {e}", m.path())))?;
        }
        if let Some(raw) = script.malformed_output {
            return Err(AdapterError::Malformed { raw });
        }
        let reply = AgentReply {
            events: script.events,
            last_message: script.last_message,
        };
        match script.exit_code {
            Some(code) if code != 0 => Err(AdapterError::EarlyExit { code, reply }),
            _ => Ok(reply),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutation_rejects_escape() {
        let tmp = tempfile::tempdir().unwrap();
        let m = Mutation::Write {
            path: "../outside".into(),
            content: "x".into(),
        };
        assert!(m.apply(tmp.path()).is_err());
        assert!(!tmp.path().parent().unwrap().join("outside").exists());
    }

    #[test]
    fn transcript_json_shape() {
        let t: Transcript = serde_json::from_str(
            r#"{"case_id":"Test-0001","steps":[{"step_id":"S01","events":["e"],
                "mutations":[{"op":"write","path":"output/a","content":"1"},{"op":"delete","path":"b"}]}]}"#,
        )
        .unwrap();
        assert_eq!(t.steps[0].mutations.len(), 2);
        assert_eq!(t.steps[0].mutations[1], Mutation::Delete { path: "b".into() });
    }
}

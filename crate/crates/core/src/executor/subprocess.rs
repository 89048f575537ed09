//! Adapters that drive vendor coding-agent CLIs as child processes.
//!
//! Credentials are inherited from the environment:
//! `ANTHROPIC_API_KEY` (claude), `OPENAI_API_KEY` (codex),
//! `GEMINI_API_KEY` or `GOOGLE_API_KEY` (gemini).

use std::path::{Path, PathBuf};
use std::process::Stdio;

use async_trait::async_trait;
use serde_json::Value;
use tokio::process::Command;

use super::adapter::{AdapterError, AgentAdapter, AgentReply, AgentSession, Capabilities};
use crate::instantiator::InstructionStep;

const MAX_LINE_CHARS: usize = 500;
const MAX_MESSAGE_LINES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    /// Plain text; every non-empty line is an event, the final paragraph is the message.
    Text,
    /// One JSON object per line.
    JsonLines,
}

/// How to invoke one CLI. `{prompt}` and `{model}` are substituted in args.
#[derive(Debug, Clone)]
pub struct CommandSpec {
    pub program: String,
    pub args: Vec<String>,
    /// Args for steps after the first when the CLI can resume its own session.
    pub resume_args: Option<Vec<String>>,
    pub format: OutputFormat,
    pub credential_env: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SubprocessAdapter {
    agent: String,
    model: String,
    spec: CommandSpec,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl SubprocessAdapter {
    pub fn new(agent: impl Into<String>, model: impl Into<String>, spec: CommandSpec) -> Self {
        SubprocessAdapter {
            agent: agent.into(),
            model: model.into(),
            spec,
        }
    }

    /// `claude -p` resumes the most recent conversation in the working
    /// directory with `--continue`, and each workspace is its own directory.
    pub fn claude(model: impl Into<String>) -> Self {
        let base = [
            "-p",
            "{prompt}",
            "--model",
            "{model}",
            "--output-format",
            "stream-json",
            "--verbose",
            "--permission-mode",
            "acceptEdits",
        ];
        let mut resume = strings(&base);
        resume.push("--continue".into());
        Self::new(
            "claude-code",
            model,
            CommandSpec {
                program: "claude".into(),
                args: strings(&base),
                resume_args: Some(resume),
                format: OutputFormat::JsonLines,
                credential_env: strings(&["ANTHROPIC_API_KEY"]),
            },
        )
    }

    pub fn codex(model: impl Into<String>) -> Self {
        Self::new(
            "codex-cli",
            model,
            CommandSpec {
                program: "codex".into(),
                args: strings(&["exec", "--json", "--full-auto", "--skip-git-repo-check", "--model", "{model}", "{prompt}"]),
                resume_args: None,
                format: OutputFormat::JsonLines,
                credential_env: strings(&["OPENAI_API_KEY"]),
            },
        )
    }

    pub fn gemini(model: impl Into<String>) -> Self {
        Self::new(
            "gemini-cli",
            model,
            CommandSpec {
                program: "gemini".into(),
                args: strings(&["--model", "{model}", "--yolo", "--prompt", "{prompt}"]),
                resume_args: None,
                format: OutputFormat::Text,
                credential_env: strings(&["GEMINI_API_KEY", "GOOGLE_API_KEY"]),
            },
        )
    }

    /// Adapter for a known agent name (`claude-code`, `codex-cli`, `gemini-cli`).
    pub fn for_agent(agent: &str, model: &str) -> Option<Self> {
        match agent {
            "claude-code" | "claude" => Some(Self::claude(model)),
            "codex-cli" | "codex" => Some(Self::codex(model)),
            "gemini-cli" | "gemini" => Some(Self::gemini(model)),
            _ => None,
        }
    }

    pub fn spec(&self) -> &CommandSpec {
        &self.spec
    }
}

#[async_trait]
impl AgentAdapter for SubprocessAdapter {
    fn agent(&self) -> &str {
        &self.agent
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            persistent_session: self.spec.resume_args.is_some(),
        }
    }

    async fn start_session(&self, _case_id: &str, workspace: &Path) -> Result<Box<dyn AgentSession>, AdapterError> {
        if !workspace.is_dir() {
            return Err(AdapterError::Spawn(format!("workspace {} missing", workspace.display())));
        }
        Ok(Box::new(SubprocessSession {
            spec: self.spec.clone(),
            model: self.model.clone(),
            root: workspace.to_path_buf(),
            history: Vec::new(),
        }))
    }
}

struct SubprocessSession {
    spec: CommandSpec,
    model: String,
    root: PathBuf,
    history: Vec<(InstructionStep, Vec<String>)>,
}

/// Folds earlier steps and replies into the prompt for CLIs that cannot
/// resume a session.
pub fn compose_prefix_prompt(history: &[(InstructionStep, Vec<String>)], step: &InstructionStep) -> String {
    if history.is_empty() {
        return step.instruction.clone();
    }
    let mut out = String::from("You are continuing a session in this workspace. Earlier steps and your replies:\n");
    for (prev, reply) in history {
        out.push_str(&format!("[{}] {}\n", prev.step_id, prev.instruction));
        for line in reply {
            out.push_str(&format!("[{} reply] {line}\n", prev.step_id));
        }
    }
    out.push_str(&format!("Current step [{}]: {}", step.step_id, step.instruction));
    out
}

#[async_trait]
impl AgentSession for SubprocessSession {
    async fn submit(&mut self, step: &InstructionStep) -> Result<AgentReply, AdapterError> {
        let (prompt, template) = match (&self.spec.resume_args, self.history.is_empty()) {
            (Some(resume), false) => (step.instruction.clone(), resume),
            (Some(_), true) | (None, true) => (step.instruction.clone(), &self.spec.args),
            (None, false) => (compose_prefix_prompt(&self.history, step), &self.spec.args),
        };
        let args: Vec<String> = template
            .iter()
            .map(|a| a.replace("{model}", &self.model).replace("{prompt}", &prompt))
            .collect();

        let child = Command::new(&self.spec.program)
            .args(&args)
            .current_dir(&self.root)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| AdapterError::Spawn(format!("{}: {e}", self.spec.program)))?;
        let output = child
            .wait_with_output()
            .await
            .map_err(|e| AdapterError::Crashed(e.to_string()))?;

        let stdout = String::from_utf8_lossy(&output.stdout);
        let stderr = String::from_utf8_lossy(&output.stderr);
        let mut reply = parse_output(&stdout, self.spec.format)?;
        reply
            .events
            .extend(stderr.lines().filter_map(normalize_line).map(|l| format!("stderr: {l}")));
        self.history.push((step.clone(), reply.last_message.clone()));

        match output.status.code() {
            Some(0) => Ok(reply),
            Some(code) => Err(AdapterError::EarlyExit { code, reply }),
            None => Err(AdapterError::Crashed("terminated by signal".into())),
        }
    }
}

fn normalize_line(line: &str) -> Option<String> {
    let collapsed = line.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return None;
    }
    Some(match collapsed.char_indices().nth(MAX_LINE_CHARS) {
        Some((cut, _)) => format!("{}…", &collapsed[..cut]),
        None => collapsed,
    })
}

fn message_lines(text: &str) -> Vec<String> {
    let lines: Vec<String> = text.lines().filter_map(normalize_line).collect();
    let skip = lines.len().saturating_sub(MAX_MESSAGE_LINES);
    lines.into_iter().skip(skip).collect()
}

pub fn parse_output(stdout: &str, format: OutputFormat) -> Result<AgentReply, AdapterError> {
    match format {
        OutputFormat::Text => {
            let events = stdout.lines().filter_map(normalize_line).collect();
            let last_paragraph = stdout.trim_end().rsplit("\n\n").next().unwrap_or("");
            Ok(AgentReply {
                events,
                last_message: message_lines(last_paragraph),
            })
        }
        OutputFormat::JsonLines => {
            let mut events = Vec::new();
            let mut last = None;
            let mut parsed = 0;
            for line in stdout.lines().filter(|l| !l.trim().is_empty()) {
                let Ok(v) = serde_json::from_str::<Value>(line) else { continue };
                parsed += 1;
                if let Some(e) = summarize_event(&v) {
                    events.push(e);
                }
                if let Some(m) = final_message(&v) {
                    last = Some(m);
                }
            }
            if parsed == 0 && !stdout.trim().is_empty() {
                return Err(AdapterError::Malformed { raw: stdout.to_string() });
            }
            Ok(AgentReply {
                events,
                last_message: last.map(|m| message_lines(&m)).unwrap_or_default(),
            })
        }
    }
}

fn text_of(v: &Value) -> Option<String> {
    for key in ["text", "result", "message", "command", "content"] {
        match v.get(key) {
            Some(Value::String(s)) => return Some(s.clone()),
            Some(Value::Array(items)) => {
                let joined: Vec<String> = items.iter().filter_map(text_of).collect();
                if !joined.is_empty() {
                    return Some(joined.join(" "));
                }
            }
            Some(obj @ Value::Object(_)) => {
                if let Some(s) = text_of(obj) {
                    return Some(s);
                }
            }
            _ => {}
        }
    }
    None
}

fn summarize_event(v: &Value) -> Option<String> {
    let kind = v.get("type").and_then(Value::as_str).unwrap_or("event");
    let inner = v.get("item").unwrap_or(v);
    let inner_kind = inner.get("type").and_then(Value::as_str).filter(|k| *k != kind);
    let label = match inner_kind {
        Some(k) => format!("{kind}/{k}"),
        None => kind.to_string(),
    };
    let body = text_of(inner).and_then(|t| normalize_line(&t));
    Some(match body {
        Some(b) => format!("{label}: {b}"),
        None => label,
    })
}

fn final_message(v: &Value) -> Option<String> {
    if v.get("type").and_then(Value::as_str) == Some("result") {
        return v.get("result").and_then(Value::as_str).map(str::to_string);
    }
    let item = v.get("item")?;
    if item.get("type").and_then(Value::as_str) == Some("agent_message") {
        return item.get("text").and_then(Value::as_str).map(str::to_string);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(id: &str, text: &str) -> InstructionStep {
        InstructionStep {
            step_id: id.into(),
            instruction: text.into(),
        }
    }

    #[test]
    fn text_output() {
        let r = parse_output("working\n  ran   tests \n\nAll done.\nBye.\n", OutputFormat::Text).unwrap();
        assert_eq!(r.events, vec!["working", "ran tests", "All done.", "Bye."]);
        assert_eq!(r.last_message, vec!["All done.", "Bye."]);
    }

    #[test]
    fn json_lines_output() {
        let out = r#"{"type":"system","subtype":"init"}
{"type":"item.completed","item":{"type":"command_execution","command":"rm output/a"}}
{"type":"item.completed","item":{"type":"agent_message","text":"Done.\nRemoved it."}}
"#;
        let r = parse_output(out, OutputFormat::JsonLines).unwrap();
        assert_eq!(r.events[1], "item.completed/command_execution: rm output/a");
        assert_eq!(r.last_message, vec!["Done.", "Removed it."]);
    }

    #[test]
    fn json_lines_garbage_is_malformed() {
        let err = parse_output("<<<binary>>>", OutputFormat::JsonLines).unwrap_err();
        assert!(matches!(err, AdapterError::Malformed { raw } if raw == "<<<binary>>>"));
    }

    #[test]
    fn prefix_prompt_carries_history() {
        let history = vec![(step("S01", "Run tests"), vec!["ok".to_string()])];
        let p = compose_prefix_prompt(&history, &step("S02", "Delete output"));
        assert!(p.contains("[S01] Run tests\n[S01 reply] ok\n"));
        assert!(p.ends_with("Current step [S02]: Delete output"));
        assert_eq!(compose_prefix_prompt(&[], &step("S01", "x")), "x");
    }

    #[cfg(unix)]
    #[tokio::test]
    async fn shell_agent_sees_prefix_and_runs_in_workspace() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = CommandSpec {
            program: "sh".into(),
            args: strings(&["-c", "printf '%s\\n' \"$1\"; pwd", "sh", "{prompt}"]),
            resume_args: None,
            format: OutputFormat::Text,
            credential_env: vec![],
        };
        let adapter = SubprocessAdapter::new("shell", "none", spec);
        assert!(!adapter.capabilities().persistent_session);
        let mut s = adapter.start_session("Test-0001", tmp.path()).await.unwrap();
        let r1 = s.submit(&step("S01", "first")).await.unwrap();
        assert_eq!(r1.events[0], "first");
        let cwd = std::fs::canonicalize(tmp.path()).unwrap();
        assert_eq!(r1.events[1], cwd.display().to_string());
        let r2 = s.submit(&step("S02", "second")).await.unwrap();
        assert!(r2.events.iter().any(|e| e == "[S01] first"));
        assert!(r2.events.iter().any(|e| e == "Current step [S02]: second"));
    }

    #[cfg(unix)]
    #[tokio::test]
    async fn nonzero_exit_is_early_exit() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = CommandSpec {
            program: "sh".into(),
            args: strings(&["-c", "echo partial; exit 3"]),
            resume_args: None,
            format: OutputFormat::Text,
            credential_env: vec![],
        };
        let adapter = SubprocessAdapter::new("shell", "none", spec);
        let mut s = adapter.start_session("c", tmp.path()).await.unwrap();
        match s.submit(&step("S01", "x")).await {
            Err(AdapterError::EarlyExit { code: 3, reply }) => assert_eq!(reply.events, vec!["partial"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vendor_adapters() {
        assert!(SubprocessAdapter::claude("m").capabilities().persistent_session);
        assert!(!SubprocessAdapter::codex("m").capabilities().persistent_session);
        assert_eq!(SubprocessAdapter::for_agent("gemini-cli", "x").unwrap().spec().program, "gemini");
        assert!(SubprocessAdapter::for_agent("unknown", "x").is_none());
    }
}

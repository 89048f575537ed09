//! Agent adapter contract.

use std::path::Path;

use async_trait::async_trait;
use thiserror::Error;

use crate::instantiator::InstructionStep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    /// Steps submitted to one session share the agent's context natively.
    pub persistent_session: bool,
}

/// What the agent produced for one step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentReply {
    pub events: Vec<String>,
    pub last_message: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdapterError {
    #[error("cannot start agent: {0}")]
    Spawn(String),
    #[error("agent crashed: {0}")]
    Crashed(String),
    #[error("agent exited with status {code}")]
    EarlyExit { code: i32, reply: AgentReply },
    #[error("agent output could not be interpreted")]
    Malformed { raw: String },
}

#[async_trait]
pub trait AgentSession: Send {
    /// Submits one step. Dropping the returned future must abandon the step.
    async fn submit(&mut self, step: &InstructionStep) -> Result<AgentReply, AdapterError>;

    async fn close(&mut self) {}
}

#[async_trait]
pub trait AgentAdapter: Send + Sync {
    fn agent(&self) -> &str;
    fn model(&self) -> &str;
    fn capabilities(&self) -> Capabilities;

    /// Opens a session rooted at `workspace`; the agent must not act outside it.
    async fn start_session(&self, case_id: &str, workspace: &Path) -> Result<Box<dyn AgentSession>, AdapterError>;
}

//! Text-generation endpoint used by the external compatibility judge and the
//! external task generator.

use std::collections::VecDeque;
use std::env;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("text-generation endpoint not configured: set {0}")]
    NotConfigured(&'static str),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("scripted generator exhausted")]
    Exhausted,
}

/// Anything that turns a prompt into a single text reply.
pub trait TextGenerator: Send + Sync {
    /// Identifies the model behind the endpoint; part of recorded-log keys.
    fn model(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// OpenAI-compatible chat-completions client.
///
/// Environment: `BEFUZZ_LLM_URL` (base URL, e.g. `https://api.openai.com/v1`),
/// `BEFUZZ_LLM_MODEL`, `BEFUZZ_LLM_API_KEY`.
pub struct ChatCompletionsClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl ChatCompletionsClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("reqwest client builds");
        ChatCompletionsClient {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            http,
        }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        let url = env::var("BEFUZZ_LLM_URL").map_err(|_| LlmError::NotConfigured("BEFUZZ_LLM_URL"))?;
        let model =
            env::var("BEFUZZ_LLM_MODEL").map_err(|_| LlmError::NotConfigured("BEFUZZ_LLM_MODEL"))?;
        Ok(Self::new(url, model, env::var("BEFUZZ_LLM_API_KEY").ok()))
    }
}

impl TextGenerator for ChatCompletionsClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.http.post(url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(LlmError::Transport(format!("HTTP {status}")));
        }
        let value: serde_json::Value = resp.json().map_err(|e| LlmError::BadResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

/// Replays canned replies in order. Used for offline tests.
pub struct ScriptedGenerator {
    model: String,
    replies: Mutex<VecDeque<Result<String, String>>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedGenerator {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedGenerator {
            model: "scripted".into(),
            replies: Mutex::new(replies.into_iter().map(|r| Ok(r.into())).collect()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    /// Queue a transport failure.
    pub fn push_error(&self, msg: impl Into<String>) {
        self.replies.lock().unwrap().push_back(Err(msg.into()));
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl TextGenerator for ScriptedGenerator {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        match self.replies.lock().unwrap().pop_front() {
            Some(Ok(r)) => Ok(r),
            Some(Err(e)) => Err(LlmError::Transport(e)),
            None => Err(LlmError::Exhausted),
        }
    }
}

/// Extracts the first balanced `{...}` object from a reply, tolerating prose or
/// code fences around it.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

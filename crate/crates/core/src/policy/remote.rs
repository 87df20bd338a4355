//! Blocking client for OpenAI-compatible chat-completion endpoints.
//!
//! Requests carry `model`, `messages[{role, content}]`, `temperature` and
//! `max_tokens`; the reply text is `choices[0].message.content`. Transport
//! errors, timeouts, 429 and 5xx replies and unparseable bodies are retried
//! with exponential backoff, retrying up to `retries` times.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{parse_model_step, render_model_step, BaseModel, Policy, PolicyError, StepSample};
use crate::trajectory::History;

pub const API_KEY_VAR: &str = "SAND_API_KEY";
pub const API_BASE_VAR: &str = "SAND_API_BASE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    /// Endpoint root, e.g. `http://localhost:8000/v1`.
    pub api_base: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// System prompt sent ahead of the conversation when acting as a policy.
    #[serde(default)]
    pub system_prompt: Option<String>,
}

fn default_retries() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    200
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_in_flight() -> usize {
    8
}

impl RemoteChatConfig {
    pub fn new(api_base: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            api_base: api_base.into(),
            api_key: None,
            model: model.into(),
            max_tokens: None,
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_in_flight(),
            system_prompt: None,
        }
    }

    /// Fills `api_base` / `api_key` from `SAND_API_BASE` / `SAND_API_KEY`
    /// when they are unset.
    pub fn with_env_defaults(mut self) -> Self {
        if self.api_base.is_empty() {
            if let Ok(base) = std::env::var(API_BASE_VAR) {
                self.api_base = base;
            }
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(API_KEY_VAR).ok();
        }
        self
    }
}

/// Counting semaphore bounding concurrent requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

pub struct RemoteChatClient {
    config: RemoteChatConfig,
    agent: ureq::Agent,
    limiter: Limiter,
    attempts: AtomicUsize,
    completions: AtomicUsize,
}

impl RemoteChatClient {
    pub fn new(config: RemoteChatConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let limiter = Limiter::new(config.max_in_flight);
        Self {
            config,
            agent,
            limiter,
            attempts: AtomicUsize::new(0),
            completions: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &RemoteChatConfig {
        &self.config
    }

    /// HTTP requests issued so far, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    /// Successful completions so far.
    pub fn completions(&self) -> usize {
        self.completions.load(Ordering::Relaxed)
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    pub fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, PolicyError> {
        let body = serde_json::to_string(&ChatRequest {
            model: &self.config.model,
            messages,
            temperature,
            max_tokens: self.config.max_tokens,
        })
        .map_err(|e| PolicyError::Invalid(e.to_string()))?;
        let _permit = self.limiter.acquire();
        let tries = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..tries {
            if attempt > 0 {
                let shift = (attempt - 1).min(16);
                thread::sleep(Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << shift)));
            }
            match self.attempt(&body) {
                Ok(text) => {
                    self.completions.fetch_add(1, Ordering::Relaxed);
                    return Ok(text);
                }
                Err(Attempt::Retry(msg)) => last = msg,
                Err(Attempt::Fatal(msg)) => return Err(PolicyError::PolicyUnavailable(msg)),
            }
        }
        Err(PolicyError::PolicyUnavailable(format!(
            "{} attempts failed; last error: {last}",
            tries
        )))
    }

    fn attempt(&self, body: &str) -> Result<String, Attempt> {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut request = self
            .agent
            .post(&self.url())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Retry(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Attempt::Retry("response has no choices".into()))?;
        if choice.finish_reason.as_deref() == Some("length") {
            return Err(Attempt::Fatal(
                "completion truncated at max_tokens".into(),
            ));
        }
        choice
            .message
            .content
            .ok_or_else(|| Attempt::Retry("response has no content".into()))
    }

    /// Conversation for the agent policy: the environment prompt, the task,
    /// then alternating model turns and observations.
    pub fn history_messages(&self, h: &History) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(2 + 2 * h.len());
        if let Some(system) = &self.config.system_prompt {
            messages.push(ChatMessage::new("system", system.clone()));
        }
        let mut first = h.instruction.text.clone();
        if let Some(obs) = &h.initial_observation {
            first.push('\n');
            first.push_str(obs.text());
        }
        messages.push(ChatMessage::new("user", first));
        for step in &h.steps {
            messages.push(ChatMessage::new(
                "assistant",
                render_model_step(&step.thought, &step.action),
            ));
            if let Some(obs) = &step.observation {
                messages.push(ChatMessage::new("user", obs.text()));
            }
        }
        messages
    }
}

impl Policy for RemoteChatClient {
    fn sample_step(&self, h: &History, temperature: f64, _seed: u64) -> Result<StepSample, PolicyError> {
        let text = self.chat(&self.history_messages(h), temperature)?;
        parse_model_step(&text)
    }
}

impl BaseModel for RemoteChatClient {
    fn complete_text(&self, prompt: &str, temperature: f64) -> Result<String, PolicyError> {
        if prompt.trim().is_empty() {
            return Err(PolicyError::Invalid("empty prompt".into()));
        }
        self.chat(&[ChatMessage::new("user", prompt)], temperature)
    }
}

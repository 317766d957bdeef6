//! Reasoner interface: message construction, a scripted reasoner, and an
//! OpenAI-compatible chat-completions client.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{Endpoint, HttpError};
use crate::symstate::Value;

/// System prompt sent as the first message of every request.
pub const SYSTEM_PROMPT: &str = include_str!("../templates/system_prompt.txt");
const USER_TASK: &str = include_str!("../templates/user_task.txt");

pub const RESULT_OPEN: &str = "<start_tool_result>";
pub const RESULT_CLOSE: &str = "<end_tool_result>";

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Wraps a committed result for injection into the conversation.
pub fn result_message(result: &Value) -> Message {
    Message::user(format!(
        "{RESULT_OPEN}\n{}\n{RESULT_CLOSE}",
        result.to_json()
    ))
}

/// Renders the per-call user block.
pub fn user_block(query: &str, state_summary: &str, has_results: bool) -> String {
    let results = if has_results {
        "(Verified results are provided in the messages below)"
    } else {
        "(Empty on first call)"
    };
    format!(
        "**Current State:**\n{state_summary}\n\n**Tool Results:**\n{results}\n\n**User Query:** {query}\n\n**Your Task:**\n{}",
        USER_TASK.trim_end()
    )
}

/// `system, history, user block, prior turns, pending result`.
///
/// `prior_turns` holds the assistant turns and result injections since the
/// query was posed; `pending_result` is a result committed after the last
/// prior turn.
pub fn build_messages(
    query: &str,
    history: &[Message],
    state_summary: &str,
    pending_result: Option<&Value>,
    prior_turns: &[Message],
) -> Vec<Message> {
    let has_results = pending_result.is_some()
        || prior_turns
            .iter()
            .any(|m| m.content.starts_with(RESULT_OPEN));
    let mut out = Vec::with_capacity(history.len() + prior_turns.len() + 3);
    out.push(Message::system(SYSTEM_PROMPT));
    out.extend(history.iter().cloned());
    out.push(Message::user(user_block(query, state_summary, has_results)));
    out.extend(prior_turns.iter().cloned());
    if let Some(r) = pending_result {
        out.push(result_message(r));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ReasonerRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        ReasonerRequest {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), ReasonerError> {
        match self.messages.first() {
            None => Err(ReasonerError::InvalidRequest(
                "request has no messages".into(),
            )),
            Some(m) if m.role != Role::System => Err(ReasonerError::InvalidRequest(
                "first message must be the system prompt".into(),
            )),
            _ if !(self.temperature >= 0.0 && self.temperature.is_finite()) => Err(
                ReasonerError::InvalidRequest("temperature must be finite and non-negative".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonerResponse {
    pub text: String,
    pub finish_reason: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReasonerError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("reasoner script exhausted after {0} turns")]
    ScriptExhausted(usize),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("unexpected completion response: {0}")]
    BadResponse(String),
}

pub trait Reasoner {
    fn complete(&mut self, request: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError>;
    fn id(&self) -> String;
}

/// Returns canned assistant turns in order, ignoring prompt content.
#[derive(Debug, Clone, Default)]
pub struct ScriptedReasoner {
    turns: VecDeque<String>,
    served: usize,
    requests: Vec<ReasonerRequest>,
}

impl ScriptedReasoner {
    pub fn new(turns: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ScriptedReasoner {
            turns: turns.into_iter().map(Into::into).collect(),
            served: 0,
            requests: Vec::new(),
        }
    }

    /// Every request received so far.
    pub fn requests(&self) -> &[ReasonerRequest] {
        &self.requests
    }
}

impl Reasoner for ScriptedReasoner {
    fn complete(&mut self, request: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        request.validate()?;
        self.requests.push(request.clone());
        let text = self
            .turns
            .pop_front()
            .ok_or(ReasonerError::ScriptExhausted(self.served))?;
        self.served += 1;
        Ok(ReasonerResponse {
            text,
            finish_reason: "stop".into(),
            usage: Usage::default(),
        })
    }

    fn id(&self) -> String {
        "scripted".into()
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpReasoner {
    pub endpoint: Endpoint,
    pub model: String,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl Reasoner for HttpReasoner {
    fn complete(&mut self, request: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        request.validate()?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let raw = self.endpoint.post_json(&body)?;
        let parsed: Completion =
            serde_json::from_value(raw).map_err(|e| ReasonerError::BadResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ReasonerError::BadResponse("no choices".into()))?;
        Ok(ReasonerResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_default(),
            usage: parsed.usage.unwrap_or_default(),
        })
    }

    fn id(&self) -> String {
        format!("http:{}", self.model)
    }
}

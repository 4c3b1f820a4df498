//! Storyboard planning through a chat-completion model.
//!
//! The request is a system message carrying the task description, one
//! user/assistant pair per in-context exemplar, and finally the story to
//! plan. Replies are parsed with [`parse_plan`]; unusable replies are fed
//! back to the model together with the error, up to
//! [`PlannerConfig::max_attempts`] attempts in total.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{mock_plan, parse_plan, serialize_plan, PlanError, StoryPrompt, StoryboardPlan};

/// Environment variable holding the bearer token for [`HttpChatClient`].
pub const API_KEY_ENV: &str = "STORYBOARD_API_KEY";

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

const MAX_EXEMPLARS: usize = 16;

pub const TASK_DESCRIPTION: &str = "\
You are a storyboard planner. Given a story prompt and a number of frames, \
plan one picture per frame so that the same characters appear consistently \
throughout the story.

Reason step by step before answering:
1. Identify every recurring character and write one canonical visual \
description for each (species or role, colours, clothing, distinctive marks). \
Give each character a short lowercase identifier.
2. Split the story into exactly the requested number of frames and write a \
detailed global description of each frame.
3. For every frame decide which characters are visible, write a local prompt \
for each of them that repeats its canonical description, and place it with a \
bounding box [x0, y0, x1, y1] in normalised image coordinates (origin at the \
top-left, 0 <= x0 < x1 <= 1, 0 <= y0 < y1 <= 1). Avoid overlapping boxes \
where the story allows it.

After your reasoning, output the final plan as one JSON document in a \
```json fenced block with the keys \"prompt\", \"frame_count\", \"subjects\" \
(identifier -> canonical description) and \"frames\" (each with \"index\" \
starting at 1, \"global_prompt\" and \"layouts\"; each layout has \
\"subject_id\", \"local_prompt\" and \"box\"). Every identifier in \"subjects\" \
must appear in at least one frame.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

/// Request body sent to the chat endpoint.
#[derive(Debug, Clone, Serialize)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub messages: &'a [ChatMessage],
    pub temperature: f64,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request failed: {0}")]
    Http(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Response(String),
}

/// A chat-completion transport. Implementations must tolerate concurrent
/// independent calls.
pub trait ChatClient: Send + Sync {
    /// Returns the text of the first choice.
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, TransportError>;
}

/// Generic JSON chat-completion endpoint (`POST {model, messages,
/// temperature}`, reply text at `choices[0].message.content`).
pub struct HttpChatClient {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatClient {
            endpoint: endpoint.into(),
            api_key,
            agent,
        }
    }

    /// Reads the bearer token from [`API_KEY_ENV`] if it is set.
    pub fn from_env(endpoint: impl Into<String>) -> Self {
        Self::new(endpoint, std::env::var(API_KEY_ENV).ok())
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| TransportError::Http(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Http(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body });
        }
        first_choice_text(&body)
    }
}

/// Extracts `choices[0].message.content` from a chat-completion response.
pub(crate) fn first_choice_text(body: &str) -> Result<String, TransportError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| TransportError::Response(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| TransportError::Response("no text at choices[0].message.content".into()))
}

/// Replays a fixed script of replies and records every request it receives.
#[derive(Default)]
pub struct ScriptedChatClient {
    replies: Mutex<VecDeque<Result<String, TransportError>>>,
    requests: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedChatClient {
    pub fn new(replies: impl IntoIterator<Item = Result<String, TransportError>>) -> Self {
        ScriptedChatClient {
            replies: Mutex::new(replies.into_iter().collect()),
            requests: Mutex::default(),
        }
    }

    /// Messages of every request received so far, in order.
    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedChatClient {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        self.requests
            .lock()
            .unwrap()
            .push(request.messages.to_vec());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(TransportError::Http("script exhausted".into())))
    }
}

/// Answers every planning request with [`mock_plan`], reading the story and
/// frame count back out of the final user message.
pub struct MockChatClient {
    pub subject_count: usize,
    pub seed: u64,
}

impl ChatClient for MockChatClient {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, TransportError> {
        let last = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| TransportError::Response("no user message".into()))?;
        let (text, frames) = read_request(&last.content)
            .ok_or_else(|| TransportError::Response("unrecognised planning request".into()))?;
        let prompt =
            StoryPrompt::new(text, frames).map_err(|e| TransportError::Response(e.to_string()))?;
        let plan = mock_plan(&prompt, self.subject_count, self.seed)
            .map_err(|e| TransportError::Response(e.to_string()))?;
        Ok(format!("```json\n{}```\n", serialize_plan(&plan)))
    }
}

const STORY_LINE: &str = "Story prompt: ";
const FRAMES_LINE: &str = "Number of frames: ";

fn request_text(prompt: &StoryPrompt) -> String {
    format!(
        "{STORY_LINE}{}\n{FRAMES_LINE}{}\n",
        prompt.text.trim(),
        prompt.frame_count
    )
}

fn read_request(content: &str) -> Option<(String, usize)> {
    let text = content.lines().find_map(|l| l.strip_prefix(STORY_LINE))?;
    let frames = content
        .lines()
        .find_map(|l| l.strip_prefix(FRAMES_LINE))?
        .trim()
        .parse()
        .ok()?;
    Some((text.to_owned(), frames))
}

/// An in-context example: a story request and the plan it should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub input: StoryPrompt,
    pub plan: StoryboardPlan,
}

/// The five hand-written exemplars shipped with the crate.
pub fn bundled_exemplars() -> Vec<Exemplar> {
    let plans: Vec<StoryboardPlan> = serde_json::from_str(include_str!("exemplars.json"))
        .expect("bundled exemplars are well-formed");
    plans
        .into_iter()
        .map(|plan| {
            debug_assert!(plan.validate().is_ok());
            Exemplar {
                input: plan.prompt.clone(),
                plan,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub exemplars: Vec<Exemplar>,
    pub task_description: String,
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_attempts: u32,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            exemplars: bundled_exemplars(),
            task_description: TASK_DESCRIPTION.to_owned(),
            endpoint: "http://localhost:8080/v1/chat/completions".to_owned(),
            model_name: "default".to_owned(),
            temperature: 0.2,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.exemplars.len() > MAX_EXEMPLARS {
            return Err(PlanError::Config(format!(
                "at most {MAX_EXEMPLARS} exemplars are supported, got {}",
                self.exemplars.len()
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(PlanError::Config(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.model_name.trim().is_empty() {
            return Err(PlanError::Config("model name must not be empty".into()));
        }
        if self.max_attempts == 0 {
            return Err(PlanError::Config("max_attempts must be at least 1".into()));
        }
        for (i, ex) in self.exemplars.iter().enumerate() {
            ex.plan
                .validate()
                .map_err(|e| PlanError::Config(format!("exemplar {i}: {e}")))?;
        }
        Ok(())
    }

    /// The opening conversation for `prompt`: task description, exemplar
    /// turns and the request itself.
    pub fn messages(&self, prompt: &StoryPrompt) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(2 * self.exemplars.len() + 2);
        messages.push(ChatMessage::new(
            Role::System,
            self.task_description.clone(),
        ));
        for ex in &self.exemplars {
            messages.push(ChatMessage::new(Role::User, request_text(&ex.input)));
            messages.push(ChatMessage::new(
                Role::Assistant,
                format!("```json\n{}```", serialize_plan(&ex.plan)),
            ));
        }
        messages.push(ChatMessage::new(Role::User, request_text(prompt)));
        messages
    }
}

/// A validated plan together with how it was obtained.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: StoryboardPlan,
    /// Number of requests sent, including the successful one.
    pub attempts: u32,
    /// Full conversation, ending with the accepted reply.
    pub transcript: Vec<ChatMessage>,
}

/// The JSON document inside a reply: the first ```json fence, else the first
/// bare fence, else the span from the first `{` to the last `}`.
pub fn extract_json_block(reply: &str) -> &str {
    for fence in ["```json", "```"] {
        if let Some(start) = reply.find(fence) {
            let body = &reply[start + fence.len()..];
            if let Some(end) = body.find("```") {
                return body[..end].trim();
            }
        }
    }
    match (reply.find('{'), reply.rfind('}')) {
        (Some(a), Some(b)) if a < b => &reply[a..=b],
        _ => reply.trim(),
    }
}

fn accept(reply: &str, prompt: &StoryPrompt) -> Result<StoryboardPlan, PlanError> {
    let plan = parse_plan(extract_json_block(reply))?;
    if plan.prompt.frame_count != prompt.frame_count {
        return Err(PlanError::invalid(format!(
            "frame_count: requested {} frames but the plan has {}",
            prompt.frame_count, plan.prompt.frame_count
        )));
    }
    Ok(plan)
}

/// Plans a storyboard for `prompt` with the model behind `client`.
///
/// Transport failures and unusable replies both consume an attempt. After an
/// unusable reply the model sees its own answer and the error before the next
/// attempt.
pub fn plan_storyboard(
    prompt: &StoryPrompt,
    config: &PlannerConfig,
    client: &dyn ChatClient,
) -> Result<PlanOutcome, PlanError> {
    prompt.validate()?;
    config.validate()?;

    let mut messages = config.messages(prompt);
    let mut last_err = None;
    for attempt in 1..=config.max_attempts {
        let request = ChatRequest {
            model: &config.model_name,
            messages: &messages,
            temperature: config.temperature,
        };
        let reply = match client.complete(&request) {
            Ok(reply) => reply,
            Err(source) => {
                if attempt == config.max_attempts {
                    return Err(PlanError::Transport {
                        attempts: attempt,
                        source,
                    });
                }
                continue;
            }
        };
        match accept(&reply, prompt) {
            Ok(plan) => {
                messages.push(ChatMessage::new(Role::Assistant, reply));
                return Ok(PlanOutcome {
                    plan,
                    attempts: attempt,
                    transcript: messages,
                });
            }
            Err(err) => {
                messages.push(ChatMessage::new(Role::Assistant, reply.clone()));
                messages.push(ChatMessage::new(
                    Role::User,
                    format!(
                        "Your previous reply could not be used: {err}. Reply again with only the \
                         corrected plan as one JSON document in a ```json block, following the \
                         schema of the earlier examples."
                    ),
                ));
                last_err = Some((err, reply));
            }
        }
    }

    let (err, raw) = last_err.expect("at least one attempt was made");
    Err(match err {
        PlanError::Validation { violations } => PlanError::Validation { violations },
        other => PlanError::Unparseable {
            attempts: config.max_attempts,
            message: other.to_string(),
            raw,
        },
    })
}

//! Language-model access.
//!
//! Every pipeline interaction with a model goes through a [`ModelClient`],
//! which wraps one per-request [`ModelSession`] and records each call.
//! Providers implement [`LanguageModel`]; two ship with the crate: a
//! [`ScriptedModel`] that replays fixture responses by role, and an
//! OpenAI-compatible [`HttpChatModel`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reformulate,
    Intent,
    Prune,
    Plan,
    Generate,
    Assess,
    Correct,
    /// Pre-processing: describe a decomposed example.
    Annotate,
    /// Adaptation: phrase a guideline from recurring corrections.
    Derive,
}

impl Role {
    pub const ALL: [Role; 9] = [
        Role::Reformulate,
        Role::Intent,
        Role::Prune,
        Role::Plan,
        Role::Generate,
        Role::Assess,
        Role::Correct,
        Role::Annotate,
        Role::Derive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Reformulate => "reformulate",
            Role::Intent => "intent",
            Role::Prune => "prune",
            Role::Plan => "plan",
            Role::Generate => "generate",
            Role::Assess => "assess",
            Role::Correct => "correct",
            Role::Annotate => "annotate",
            Role::Derive => "derive",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("no scripted response for role `{0}`")]
    NoScript(Role),
    #[error("model provider error: {0}")]
    Provider(String),
    #[error("model call timed out")]
    Timeout,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub trait LanguageModel: Send + Sync {
    /// Open a session scoped to one request.
    fn session(&self) -> Box<dyn ModelSession>;
}

pub trait ModelSession: Send {
    fn complete(&mut self, prompt: &str, role: Role) -> Result<String, ModelError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelCall {
    pub role: Role,
    pub prompt: String,
    pub ok: bool,
}

/// Per-request model handle with call accounting.
pub struct ModelClient {
    session: Box<dyn ModelSession>,
    calls: Vec<ModelCall>,
}

impl ModelClient {
    pub fn new(model: &dyn LanguageModel) -> Self {
        ModelClient {
            session: model.session(),
            calls: Vec::new(),
        }
    }

    pub fn complete(&mut self, prompt: &str, role: Role) -> Result<String, ModelError> {
        let result = self.session.complete(prompt, role);
        self.calls.push(ModelCall {
            role,
            prompt: prompt.to_string(),
            ok: result.is_ok(),
        });
        result
    }

    pub fn call_count(&self) -> usize {
        self.calls.len()
    }

    pub fn calls(&self) -> &[ModelCall] {
        &self.calls
    }

    pub fn roles(&self) -> Vec<Role> {
        self.calls.iter().map(|c| c.role).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedResponse {
    Text(String),
    Error(String),
    /// Return the prompt's `### Input Query` section verbatim.
    Echo,
}

impl<'de> Deserialize<'de> for ScriptedResponse {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Error { error: String },
            Echo { echo: bool },
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Text(s) => ScriptedResponse::Text(s),
            Raw::Error { error } => ScriptedResponse::Error(error),
            Raw::Echo { echo: true } => ScriptedResponse::Echo,
            Raw::Echo { echo: false } => ScriptedResponse::Text(String::new()),
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(ScriptedResponse),
    Many(Vec<ScriptedResponse>),
}

/// Deterministic stand-in for a model.
///
/// Each session walks its own cursor through the responses scripted for a
/// role; once the list is exhausted the last response repeats. A role with no
/// responses fails with [`ModelError::NoScript`].
#[derive(Debug, Clone, Default)]
pub struct ScriptedModel {
    script: Arc<BTreeMap<Role, Vec<ScriptedResponse>>>,
}

impl ScriptedModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with<I, S>(mut self, role: Role, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Arc::make_mut(&mut self.script).insert(
            role,
            responses
                .into_iter()
                .map(|s| ScriptedResponse::Text(s.into()))
                .collect(),
        );
        self
    }

    pub fn with_responses(mut self, role: Role, responses: Vec<ScriptedResponse>) -> Self {
        Arc::make_mut(&mut self.script).insert(role, responses);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: BTreeMap<Role, OneOrMany> =
            serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let script = raw
            .into_iter()
            .map(|(role, r)| {
                let list = match r {
                    OneOrMany::One(one) => vec![one],
                    OneOrMany::Many(many) => many,
                };
                (role, list)
            })
            .collect();
        Ok(ScriptedModel {
            script: Arc::new(script),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl LanguageModel for ScriptedModel {
    fn session(&self) -> Box<dyn ModelSession> {
        Box::new(ScriptedSession {
            script: Arc::clone(&self.script),
            cursors: HashMap::new(),
        })
    }
}

struct ScriptedSession {
    script: Arc<BTreeMap<Role, Vec<ScriptedResponse>>>,
    cursors: HashMap<Role, usize>,
}

impl ModelSession for ScriptedSession {
    fn complete(&mut self, prompt: &str, role: Role) -> Result<String, ModelError> {
        let responses = self
            .script
            .get(&role)
            .filter(|r| !r.is_empty())
            .ok_or(ModelError::NoScript(role))?;
        let cursor = self.cursors.entry(role).or_insert(0);
        let response = &responses[(*cursor).min(responses.len() - 1)];
        *cursor += 1;
        match response {
            ScriptedResponse::Text(text) => Ok(text.clone()),
            ScriptedResponse::Error(msg) => Err(ModelError::Provider(msg.clone())),
            ScriptedResponse::Echo => Ok(input_query_section(prompt).to_string()),
        }
    }
}

fn input_query_section(prompt: &str) -> &str {
    const HEADER: &str = "### Input Query";
    let Some(start) = prompt.rfind(HEADER) else {
        return prompt.trim();
    };
    let rest = &prompt[start + HEADER.len()..];
    let end = rest.find("\n###").unwrap_or(rest.len());
    rest[..end].trim()
}

/// OpenAI-compatible chat-completions provider.
#[derive(Debug, Clone)]
pub struct HttpChatModel {
    endpoint: String,
    api_key: Option<String>,
    model_id: String,
    timeout: Duration,
}

impl HttpChatModel {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        model_id: impl Into<String>,
        timeout: Duration,
    ) -> Self {
        HttpChatModel {
            endpoint: endpoint.into(),
            api_key,
            model_id: model_id.into(),
            timeout,
        }
    }
}

impl LanguageModel for HttpChatModel {
    fn session(&self) -> Box<dyn ModelSession> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Box::new(HttpSession {
            model: self.clone(),
            agent,
        })
    }
}

struct HttpSession {
    model: HttpChatModel,
    agent: ureq::Agent,
}

fn system_prompt(role: Role) -> &'static str {
    match role {
        Role::Reformulate => "You rewrite analytics questions into a canonical imperative request with explicit metrics, filters and timeframes. Follow the output format in the prompt.",
        Role::Intent => "You label the intent of analytics questions with a short snake_case label. Answer with the label only.",
        Role::Prune => "You identify database tables and columns irrelevant to a question. Follow the output format in the prompt.",
        Role::Plan => "You write step-by-step plans for SQL queries as a numbered list.",
        Role::Generate | Role::Correct => "You write a single SQLite SELECT query structured with WITH clauses. Answer with SQL only.",
        Role::Assess => "You check whether a query result answers a question. Answer OK or describe the problem.",
        Role::Annotate => "You describe SQL queries for analysts. Follow the output format in the prompt.",
        Role::Derive => "You turn recurring SQL corrections into one reusable guideline.",
    }
}

impl ModelSession for HttpSession {
    fn complete(&mut self, prompt: &str, role: Role) -> Result<String, ModelError> {
        let url = format!("{}/chat/completions", self.model.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.model.model_id,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system_prompt(role)},
                {"role": "user", "content": prompt},
            ],
        });
        let mut request = self.agent.post(&url);
        if let Some(key) = &self.model.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(&body).map_err(map_http_error)?;
        let value: serde_json::Value = response.body_mut().read_json().map_err(map_http_error)?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| ModelError::Provider("response missing choices[0].message.content".into()))
    }
}

fn map_http_error(e: ureq::Error) -> ModelError {
    match e {
        ureq::Error::Timeout(_) => ModelError::Timeout,
        other => ModelError::Provider(other.to_string()),
    }
}

/// Provider selection, read from the environment by [`ModelSettings::from_env`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    /// `scripted` or `openai`.
    pub provider: String,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model_id: Option<String>,
    pub timeout_secs: Option<u64>,
    /// Response fixture for the scripted provider.
    pub script: Option<PathBuf>,
}

pub const ENV_PROVIDER: &str = "SKETCHQL_MODEL_PROVIDER";
pub const ENV_ENDPOINT: &str = "SKETCHQL_MODEL_ENDPOINT";
pub const ENV_API_KEY: &str = "SKETCHQL_MODEL_API_KEY";
pub const ENV_MODEL_ID: &str = "SKETCHQL_MODEL_ID";
pub const ENV_TIMEOUT: &str = "SKETCHQL_MODEL_TIMEOUT_SECS";
pub const ENV_SCRIPT: &str = "SKETCHQL_MODEL_SCRIPT";

impl ModelSettings {
    /// Overlay environment variables on top of `self`.
    pub fn with_env(mut self) -> Result<Self, ModelError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(p) = var(ENV_PROVIDER) {
            self.provider = p;
        }
        if let Some(v) = var(ENV_ENDPOINT) {
            self.endpoint = Some(v);
        }
        if let Some(v) = var(ENV_API_KEY) {
            self.api_key = Some(v);
        }
        if let Some(v) = var(ENV_MODEL_ID) {
            self.model_id = Some(v);
        }
        if let Some(v) = var(ENV_TIMEOUT) {
            self.timeout_secs = Some(
                v.parse()
                    .map_err(|_| ModelError::Config(format!("{ENV_TIMEOUT}={v} is not an integer")))?,
            );
        }
        if let Some(v) = var(ENV_SCRIPT) {
            self.script = Some(PathBuf::from(v));
        }
        Ok(self)
    }

    pub fn from_env() -> Result<Self, ModelError> {
        Self::default().with_env()
    }

    pub fn build(&self) -> Result<Arc<dyn LanguageModel>, ModelError> {
        match self.provider.as_str() {
            "" | "scripted" => {
                let path = self.script.as_ref().ok_or_else(|| {
                    ModelError::Config(format!("scripted provider needs {ENV_SCRIPT}"))
                })?;
                Ok(Arc::new(ScriptedModel::from_file(path)?))
            }
            "openai" | "http" => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| ModelError::Config(format!("{ENV_ENDPOINT} is required")))?;
                let model_id = self
                    .model_id
                    .clone()
                    .ok_or_else(|| ModelError::Config(format!("{ENV_MODEL_ID} is required")))?;
                Ok(Arc::new(HttpChatModel::new(
                    endpoint,
                    self.api_key.clone(),
                    model_id,
                    Duration::from_secs(self.timeout_secs.unwrap_or(30)),
                )))
            }
            other => Err(ModelError::Config(format!("unknown provider `{other}`"))),
        }
    }
}

//! Language model backends.
//!
//! The protocol loop only sees the [`Backend`] trait. Three implementations
//! ship here: an OpenAI-compatible HTTP client, a scripted backend that
//! replays canned responses, and an oracle that walks the gold annotation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::case_model::{normalize_name, CaseFile, ECG_INVESTIGATION};
use crate::protocol::{count_tokens, AgentStep, FINAL_ANSWER};
use crate::tools::ToolKind;

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub system: String,
    pub prompt: String,
    pub stop_sequences: Vec<String>,
    pub temperature: f64,
    pub max_output_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency: Duration,
}

/// What a backend may know about the run besides the prompt. Only the
/// oracle looks at it.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    pub case: &'a CaseFile,
    pub steps: &'a [AgentStep],
    pub rag_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("credential environment variable {0} is not set")]
    Auth(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("script exhausted after {0} response(s)")]
    ScriptExhausted(usize),
    #[error("case {0} has no gold annotation")]
    MissingGold(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Produces raw model output for one turn.
    fn generate(&self, request: &CompletionRequest, ctx: &TurnContext<'_>) -> Result<Completion, BackendError>;

    /// Like [`Backend::generate`], but cut at the first stop sequence so a
    /// model can never write its own observation.
    fn complete(&self, request: &CompletionRequest, ctx: &TurnContext<'_>) -> Result<Completion, BackendError> {
        let mut completion = self.generate(request, ctx)?;
        let cut = truncate_at_stop(&completion.text, &request.stop_sequences);
        if cut.len() != completion.text.len() {
            completion.text = cut.to_string();
            completion.completion_tokens = count_tokens(&completion.text);
        }
        Ok(completion)
    }
}

pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

fn estimated(request: &CompletionRequest, text: String, latency: Duration) -> Completion {
    Completion {
        prompt_tokens: count_tokens(&request.system) + count_tokens(&request.prompt),
        completion_tokens: count_tokens(&text),
        text,
        latency,
    }
}

// ---------------------------------------------------------------- scripted

/// Replays a fixed list of responses, one per turn.
#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    responses: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, responses: Vec<String>) -> Self {
        ScriptedBackend {
            name: name.into(),
            responses,
            cursor: Mutex::new(0),
        }
    }

    pub fn from_file(name: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let responses: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(name, responses))
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &CompletionRequest, _ctx: &TurnContext<'_>) -> Result<Completion, BackendError> {
        let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        let text = self
            .responses
            .get(*cursor)
            .cloned()
            .ok_or(BackendError::ScriptExhausted(self.responses.len()))?;
        *cursor += 1;
        Ok(estimated(request, text, Duration::ZERO))
    }
}

// ------------------------------------------------------------------ oracle

/// Follows the gold annotation: history, examination, the relevant
/// investigations, every model output, guidelines for the gold diagnosis,
/// then the annotated answer.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    name: String,
}

impl OracleBackend {
    pub fn new(name: impl Into<String>) -> Self {
        OracleBackend { name: name.into() }
    }
}

impl Default for OracleBackend {
    fn default() -> Self {
        Self::new("oracle")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleMove {
    Act { tool: ToolKind, input: Option<String> },
    Answer(String),
}

/// The full oracle plan for a case.
pub fn oracle_plan(case: &CaseFile, rag_enabled: bool) -> Result<Vec<OracleMove>, BackendError> {
    let gold = case
        .gold
        .as_ref()
        .ok_or_else(|| BackendError::MissingGold(case.case_id.clone()))?;
    let act = |tool, input: Option<&str>| OracleMove::Act {
        tool,
        input: input.map(str::to_string),
    };
    let mut plan = vec![
        act(ToolKind::Symptom, None),
        act(ToolKind::PastMedicalHistory, None),
        act(ToolKind::Sign, None),
    ];
    for name in &gold.relevant_investigations {
        let name = normalize_name(name);
        if name == ECG_INVESTIGATION {
            plan.push(act(ToolKind::Ecg, None));
        } else if case.labs.contains_key(&name) {
            plan.push(act(ToolKind::LabInvestigation, Some(&name)));
        } else if case.imaging.contains_key(&name) {
            plan.push(act(ToolKind::ImagingStudy, Some(&name)));
        }
    }
    for model in case.ml_models.keys() {
        plan.push(act(ToolKind::MachineLearning, Some(model)));
    }
    if rag_enabled && !case.guidelines.is_empty() {
        plan.push(act(ToolKind::Guidelines, Some(&gold.diagnosis_label)));
    }
    let answer = if gold.final_answer_notes.trim().is_empty() {
        gold.diagnosis_label.clone()
    } else {
        gold.final_answer_notes.clone()
    };
    plan.push(OracleMove::Answer(answer));
    Ok(plan)
}

/// The oracle's output for the next turn given the steps taken so far.
pub fn oracle_policy(case: &CaseFile, steps: &[AgentStep], rag_enabled: bool) -> Result<String, BackendError> {
    let plan = oracle_plan(case, rag_enabled)?;
    let index = steps.len().min(plan.len() - 1);
    Ok(match &plan[index] {
        OracleMove::Act { tool, input } => format!(
            "Thought: I will consult the {}.\nAction: {}\nAction Input: {}",
            tool.name().to_lowercase(),
            tool.name(),
            input.as_deref().unwrap_or("")
        ),
        OracleMove::Answer(answer) => format!("Thought: I now know the final answer\n{FINAL_ANSWER} {answer}"),
    })
}

impl Backend for OracleBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &CompletionRequest, ctx: &TurnContext<'_>) -> Result<Completion, BackendError> {
        let text = oracle_policy(ctx.case, ctx.steps, ctx.rag_enabled)?;
        Ok(estimated(request, text, Duration::ZERO))
    }
}

// -------------------------------------------------------------------- http

pub const DEFAULT_API_KEY_ENV: &str = "EBM_API_KEY";

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_rpm() -> u32 {
    60
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

/// Settings for an OpenAI-compatible chat completions endpoint. The
/// credential itself is only ever read from the named environment variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

#[derive(Debug)]
pub struct HttpBackend {
    name: String,
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

/// Next permitted send time per endpoint, shared by every client in the
/// process so parallel runs respect one rate limit.
fn throttle_registry() -> &'static Mutex<HashMap<String, Instant>> {
    static REGISTRY: OnceLock<Mutex<HashMap<String, Instant>>> = OnceLock::new();
    REGISTRY.get_or_init(|| Mutex::new(HashMap::new()))
}

fn reserve_slot(endpoint: &str, requests_per_minute: u32) {
    if requests_per_minute == 0 {
        return;
    }
    let interval = Duration::from_secs(60) / requests_per_minute;
    let wait = {
        let mut registry = throttle_registry().lock().unwrap_or_else(|e| e.into_inner());
        let now = Instant::now();
        let slot = registry.get(endpoint).copied().filter(|t| *t > now).unwrap_or(now);
        registry.insert(endpoint.to_string(), slot + interval);
        slot - now
    };
    if !wait.is_zero() {
        debug!(?wait, endpoint, "throttling");
        thread::sleep(wait);
    }
}

enum Attempt {
    Done(Completion),
    Retry(BackendError),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        if config.endpoint.trim().is_empty() || config.model.trim().is_empty() {
            return Err(BackendError::Config("endpoint and model are required".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            name: config.name.clone().unwrap_or_else(|| config.model.clone()),
            config,
            client,
        })
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.prompt},
            ],
            "temperature": request.temperature,
            "stop": request.stop_sequences,
            "max_tokens": request.max_output_tokens,
        })
    }

    fn attempt(&self, key: &str, body: &Value, request: &CompletionRequest, attempts: u32) -> Attempt {
        reserve_slot(&self.config.endpoint, self.config.requests_per_minute);
        let started = Instant::now();
        let sent = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(key)
            .json(body)
            .send();
        let response = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout { attempts }),
            Err(e) if e.is_connect() => return Attempt::Retry(BackendError::Transport(e.to_string())),
            Err(e) => return Attempt::Fail(BackendError::Transport(e.to_string())),
        };
        let status = response.status();
        if status.as_u16() == 429 {
            return Attempt::Retry(BackendError::RateLimited { attempts });
        }
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout { attempts }),
            Err(e) => return Attempt::Fail(BackendError::Transport(e.to_string())),
        };
        if status.is_server_error() {
            return Attempt::Retry(BackendError::Http { status: status.as_u16(), body: text });
        }
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Attempt::Fail(BackendError::Auth(self.config.api_key_env.clone()));
        }
        if !status.is_success() {
            return Attempt::Fail(BackendError::Http { status: status.as_u16(), body: text });
        }
        match parse_chat_response(&text) {
            Ok((content, usage)) => {
                let mut completion = estimated(request, content, started.elapsed());
                if let Some((prompt, completion_tokens)) = usage {
                    completion.prompt_tokens = prompt;
                    completion.completion_tokens = completion_tokens;
                }
                Attempt::Done(completion)
            }
            Err(e) => Attempt::Fail(e),
        }
    }
}

/// Extracts `choices[0].message.content` and optional token usage.
pub fn parse_chat_response(body: &str) -> Result<(String, Option<(usize, usize)>), BackendError> {
    let value: Value = serde_json::from_str(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
    let usage = value.get("usage").and_then(|u| {
        let prompt = u.get("prompt_tokens")?.as_u64()?;
        let completion = u.get("completion_tokens")?.as_u64()?;
        Some((prompt as usize, completion as usize))
    });
    Ok((content.to_string(), usage))
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &CompletionRequest, _ctx: &TurnContext<'_>) -> Result<Completion, BackendError> {
        let key = std::env::var(&self.config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendError::Auth(self.config.api_key_env.clone()))?;
        let body = self.request_body(request);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&key, &body, request, attempts) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempts > self.config.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    let delay = Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16)));
                    warn!(error = %e, ?delay, attempts, "retrying");
                    thread::sleep(delay);
                }
            }
        }
    }
}

// ------------------------------------------------------------------ config

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Http(HttpConfig),
    Scripted {
        #[serde(default)]
        name: Option<String>,
        script: PathBuf,
    },
    Oracle {
        #[serde(default)]
        name: Option<String>,
    },
}

impl BackendConfig {
    /// Reads a config file. Script paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let mut config: BackendConfig = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        if let BackendConfig::Scripted { script, .. } = &mut config {
            if script.is_relative() {
                if let Some(dir) = path.parent() {
                    *script = dir.join(&*script);
                }
            }
        }
        Ok(config)
    }

    /// Builds a fresh backend; scripted backends start from the top.
    pub fn build(&self) -> Result<Box<dyn Backend>, BackendError> {
        Ok(match self {
            BackendConfig::Http(config) => Box::new(HttpBackend::new(config.clone())?),
            BackendConfig::Scripted { name, script } => Box::new(ScriptedBackend::from_file(
                name.clone().unwrap_or_else(|| "scripted".into()),
                script,
            )?),
            BackendConfig::Oracle { name } => {
                Box::new(OracleBackend::new(name.clone().unwrap_or_else(|| "oracle".into())))
            }
        })
    }
}

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::DecodeParams;
use crate::prompting::{Part, PromptBundle, Role};

#[derive(Debug, Error)]
pub enum BackendError {
    /// Network failures, timeouts, 429 and 5xx responses.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
    #[error("response carries no token log-probabilities")]
    MissingLogprobs,
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }
}

pub struct CompletionRequest<'a> {
    pub instance_id: &'a str,
    pub config_id: &'a str,
    pub bundle: &'a PromptBundle,
    pub params: &'a DecodeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// `None` when the backend did not report log-probabilities.
    pub token_logprobs: Option<Vec<f64>>,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError>;
}

/// Registry entry for a named backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Chat-completions-style HTTP endpoint.
    #[serde(rename = "openai")]
    OpenAi {
        base_url: String,
        model: String,
        /// Name of the environment variable holding the API key, if any.
        #[serde(default)]
        api_key_env: Option<String>,
    },
    /// Scripted offline backend.
    Mock { script: PathBuf },
}

impl BackendSpec {
    pub fn build(
        &self,
        name: &str,
        image_root: &Path,
        params: &DecodeParams,
    ) -> Result<Box<dyn Backend>, BackendError> {
        match self {
            BackendSpec::OpenAi {
                base_url,
                model,
                api_key_env,
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        BackendError::Fatal(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                Ok(Box::new(OpenAiBackend::new(
                    name,
                    base_url,
                    model,
                    api_key,
                    image_root.to_path_buf(),
                    Duration::from_secs(params.timeout_secs),
                )?))
            }
            BackendSpec::Mock { script } => Ok(Box::new(MockBackend::from_file(name, script)?)),
        }
    }
}

// ---------------------------------------------------------------------------

/// One scripted response. `config_id` narrows the entry to one configuration;
/// entries without it answer for any configuration of the instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_id: Option<String>,
    pub answer: String,
    /// `None` simulates a backend that omits log-probabilities.
    pub logprobs: Option<Vec<f64>>,
    /// Number of transient failures to emit before answering.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fail_times: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

/// Deterministic backend answering from a script keyed by instance and config.
pub struct MockBackend {
    name: String,
    entries: HashMap<(String, Option<String>), MockEntry>,
    failures_left: Mutex<HashMap<(String, Option<String>), usize>>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(name: &str, entries: Vec<MockEntry>) -> Self {
        let mut map = HashMap::new();
        let mut failures = HashMap::new();
        for e in entries {
            let key = (e.instance_id.clone(), e.config_id.clone());
            failures.insert(key.clone(), e.fail_times);
            map.insert(key, e);
        }
        MockBackend {
            name: name.to_string(),
            entries: map,
            failures_left: Mutex::new(failures),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_file(name: &str, path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Fatal(format!("cannot read mock script {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| {
                BackendError::Fatal(format!("{}:{}: {e}", path.display(), i + 1))
            })?);
        }
        Ok(Self::new(name, entries))
    }

    /// Number of `complete` calls served so far, failures included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let specific = (request.instance_id.to_string(), Some(request.config_id.to_string()));
        let generic = (request.instance_id.to_string(), None);
        let key = if self.entries.contains_key(&specific) {
            specific
        } else {
            generic
        };
        let entry = self.entries.get(&key).ok_or_else(|| {
            BackendError::Fatal(format!(
                "mock script has no entry for instance '{}' (config {})",
                request.instance_id, request.config_id
            ))
        })?;
        {
            let mut left = self.failures_left.lock().expect("mock lock poisoned");
            let n = left.get_mut(&key).expect("failure counter per entry");
            if *n > 0 {
                *n -= 1;
                return Err(BackendError::Transient("scripted failure".into()));
            }
        }
        Ok(Completion {
            text: entry.answer.clone(),
            token_logprobs: entry.logprobs.clone(),
        })
    }
}

// ---------------------------------------------------------------------------

/// Chat-completions client requesting per-token log-probabilities.
pub struct OpenAiBackend {
    name: String,
    url: String,
    model: String,
    api_key: Option<String>,
    image_root: PathBuf,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(
        name: &str,
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        image_root: PathBuf,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(OpenAiBackend {
            name: name.to_string(),
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            image_root,
            client,
        })
    }

    fn image_url(&self, path: &str) -> Result<String, BackendError> {
        let full = self.image_root.join(path);
        let bytes = fs::read(&full)
            .map_err(|e| BackendError::Fatal(format!("cannot read image {}: {e}", full.display())))?;
        let mime = match full
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/png",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    /// Request body in the chat-completions wire schema.
    pub fn request_body(&self, bundle: &PromptBundle, params: &DecodeParams) -> Result<Value, BackendError> {
        let mut messages = vec![json!({"role": "system", "content": bundle.system_message})];
        for turn in &bundle.turns {
            let message = match turn.role {
                Role::Assistant => {
                    let text: String = turn
                        .parts
                        .iter()
                        .filter_map(|p| match p {
                            Part::Text { text } => Some(text.as_str()),
                            Part::Image { .. } => None,
                        })
                        .collect();
                    json!({"role": "assistant", "content": text})
                }
                Role::User => {
                    let content = turn
                        .parts
                        .iter()
                        .map(|p| match p {
                            Part::Text { text } => Ok(json!({"type": "text", "text": text})),
                            Part::Image { path } => Ok(json!({
                                "type": "image_url",
                                "image_url": {"url": self.image_url(path)?}
                            })),
                        })
                        .collect::<Result<Vec<_>, BackendError>>()?;
                    json!({"role": "user", "content": content})
                }
            };
            messages.push(message);
        }
        Ok(json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "logprobs": true,
        }))
    }
}

/// Extracts answer text and token log-probabilities from a response body.
pub(crate) fn parse_chat_response(body: &Value) -> Result<Completion, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Fatal("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Fatal("response has no message content".into()))?
        .to_string();
    let token_logprobs = match choice.pointer("/logprobs/content").and_then(Value::as_array) {
        Some(items) => Some(
            items
                .iter()
                .map(|t| {
                    t.get("logprob")
                        .and_then(Value::as_f64)
                        .ok_or_else(|| BackendError::Fatal("token entry without logprob".into()))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    Ok(Completion {
        text,
        token_logprobs,
    })
}

impl Backend for OpenAiBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let body = self.request_body(request.bundle, request.params)?;
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let body: Value = resp
            .json()
            .map_err(|e| BackendError::Fatal(format!("invalid JSON response: {e}")))?;
        let completion = parse_chat_response(&body)?;
        if completion.token_logprobs.is_none() {
            return Err(BackendError::MissingLogprobs);
        }
        Ok(completion)
    }
}

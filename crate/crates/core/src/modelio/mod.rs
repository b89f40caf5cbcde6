//! Model backends and reply parsing.
//!
//! [`ChatBackend`] is the one seam between the probes and a model. Two
//! implementations ship: [`HttpChatBackend`] for OpenAI-compatible
//! chat-completions endpoints and [`SyntheticBackend`], a deterministic
//! stand-in with planted behaviour used for calibration and tests.

pub mod http;
pub mod parse;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::domain::{Condition, Label, McqItem, RequestParams};

pub use http::HttpChatBackend;
pub use parse::{parse_brief, parse_cot, BriefSchema};
pub use synthetic::{synthetic_respond, SyntheticBackend, SyntheticModelConfig};

/// Suffix appended to the user message for the single repair retry.
pub const REPAIR_SUFFIX: &str = "Your previous reply was not valid JSON. Reply with ONLY the JSON object.";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Envelope(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Synthetic,
}

/// Backend settings as loaded from a model config file. The API key itself is
/// never stored here, only the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Identifier written into every run record.
    pub model_id: String,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub api_key_env_name: String,
    #[serde(default)]
    pub model_name: String,
    /// Left unset to use the provider default.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub min_request_interval_ms: u64,
    /// First backoff delay; doubles per retry up to 30 s.
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub synthetic: Option<SyntheticModelConfig>,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    4
}
fn default_backoff() -> u64 {
    500
}

impl BackendConfig {
    pub fn synthetic(model_id: impl Into<String>, cfg: SyntheticModelConfig) -> Self {
        BackendConfig {
            kind: BackendKind::Synthetic,
            model_id: model_id.into(),
            endpoint_url: None,
            api_key_env_name: String::new(),
            model_name: String::new(),
            temperature: None,
            max_tokens: None,
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            min_request_interval_ms: 0,
            backoff_base_ms: default_backoff(),
            synthetic: Some(cfg),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_id.trim().is_empty() {
            return Err(ModelError::Config("model_id is empty".into()));
        }
        if let Some(t) = self.max_tokens {
            if t < 64 {
                return Err(ModelError::Config(format!("max_tokens = {t} is below 64")));
            }
        }
        if !(self.request_timeout_secs > 0.0) {
            return Err(ModelError::Config("request_timeout_secs must be positive".into()));
        }
        match self.kind {
            BackendKind::HttpChat => {
                if self.endpoint_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
                    return Err(ModelError::Config("http_chat requires endpoint_url".into()));
                }
                if self.model_name.trim().is_empty() {
                    return Err(ModelError::Config("http_chat requires model_name".into()));
                }
                if self.api_key_env_name.trim().is_empty() {
                    return Err(ModelError::Config("http_chat requires api_key_env_name".into()));
                }
            }
            BackendKind::Synthetic => {
                self.synthetic.clone().unwrap_or_default().validate()?;
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: BackendConfig = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builds the backend described by `cfg`.
pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn ChatBackend>, ModelError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::HttpChat => Box::new(HttpChatBackend::new(cfg.clone())?),
        BackendKind::Synthetic => Box::new(SyntheticBackend::new(
            cfg.model_id.clone(),
            cfg.synthetic.clone().unwrap_or_default(),
        )?),
    })
}

/// What the probe knows about a query, beyond the prompt text. Remote
/// backends ignore it; the synthetic backend answers from it.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    /// The item as presented (after any repositioning or redaction).
    pub item: &'a McqItem,
    pub condition: Condition,
    pub hinted_label: Option<Label>,
}

#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    /// Empty means no system message.
    pub system: &'a str,
    pub user: String,
    pub context: QueryContext<'a>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    /// HTTP attempts made, including retries.
    pub attempts: u32,
    pub usage: Option<Usage>,
}

pub trait ChatBackend: Send + Sync {
    fn model_id(&self) -> &str;
    /// Short description for report provenance.
    fn describe(&self) -> String;
    fn request_params(&self) -> RequestParams;
    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, ModelError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
    fn request_params(&self) -> RequestParams {
        (**self).request_params()
    }
    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, ModelError> {
        (**self).chat(req)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
    fn request_params(&self) -> RequestParams {
        (**self).request_params()
    }
    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, ModelError> {
        (**self).chat(req)
    }
}

/// Wraps a backend and counts `chat` calls.
pub struct Counted<B> {
    inner: B,
    calls: std::sync::atomic::AtomicUsize,
}

impl<B: ChatBackend> Counted<B> {
    pub fn new(inner: B) -> Self {
        Counted {
            inner,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for Counted<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn describe(&self) -> String {
        self.inner.describe()
    }
    fn request_params(&self) -> RequestParams {
        self.inner.request_params()
    }
    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, ModelError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.chat(req)
    }
}

/// Sends `req`, parses the reply, and if `acceptable` rejects the parse,
/// resends once with [`REPAIR_SUFFIX`] appended. Returns the parse that was
/// kept and whether the retry fired.
pub fn chat_with_repair<T>(
    backend: &dyn ChatBackend,
    req: &ChatRequest<'_>,
    parse: impl Fn(&str) -> T,
    acceptable: impl Fn(&T) -> bool,
) -> Result<(T, bool), ModelError> {
    let first = parse(&backend.chat(req)?.text);
    if acceptable(&first) {
        return Ok((first, false));
    }
    let retry = ChatRequest {
        user: format!("{}\n\n{REPAIR_SUFFIX}", req.user),
        ..req.clone()
    };
    Ok((parse(&backend.chat(&retry)?.text), true))
}

//! OpenAI-compatible chat-completions client with retries and spacing.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::{json, Value};

use super::{BackendConfig, ChatBackend, ChatRequest, ChatResponse, ModelError, Usage};
use crate::domain::RequestParams;

const BACKOFF_CAP: Duration = Duration::from_secs(30);

/// Enforces a minimum gap between request starts.
#[derive(Debug)]
struct Spacer {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl Spacer {
    fn wait(&self) {
        let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
        let now = Instant::now();
        let start = match *next {
            Some(t) if t > now => {
                std::thread::sleep(t - now);
                t
            }
            _ => now,
        };
        *next = Some(start + self.interval);
    }
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fatal(ModelError),
}

#[derive(Debug)]
pub struct HttpChatBackend {
    cfg: BackendConfig,
    agent: ureq::Agent,
    spacer: Spacer,
}

impl HttpChatBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let spacer = Spacer {
            interval: Duration::from_millis(cfg.min_request_interval_ms),
            next: Mutex::new(None),
        };
        Ok(HttpChatBackend { cfg, agent, spacer })
    }

    fn body(&self, req: &ChatRequest<'_>) -> Value {
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(json!({"role": "system", "content": req.system}));
        }
        messages.push(json!({"role": "user", "content": req.user}));
        let mut body = json!({"model": self.cfg.model_name, "messages": messages});
        if let Some(t) = self.cfg.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = self.cfg.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = Duration::from_millis(self.cfg.backoff_base_ms);
        let full = base.saturating_mul(1u32 << retry.min(16)).min(BACKOFF_CAP);
        let half = full / 2;
        half + half.mul_f64(rand::rng().random::<f64>())
    }

    fn attempt(&self, key: &str, body: &Value) -> Attempt {
        self.spacer.wait();
        let url = self.cfg.endpoint_url.as_deref().unwrap_or_default();
        let result = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {key}"))
            .header("Content-Type", "application/json")
            .send(body.to_string().as_bytes());
        let mut resp = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match parse_envelope(&text) {
                Ok((content, usage)) => Attempt::Done(ChatResponse {
                    text: content,
                    attempts: 0,
                    usage,
                }),
                Err(e) => Attempt::Fatal(e),
            },
            401 | 403 => Attempt::Fatal(ModelError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(ModelError::Status {
                status,
                body: text.chars().take(500).collect(),
            }),
        }
    }
}

/// Extracts `choices[0].message.content` and optional token usage.
pub fn parse_envelope(text: &str) -> Result<(String, Option<Usage>), ModelError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ModelError::Envelope(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ModelError::Envelope("missing choices[0].message.content".into()))?;
    let usage = v.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64),
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64),
    });
    Ok((content.to_string(), usage))
}

impl ChatBackend for HttpChatBackend {
    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    fn describe(&self) -> String {
        format!(
            "http_chat({} @ {})",
            self.cfg.model_name,
            self.cfg.endpoint_url.as_deref().unwrap_or_default()
        )
    }

    fn request_params(&self) -> RequestParams {
        RequestParams {
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_tokens,
            seed: None,
        }
    }

    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, ModelError> {
        let var = &self.cfg.api_key_env_name;
        let key = std::env::var(var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| ModelError::Auth(format!("environment variable {var} is not set")))?;
        let body = self.body(req);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for n in 0..attempts {
            if n > 0 {
                std::thread::sleep(self.backoff(n - 1));
            }
            match self.attempt(&key, &body) {
                Attempt::Done(mut r) => {
                    r.attempts = n + 1;
                    return Ok(r);
                }
                Attempt::Retry(msg) => last = msg,
                Attempt::Fatal(e) => return Err(e),
            }
        }
        Err(ModelError::RetriesExhausted { attempts, last })
    }
}

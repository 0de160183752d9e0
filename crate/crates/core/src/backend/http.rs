use std::env;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendError};
use crate::prompting::PromptBundle;

pub const API_BASE_ENV: &str = "GRADEPIPE_API_BASE";
pub const API_KEY_ENV: &str = "GRADEPIPE_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: String,
    pub model_id: String,
    /// Reasoning models reject a temperature parameter; it is left out of the
    /// request for them.
    pub supports_temperature: bool,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn from_env(model_id: &str) -> Result<Self, BackendError> {
        let base_url = env::var(API_BASE_ENV)
            .map_err(|_| BackendError::Config(format!("{API_BASE_ENV} is not set")))?;
        let api_key = env::var(API_KEY_ENV)
            .map_err(|_| BackendError::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(HttpConfig {
            base_url,
            api_key,
            model_id: model_id.to_string(),
            supports_temperature: model_accepts_temperature(model_id),
            timeout: Duration::from_secs(120),
        })
    }
}

/// o-series reasoning models do not expose temperature.
pub fn model_accepts_temperature(model_id: &str) -> bool {
    let id = model_id.trim().to_ascii_lowercase();
    !(id.starts_with('o') && id[1..].starts_with(|c: char| c.is_ascii_digit()))
}

/// Blocking client for a chat-completions style endpoint.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    pub fn request_body(&self, bundle: &PromptBundle, user_content: Value) -> Value {
        let mut messages = Vec::new();
        if !bundle.system_message.is_empty() {
            messages.push(json!({"role": "system", "content": bundle.system_message}));
        }
        messages.push(json!({"role": "user", "content": user_content}));
        let mut body = json!({
            "model": self.config.model_id,
            "messages": messages,
        });
        if self.config.supports_temperature {
            body["temperature"] = json!(bundle.temperature);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<String, BackendError> {
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Config(format!("HTTP {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no message content".into()))
    }
}

fn media_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "application/octet-stream",
    }
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn supports_temperature(&self) -> bool {
        self.config.supports_temperature
    }

    fn transcribe(&self, image: &Path, bundle: &PromptBundle) -> Result<String, BackendError> {
        let bytes = std::fs::read(image).map_err(|source| BackendError::Io {
            path: image.display().to_string(),
            source,
        })?;
        let data_url = format!(
            "data:{};base64,{}",
            media_type(image),
            base64::engine::general_purpose::STANDARD.encode(bytes)
        );
        let content = json!([
            {"type": "text", "text": bundle.user_message},
            {"type": "image_url", "image_url": {"url": data_url}},
        ]);
        self.post(&self.request_body(bundle, content))
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        self.post(&self.request_body(bundle, json!(bundle.user_message)))
    }
}

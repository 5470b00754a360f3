use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::time::Duration;

use super::{estimate_tokens, Backend, ChatRequest, ChatResponse, GateError};

/// Per-provider field mapping for the generic chat-completion body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WireFormat {
    pub max_tokens_field: String,
    /// JSON pointer to the completion text in the response body.
    pub text_pointer: String,
    pub prompt_tokens_pointer: String,
    pub output_tokens_pointer: String,
    pub send_seed: bool,
}

impl Default for WireFormat {
    fn default() -> Self {
        Self {
            max_tokens_field: "max_tokens".into(),
            text_pointer: "/choices/0/message/content".into(),
            prompt_tokens_pointer: "/usage/prompt_tokens".into(),
            output_tokens_pointer: "/usage/completion_tokens".into(),
            send_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub id: String,
    pub endpoint: String,
    /// Name of the environment variable that holds the bearer token. The token
    /// itself is read at send time and never stored.
    pub auth_env_var: String,
    pub wire: WireFormat,
    pub timeout: Duration,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    /// Fails early when the key variable is absent.
    pub fn check_auth(&self) -> Result<(), GateError> {
        self.token().map(|_| ())
    }

    fn token(&self) -> Result<String, GateError> {
        std::env::var(&self.config.auth_env_var)
            .ok()
            .filter(|v| !v.is_empty())
            .ok_or_else(|| GateError::AuthMissing(self.config.auth_env_var.clone()))
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let wire = &self.config.wire;
        let mut body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        body[wire.max_tokens_field.as_str()] = json!(request.max_output_tokens);
        if let (true, Some(seed)) = (wire.send_seed, request.seed) {
            body["seed"] = json!(seed);
        }
        body
    }

    pub fn parse_body(&self, request: &ChatRequest, body: &Value) -> Result<ChatResponse, GateError> {
        let wire = &self.config.wire;
        let text = body
            .pointer(&wire.text_pointer)
            .and_then(Value::as_str)
            .ok_or_else(|| GateError::Transport {
                message: format!("response has no text at {}", wire.text_pointer),
                transient: false,
            })?
            .to_string();
        let count = |ptr: &str| body.pointer(ptr).and_then(Value::as_u64);
        Ok(ChatResponse {
            prompt_tokens: count(&wire.prompt_tokens_pointer)
                .unwrap_or_else(|| estimate_tokens(&request.prompt_text())),
            output_tokens: count(&wire.output_tokens_pointer).unwrap_or_else(|| estimate_tokens(&text)),
            text,
            backend_id: self.config.id.clone(),
            cached: false,
        })
    }
}

fn status_error(status: u16) -> GateError {
    match status {
        429 => GateError::RateLimited,
        408 | 500..=599 => GateError::Transport { message: format!("HTTP {status}"), transient: true },
        _ => GateError::Transport { message: format!("HTTP {status}"), transient: false },
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GateError> {
        let token = self.token()?;
        let transport = |e: ureq::Error| {
            let transient = matches!(e, ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed);
            GateError::Transport { message: e.to_string(), transient }
        };
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", format!("Bearer {token}"))
            .send_json(self.request_body(request))
            .map_err(transport)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(status_error(status));
        }
        let body: Value = resp.body_mut().read_json().map_err(transport)?;
        self.parse_body(request, &body)
    }
}

//! HTTP transport for OpenAI-style chat-completion endpoints.

use std::time::Duration;

use serde_json::{json, Value};

use super::{EndpointSpec, TransportError};
use crate::config::SamplingSpec;

/// Sends one prompt and returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, endpoint: &EndpointSpec, sampling: &SamplingSpec, prompt: &str)
        -> Result<String, TransportError>;
}

/// Request body: a single user message, no system prompt.
pub fn request_body(endpoint: &EndpointSpec, sampling: &SamplingSpec, prompt: &str) -> Value {
    let mut body = json!({
        "model": endpoint.model_name,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": sampling.temperature,
    });
    let obj = body.as_object_mut().expect("object literal");
    if let Some(max_tokens) = endpoint.max_tokens {
        obj.insert("max_tokens".into(), json!(max_tokens));
    }
    for (k, v) in &endpoint.extra {
        obj.entry(k.clone()).or_insert_with(|| v.clone());
    }
    body
}

/// Pulls `choices[0].message.content` out of a completion reply. A null
/// content field is returned as empty text so the caller treats it as an
/// unparseable answer rather than a protocol failure.
pub fn extract_content(reply: &Value) -> Result<String, TransportError> {
    let message = reply
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .and_then(|c| c.get("message"))
        .ok_or_else(|| TransportError::Protocol("reply has no choices[0].message".into()))?;
    match message.get("content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Ok(String::new()),
        Some(other) => Err(TransportError::Protocol(format!("message content is not text: {other}"))),
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: &EndpointSpec) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| TransportError::Protocol(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(
        &self,
        endpoint: &EndpointSpec,
        sampling: &SamplingSpec,
        prompt: &str,
    ) -> Result<String, TransportError> {
        let mut req = self.client.post(endpoint.completions_url()).json(&request_body(endpoint, sampling, prompt));
        if let Ok(key) = std::env::var(&endpoint.api_key_env_var) {
            if !key.is_empty() {
                req = req.bearer_auth(key);
            }
        }
        let resp = req.send().map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError::Protocol(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let reply: Value = resp.json().map_err(|e| TransportError::Protocol(format!("reply is not JSON: {e}")))?;
        extract_content(&reply)
    }
}

use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};
use thiserror::Error;

use super::ledger::Usage;
use super::templates::RenderedPrompt;

#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying (network failure, 429, 5xx).
    #[error("transient transport failure: {0}")]
    Retryable(String),
    #[error("transport failure: {0}")]
    Fatal(String),
}

/// Something that answers a rendered prompt with text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, TransportError>;
}

/// OpenAI-compatible `POST {endpoint}/chat/completions` client.
pub struct HttpTransport {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: Option<f64>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        temperature: Option<f64>,
        timeout: Duration,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            temperature,
            agent,
        }
    }

    fn request_body(&self, prompt: &RenderedPrompt) -> Value {
        let mut parts = vec![json!({"type": "text", "text": prompt.text})];
        for handle in &prompt.images {
            // Handles that are not readable files (e.g. bare hashes) are skipped.
            if let Ok(bytes) = std::fs::read(Path::new(handle)) {
                let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{b64}")}
                }));
            }
        }
        let content = if parts.len() == 1 {
            json!(prompt.text)
        } else {
            Value::Array(parts)
        };
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
        });
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, TransportError> {
        let url = format!("{}/chat/completions", self.endpoint);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(prompt))
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(TransportError::Retryable(format!("HTTP {status}: {body}")));
        }
        if status >= 400 {
            return Err(TransportError::Fatal(format!("HTTP {status}: {body}")));
        }
        let v: Value = serde_json::from_str(&body)
            .map_err(|e| TransportError::Fatal(format!("response is not JSON: {e}")))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| TransportError::Fatal("response has no choices[0].message.content".into()))?
            .to_string();
        let usage = Usage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        };
        Ok(Completion { text, usage })
    }
}

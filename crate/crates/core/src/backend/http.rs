//! Chat-completions over HTTP(S).

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, BackendProfile, ChatBackend, ChatError, ChatRequest};
use crate::promptgen::ChatMessage;

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    token: Option<String>,
}

impl HttpBackend {
    /// Reads the bearer token from the profile's environment variable now,
    /// so a missing credential fails before any request.
    pub fn from_profile(profile: &BackendProfile) -> Result<HttpBackend, BackendError> {
        let endpoint = profile.endpoint.as_deref().ok_or_else(|| BackendError::Config("missing endpoint".into()))?;
        let model = profile.model.clone().ok_or_else(|| BackendError::Config("missing model".into()))?;
        let token = match &profile.credential_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("backend `{}`: environment variable {var} is not set", profile.name))
            })?),
            None => None,
        };
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(profile.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(HttpBackend {
            agent: config.into(),
            url: completions_url(endpoint),
            model,
            temperature: profile.temperature,
            max_tokens: profile.max_new_tokens,
            token,
        })
    }
}

fn completions_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else {
        format!("{base}/chat/completions")
    }
}

/// Request body. Only temperature and the token cap are set; every other
/// sampling parameter is left to the server.
pub fn encode_chat_request(model: &str, messages: &[ChatMessage], temperature: f64, max_tokens: u32) -> String {
    json!({
        "model": model,
        "messages": messages,
        "temperature": temperature,
        "max_tokens": max_tokens,
    })
    .to_string()
}

/// Extracts `choices[0].message.content` from a response body.
pub fn decode_chat_reply(body: &str) -> Result<String, ChatError> {
    let value: Value = serde_json::from_str(body).map_err(|e| ChatError::Malformed(format!("invalid JSON: {e}")))?;
    if let Some(err) = value.get("error") {
        return Err(ChatError::Malformed(format!("error object in reply: {err}")));
    }
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ChatError::Malformed("no choices[0].message.content".into()))
}

fn classify_status(status: u16, body: &str) -> ChatError {
    let detail = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
    match status {
        401 | 403 => ChatError::Auth(detail),
        429 => ChatError::RateLimited(detail),
        408 | 409 | 425 => ChatError::Transient(detail),
        500..=599 => ChatError::Transient(detail),
        _ => ChatError::Fatal(detail),
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, ChatError> {
        let body = encode_chat_request(&self.model, request.messages, self.temperature, self.max_tokens);
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = call.send(body.as_bytes()).map_err(|e| ChatError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ChatError::Transient(format!("reading body: {e}")))?;
        if status == 200 {
            decode_chat_reply(&text)
        } else {
            Err(classify_status(status, &text))
        }
    }
}

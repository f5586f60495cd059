//! Chat-completions style HTTP backend.
//!
//! Request: `POST <endpoint>` with `model`, `temperature`, `max_tokens` and a
//! `messages` array; images ride on the last user message as base64 PNG data
//! URLs. The reply text is the first choice's message content.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{AttemptError, Backend, BackendConfig, BackendReply, CallContext, GatewayError, VlmRequest};
use crate::costmap::rgb_to_png;
use crate::prompt::TurnRole;

/// API key read from the environment. Never printed.
#[derive(Clone)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: String) -> Self {
        Secret(value)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug)]
pub struct HttpChatBackend {
    endpoint: String,
    api_key: Option<Secret>,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::Config("http_chat requires an endpoint".into()))?;
        let api_key = match &config.api_key_env {
            Some(var) => {
                let value = std::env::var(var).map_err(|_| {
                    GatewayError::Config(format!("environment variable {var} is not set"))
                })?;
                Some(Secret::new(value))
            }
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpChatBackend {
            endpoint,
            api_key,
            agent,
        })
    }
}

/// JSON body for one request.
pub fn build_chat_body(request: &VlmRequest, model_tag: &str) -> Result<Value, AttemptError> {
    let last_user = request
        .prompt
        .turns
        .iter()
        .rposition(|t| t.role == TurnRole::User);
    let mut messages = Vec::with_capacity(request.prompt.turns.len());
    for (i, turn) in request.prompt.turns.iter().enumerate() {
        match turn.role {
            TurnRole::System => messages.push(json!({"role": "system", "content": turn.text})),
            TurnRole::User => {
                let mut content = vec![json!({"type": "text", "text": turn.text})];
                if Some(i) == last_user {
                    for image in &request.images {
                        let png = rgb_to_png(image)
                            .map_err(|e| AttemptError::BadResponse(format!("encode image: {e}")))?;
                        let url = format!(
                            "data:image/png;base64,{}",
                            base64::engine::general_purpose::STANDARD.encode(png)
                        );
                        content.push(json!({"type": "image_url", "image_url": {"url": url}}));
                    }
                }
                messages.push(json!({"role": "user", "content": content}));
            }
        }
    }
    Ok(json!({
        "model": model_tag,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
        "messages": messages,
    }))
}

/// Pull the reply text and usage metadata out of a response body.
pub fn extract_reply(body: &Value) -> Result<BackendReply, AttemptError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| AttemptError::BadResponse("no choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => return Err(AttemptError::BadResponse(format!("unexpected content {other}"))),
    };
    let mut metadata = BTreeMap::new();
    if let Some(Value::Object(usage)) = body.get("usage") {
        for (k, v) in usage {
            metadata.insert(format!("usage.{k}"), v.clone());
        }
    }
    if let Some(model) = body.get("model") {
        metadata.insert("model".into(), model.clone());
    }
    if let Some(reason) = body.pointer("/choices/0/finish_reason") {
        metadata.insert("finish_reason".into(), reason.clone());
    }
    Ok(BackendReply { text, metadata })
}

fn excerpt(s: &str) -> String {
    s.chars().take(300).collect()
}

impl Backend for HttpChatBackend {
    fn call(
        &self,
        request: &VlmRequest,
        model_tag: &str,
        _ctx: CallContext,
    ) -> Result<BackendReply, AttemptError> {
        let body = build_chat_body(request, model_tag)?;
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {}", key.expose()));
        }
        let mut response = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(AttemptError::Timeout),
            Err(e) => return Err(AttemptError::Network(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(AttemptError::Timeout),
            Err(e) => return Err(AttemptError::Network(e.to_string())),
        };
        if !(200..300).contains(&status) {
            return Err(AttemptError::Status {
                code: status,
                body: excerpt(&text),
            });
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::BadResponse(format!("{e}: {}", excerpt(&text))))?;
        extract_reply(&parsed)
    }
}

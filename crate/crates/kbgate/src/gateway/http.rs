//! Chat-completions HTTP backend.
//!
//! Speaks the de facto serving interface: POST `{base_url}/chat/completions`
//! with a role-tagged message whose content parts are text or image (URL or
//! base64 data URL). Auth comes from the environment variable the profile
//! names; the value never leaves the request header.

use std::time::Instant;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gateway::{
    Backend, EndpointProfile, FinishReason, GenerationRequest, GenerationResponse,
};
use crate::template::Segment;

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    auth_env: Option<String>,
}

impl HttpBackend {
    pub fn new(profile: &EndpointProfile) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_millis(profile.request_timeout_ms))
            .build()
            .expect("reqwest client");
        let endpoint = format!(
            "{}/chat/completions",
            profile.base_url.trim_end_matches('/')
        );
        Self {
            client,
            endpoint,
            auth_env: profile.auth_env.clone(),
        }
    }

    fn auth_token(&self) -> Result<Option<String>> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                _ => Err(Error::Auth(format!(
                    "environment variable {var} is not set"
                ))),
            },
        }
    }

    fn content_parts(request: &GenerationRequest<'_>) -> Vec<Value> {
        request
            .message
            .segments
            .iter()
            .map(|seg| match seg {
                Segment::Text(t) => json!({"type": "text", "text": t}),
                Segment::Image(crate::domain::ImageRef::Uri { uri }) => {
                    json!({"type": "image_url", "image_url": {"url": uri}})
                }
                Segment::Image(crate::domain::ImageRef::Inline {
                    media_type,
                    data_base64,
                }) => {
                    let url = format!("data:{media_type};base64,{data_base64}");
                    json!({"type": "image_url", "image_url": {"url": url}})
                }
            })
            .collect()
    }
}

impl Backend for HttpBackend {
    fn generate(
        &self,
        request: &GenerationRequest<'_>,
        _digest: &str,
    ) -> Result<GenerationResponse> {
        let mut body = json!({
            "model": request.model_name,
            "messages": [{"role": "user", "content": Self::content_parts(request)}],
            "temperature": request.decoding.temperature,
            "top_p": request.decoding.top_p,
            "max_tokens": request.decoding.max_tokens,
        });
        if let Some(k) = request.decoding.top_k {
            body["top_k"] = json!(k);
        }
        if let Some(seed) = request.decoding.seed {
            body["seed"] = json!(seed);
        }

        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = self.auth_token()? {
            req = req.bearer_auth(token);
        }

        let started = Instant::now();
        let resp = req
            .send()
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status();
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;

        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Error::Auth(format!("{} returned {status}", self.endpoint)));
        }
        if status.as_u16() == 429 {
            return Err(Error::RateLimited(format!(
                "{} returned 429",
                self.endpoint
            )));
        }
        if status.is_server_error() {
            return Err(Error::Transport(format!(
                "{} returned {status}",
                self.endpoint
            )));
        }
        if !status.is_success() {
            return Err(Error::MalformedReply(format!(
                "{} returned {status}",
                self.endpoint
            )));
        }

        let value: Value = resp
            .json()
            .map_err(|e| Error::MalformedReply(format!("bad JSON: {e}")))?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| Error::MalformedReply("reply has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::MalformedReply("choice has no message content".into()))?
            .to_string();
        let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("length") => FinishReason::Length,
            Some(_) | None => FinishReason::Stop,
        };
        if text.is_empty() && finish_reason == FinishReason::Stop {
            return Err(Error::MalformedReply(
                "empty text with successful finish".into(),
            ));
        }
        Ok(GenerationResponse {
            text,
            finish_reason,
            latency_ms,
            provider_meta: value.get("usage").cloned(),
        })
    }
}

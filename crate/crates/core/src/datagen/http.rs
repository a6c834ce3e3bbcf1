//! Blocking client for OpenAI-compatible `/v1/chat/completions` endpoints.

use std::time::Duration;

use serde::Deserialize;

use super::{AnnotationClient, ChatRequest, ClientError};

pub const DEFAULT_KEY_ENV: &str = "ANNOTATOR_API_KEY";

pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    key_env: String,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
}

impl HttpClient {
    /// `base_url` is the API root, e.g. `https://host/v1`.
    pub fn new(base_url: &str, key_env: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpClient {
            agent,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            key_env: key_env.to_string(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn map_err(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::StatusCode(code) => ClientError::Status(code),
        ureq::Error::Timeout(_) => ClientError::Timeout,
        other => ClientError::Transport(other.to_string()),
    }
}

impl AnnotationClient for HttpClient {
    fn complete(&self, request_id: &str, req: &ChatRequest) -> Result<String, ClientError> {
        let key = std::env::var(&self.key_env).map_err(|_| ClientError::MissingKey(self.key_env.clone()))?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .header("X-Request-Id", request_id)
            .send_json(req)
            .map_err(map_err)?;
        let body: Completion = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Response(e.to_string()))?;
        body.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::Response("no choices in reply".into()))
    }
}

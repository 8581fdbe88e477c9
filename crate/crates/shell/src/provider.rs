//! Chat-completions provider over HTTP.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;
use townhall_core::persona::provider::ProviderErrorKind;
use townhall_core::persona::{ChatProvider, ProviderError, ProviderRequest};

pub const PROVIDER_URL_ENV: &str = "CIVIC_PROVIDER_URL";
pub const PROVIDER_KEY_ENV: &str = "CIVIC_PROVIDER_KEY";
pub const PROVIDER_MODEL_ENV: &str = "CIVIC_PROVIDER_MODEL";

#[derive(Debug, thiserror::Error)]
#[error("environment variable {0} is not set")]
pub struct MissingProviderEnv(pub &'static str);

/// Speaks the common `chat/completions` JSON shape.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    url: String,
    key: Option<String>,
    model: String,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().expect("http client builds");
        Self { client, url: url.into(), key, model: model.into() }
    }

    pub fn from_env() -> Result<Self, MissingProviderEnv> {
        let url = std::env::var(PROVIDER_URL_ENV).map_err(|_| MissingProviderEnv(PROVIDER_URL_ENV))?;
        let model = std::env::var(PROVIDER_MODEL_ENV).map_err(|_| MissingProviderEnv(PROVIDER_MODEL_ENV))?;
        let key = std::env::var(PROVIDER_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Self::new(url, key, model, Duration::from_secs(60)))
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let body = json!({ "model": self.model, "messages": request.messages });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            let kind = if e.is_timeout() { ProviderErrorKind::Timeout } else { ProviderErrorKind::Http };
            ProviderError::new(kind, e.to_string())
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::new(ProviderErrorKind::Refused, format!("status {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::new(ProviderErrorKind::Malformed, format!("status {status}")));
        }
        let completion: Completion =
            resp.json().map_err(|e| ProviderError::new(ProviderErrorKind::Malformed, e.to_string()))?;
        completion
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ProviderError::new(ProviderErrorKind::Malformed, "no choices in response"))
    }
}

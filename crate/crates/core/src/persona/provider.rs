//! Chat providers. The HTTP provider lives in the shell crate.

use std::collections::VecDeque;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::ProviderRequest;
use crate::study::PersonaRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderErrorKind {
    Timeout,
    Refused,
    Http,
    Malformed,
    Exhausted,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("provider error ({kind:?}): {message}")]
pub struct ProviderError {
    pub kind: ProviderErrorKind,
    pub message: String,
}

impl ProviderError {
    pub fn new(kind: ProviderErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    /// Whether the participant should be offered a retry.
    pub fn retryable(&self) -> bool {
        matches!(self.kind, ProviderErrorKind::Timeout | ProviderErrorKind::Refused | ProviderErrorKind::Http)
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError>;
}

/// Deterministic offline provider. The fact persona restates the top
/// grounding fact with its source; the deliberative persona restates a fact
/// chosen from the message text and asks one question.
pub struct StubProvider;

pub const STUB_FOLLOWUP: &str = "How do you think other residents of the street would weigh this?";
pub const MISSING_INFORMATION: &str = "This information is not included in the project documentation.";

impl ChatProvider for StubProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let last = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        match request.role {
            Some(PersonaRole::Fact) => Ok(match request.grounding.first() {
                Some(f) => format!("{} [{}]", f.text, f.source_label),
                None => MISSING_INFORMATION.to_string(),
            }),
            Some(PersonaRole::Deliberative) => {
                if request.grounding.is_empty() {
                    return Ok(STUB_FOLLOWUP.to_string());
                }
                let pick = last.bytes().map(usize::from).sum::<usize>() % request.grounding.len();
                Ok(format!("{} {STUB_FOLLOWUP}", request.grounding[pick].text))
            }
            None => Err(ProviderError::new(ProviderErrorKind::Malformed, "request without persona role")),
        }
    }
}

/// Always returns the same reply.
pub struct FixedProvider(pub String);

impl ChatProvider for FixedProvider {
    fn complete(&self, _: &ProviderRequest) -> Result<String, ProviderError> {
        Ok(self.0.clone())
    }
}

/// Returns queued replies in order and records every request.
#[derive(Default)]
pub struct ScriptedProvider {
    replies: Mutex<VecDeque<Result<String, ProviderError>>>,
    requests: Mutex<Vec<ProviderRequest>>,
}

impl ScriptedProvider {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(|r| Ok(r.into())).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn push_error(&self, error: ProviderError) {
        self.replies.lock().push_back(Err(error));
    }

    pub fn requests(&self) -> Vec<ProviderRequest> {
        self.requests.lock().clone()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        self.requests.lock().push(request.clone());
        self.replies
            .lock()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::new(ProviderErrorKind::Exhausted, "no scripted reply left")))
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<P> {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

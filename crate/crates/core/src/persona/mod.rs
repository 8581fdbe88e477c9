//! The two chat personas and everything between a participant message and a
//! persisted reply: retrieval, opinion routing, prompt composition, provider
//! calls, the question cap and the groundedness audit.

mod gateway;
pub mod groundedness;
pub mod opinion;
pub mod prompt;
pub mod provider;
pub mod retrieval;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gateway::{open_conversation, GatewayConfig, PersonaGateway, Reply};
pub use groundedness::{validate_groundedness, GroundednessVerdict, Overall, SentenceSupport};
pub use opinion::classify_opinion_question;
pub use prompt::{compose_prompt, enforce_question_cap, postprocess_reply, question_count, Message, ProviderRequest};
pub use provider::{ChatProvider, FixedProvider, ProviderError, ScriptedProvider, StubProvider};
pub use retrieval::{retrieve, RetrievalResult, ScoredFact};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("empty input")]
    EmptyInput,
    #[error("the fact package is empty")]
    EmptyPackage,
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Template(#[from] prompt::TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Participant,
    Persona,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub author: Author,
    pub text: String,
    /// Present on fact-persona turns only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_fact_ids: Option<Vec<String>>,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundedness: Option<GroundednessVerdict>,
    pub ts: DateTime<Utc>,
}

impl ChatTurn {
    pub fn participant(text: &str, ts: DateTime<Utc>) -> Self {
        Self {
            author: Author::Participant,
            text: text.trim().to_string(),
            retrieved_fact_ids: None,
            citations: Vec::new(),
            groundedness: None,
            ts,
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.groundedness.as_ref().is_some_and(|v| v.overall == Overall::Flagged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub session_id: String,
    pub persona_id: String,
    pub turns: Vec<ChatTurn>,
}

impl Conversation {
    pub fn participant_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.author == Author::Participant).count()
    }

    pub fn last_participant_text(&self) -> Option<&str> {
        self.turns.iter().rev().find(|t| t.author == Author::Participant).map(|t| t.text.as_str())
    }

    /// Persona turns in order, greeting included.
    pub fn persona_turns(&self) -> impl Iterator<Item = &ChatTurn> {
        self.turns.iter().filter(|t| t.author == Author::Persona)
    }
}

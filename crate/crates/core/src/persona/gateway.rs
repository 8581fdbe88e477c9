use chrono::{DateTime, Utc};

use super::groundedness::{validate_groundedness_with, GroundednessVerdict, DEFAULT_THRESHOLD};
use super::opinion::classify_opinion_question;
use super::prompt::{compose_prompt, corrective_request, postprocess_reply, question_count};
use super::provider::ChatProvider;
use super::retrieval::retrieve;
use super::{Author, ChatTurn, Conversation, GatewayError};
use crate::study::{build_fact_package, FactPackage, PersonaConfig, PersonaRole, StudyDefinition};

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Facts retrieved per fact-persona turn.
    pub k: usize,
    pub threshold: f64,
    /// Ask the provider once more when the deliberative reply exceeds the
    /// question cap, before truncating.
    pub regenerate_on_excess: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { k: 3, threshold: DEFAULT_THRESHOLD, regenerate_on_excess: true }
    }
}

/// A post-processed, audited persona reply.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub text: String,
    pub retrieved_fact_ids: Option<Vec<String>>,
    pub citations: Vec<String>,
    pub verdict: GroundednessVerdict,
    pub opinion_question: bool,
    pub provider_calls: usize,
}

impl Reply {
    pub fn turn_at(&self, ts: DateTime<Utc>) -> ChatTurn {
        ChatTurn {
            author: Author::Persona,
            text: self.text.clone(),
            retrieved_fact_ids: self.retrieved_fact_ids.clone(),
            citations: self.citations.clone(),
            groundedness: Some(self.verdict.clone()),
            ts,
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.verdict.is_flagged()
    }
}

fn citations(verdict: &GroundednessVerdict, package: &FactPackage) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for id in verdict.supporting_fact_ids() {
        if let Some(f) = package.get(id) {
            if !labels.contains(&f.source_label) {
                labels.push(f.source_label.clone());
            }
        }
    }
    labels
}

fn audit(persona: &PersonaConfig, text: &str, package: &FactPackage, threshold: f64) -> GroundednessVerdict {
    let exempt: Vec<&str> = persona.refusal_message.as_deref().into_iter().chain([persona.greeting.as_str()]).collect();
    validate_groundedness_with(text, package, threshold, &exempt)
}

/// A conversation holding only the persona's greeting.
pub fn open_conversation(
    session_id: &str,
    persona: &PersonaConfig,
    package: &FactPackage,
    threshold: f64,
    ts: DateTime<Utc>,
) -> Conversation {
    let verdict = audit(persona, &persona.greeting, package, threshold);
    Conversation {
        session_id: session_id.to_string(),
        persona_id: persona.persona_id.clone(),
        turns: vec![ChatTurn {
            author: Author::Persona,
            text: persona.greeting.clone(),
            retrieved_fact_ids: (persona.role == PersonaRole::Fact).then(Vec::new),
            citations: Vec::new(),
            groundedness: Some(verdict),
            ts,
        }],
    }
}

/// Stateless between calls apart from the provider; the caller serializes
/// calls per conversation.
pub struct PersonaGateway {
    package: FactPackage,
    personas: Vec<PersonaConfig>,
    provider: Box<dyn ChatProvider>,
    config: GatewayConfig,
}

impl PersonaGateway {
    pub fn new(study: &StudyDefinition, provider: Box<dyn ChatProvider>) -> Self {
        Self::with_config(study, provider, GatewayConfig::default())
    }

    pub fn with_config(study: &StudyDefinition, provider: Box<dyn ChatProvider>, config: GatewayConfig) -> Self {
        Self { package: build_fact_package(study), personas: study.personas.clone(), provider, config }
    }

    pub fn package(&self) -> &FactPackage {
        &self.package
    }

    pub fn threshold(&self) -> f64 {
        self.config.threshold
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn deliberative_name(&self) -> &str {
        self.personas
            .iter()
            .find(|p| p.role == PersonaRole::Deliberative)
            .map(|p| p.display_name.as_str())
            .unwrap_or("the discussion partner")
    }

    /// Produces the reply to the conversation's last participant turn. The
    /// conversation itself is not modified.
    pub fn respond(&self, persona: &PersonaConfig, conversation: &Conversation) -> Result<Reply, GatewayError> {
        let user_text = conversation.last_participant_text().ok_or(GatewayError::EmptyInput)?;
        let mut provider_calls = 0;
        let (text, retrieved) = match persona.role {
            PersonaRole::Fact => {
                let opinion = classify_opinion_question(user_text)?;
                let retrieval = retrieve(&self.package, user_text, self.config.k)?;
                let raw = if opinion {
                    String::new()
                } else {
                    let request = compose_prompt(persona, conversation, &self.package, Some(&retrieval))?;
                    provider_calls += 1;
                    self.provider.complete(&request)?
                };
                let text = postprocess_reply(persona, &raw, opinion, self.deliberative_name());
                (text, Some(retrieval.fact_ids()))
            }
            PersonaRole::Deliberative => {
                let request = compose_prompt(persona, conversation, &self.package, None)?;
                provider_calls += 1;
                let mut raw = self.provider.complete(&request)?;
                let cap = persona.max_followup_questions.unwrap_or(1);
                if self.config.regenerate_on_excess && question_count(&raw) > cap as usize {
                    provider_calls += 1;
                    raw = self.provider.complete(&corrective_request(&request, &raw, cap))?;
                }
                (postprocess_reply(persona, &raw, false, self.deliberative_name()), None)
            }
        };
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let verdict = audit(persona, &text, &self.package, self.config.threshold);
        if verdict.is_flagged() {
            log::info!("groundedness flag on {} reply: {}", persona.persona_id, text);
        }
        Ok(Reply {
            citations: if persona.role == PersonaRole::Fact { citations(&verdict, &self.package) } else { Vec::new() },
            opinion_question: provider_calls == 0,
            text,
            retrieved_fact_ids: retrieved,
            verdict,
            provider_calls,
        })
    }
}

//! Prompt composition and reply post-processing.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::retrieval::RetrievalResult;
use super::{Author, Conversation};
use crate::study::{FactEntry, FactPackage, PersonaConfig, PersonaRole};
use crate::text::split_sentences;

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid pattern"));

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template of `{persona}` lacks the {{{placeholder}}} placeholder")]
    MissingPlaceholder { persona: String, placeholder: &'static str },
    #[error("template of `{persona}` has unresolved placeholder {{{placeholder}}}")]
    UnknownPlaceholder { persona: String, placeholder: String },
    #[error("the fact persona `{0}` needs a retrieval result")]
    RetrievalRequired(String),
    #[error("the deliberative persona `{0}` must not receive a retrieval result")]
    RetrievalForbidden(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.to_string(), content: content.into() }
    }
}

/// Chat-completion request. Only `messages` goes over the wire; the rest is
/// for in-process providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub messages: Vec<Message>,
    #[serde(skip)]
    pub persona_id: String,
    #[serde(skip)]
    pub role: Option<PersonaRole>,
    /// Facts placed in the prompt, in prompt order.
    #[serde(skip)]
    pub grounding: Vec<FactEntry>,
    #[serde(skip)]
    pub corrective: bool,
}

fn fact_line(f: &FactEntry) -> String {
    format!("- [{}] {} (Source: {})", f.fact_id, f.text, f.source_label)
}

fn rules(persona: &PersonaConfig) -> String {
    match persona.role {
        PersonaRole::Fact => "Rules: Answer only from the verified project facts. Cite the source of each fact you use \
in square brackets. If the facts do not contain the answer, say that this information is not included in the \
project documentation. Do not answer opinion questions."
            .to_string(),
        PersonaRole::Deliberative => {
            let n = persona.max_followup_questions.unwrap_or(1);
            format!(
                "Rules: Point out trade-offs of the project. Invite the participant to consider the views of other \
residents. Do not flatter the participant and do not simply agree. Ask at most {n} question{} per reply.",
                if n == 1 { "" } else { "s" }
            )
        }
    }
}

fn history(persona: &PersonaConfig, conversation: &Conversation) -> String {
    if conversation.turns.is_empty() {
        return "(none)".to_string();
    }
    conversation
        .turns
        .iter()
        .map(|t| match t.author {
            Author::Participant => format!("Participant: {}", t.text),
            Author::Persona => format!("{}: {}", persona.display_name, t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fills the persona template and appends the role rules. The last
/// participant turn is repeated as the user message.
pub fn compose_prompt(
    persona: &PersonaConfig,
    conversation: &Conversation,
    package: &FactPackage,
    retrieval: Option<&RetrievalResult>,
) -> Result<ProviderRequest, TemplateError> {
    let id = || persona.persona_id.clone();
    for placeholder in ["facts", "history"] {
        if !persona.system_template.contains(&format!("{{{placeholder}}}")) {
            return Err(TemplateError::MissingPlaceholder { persona: id(), placeholder });
        }
    }
    if let Some(unknown) = PLACEHOLDER
        .captures_iter(&persona.system_template)
        .map(|c| c[1].to_string())
        .find(|name| name != "facts" && name != "history")
    {
        return Err(TemplateError::UnknownPlaceholder { persona: id(), placeholder: unknown });
    }

    let grounding: Vec<FactEntry> = match (persona.role, retrieval) {
        (PersonaRole::Fact, None) => return Err(TemplateError::RetrievalRequired(id())),
        (PersonaRole::Fact, Some(r)) => {
            r.ranked.iter().filter_map(|s| package.get(&s.fact_id).cloned()).collect()
        }
        (PersonaRole::Deliberative, Some(r)) if !r.ranked.is_empty() => {
            return Err(TemplateError::RetrievalForbidden(id()))
        }
        (PersonaRole::Deliberative, _) => package.facts().to_vec(),
    };
    let facts = if grounding.is_empty() {
        "(no matching facts)".to_string()
    } else {
        grounding.iter().map(fact_line).collect::<Vec<_>>().join("\n")
    };

    // single pass so substituted text is never re-scanned
    let filled = PLACEHOLDER.replace_all(&persona.system_template, |c: &regex::Captures| match &c[1] {
        "facts" => facts.clone(),
        _ => history(persona, conversation),
    });
    let mut messages = vec![Message::new("system", format!("{filled}\n\n{}", rules(persona)))];
    if let Some(last) = conversation.last_participant_text() {
        messages.push(Message::new("user", last));
    }
    Ok(ProviderRequest {
        messages,
        persona_id: persona.persona_id.clone(),
        role: Some(persona.role),
        grounding,
        corrective: false,
    })
}

/// Extends a request with the rejected reply and an instruction to respect
/// the question cap.
pub fn corrective_request(request: &ProviderRequest, rejected: &str, cap: u32) -> ProviderRequest {
    let mut next = request.clone();
    next.messages.push(Message::new("assistant", rejected));
    next.messages.push(Message::new(
        "user",
        format!(
            "Rewrite your previous reply so that it asks at most {cap} question{}.",
            if cap == 1 { "" } else { "s" }
        ),
    ));
    next.corrective = true;
    next
}

fn is_question(sentence: &str) -> bool {
    sentence.trim_end_matches(['"', '\'', ')', '\u{201d}']).ends_with('?')
}

pub fn question_count(text: &str) -> usize {
    split_sentences(text).iter().filter(|s| is_question(s)).count()
}

/// Keeps the first `cap` questions and every non-question sentence. Text
/// already within the cap is returned unchanged.
pub fn enforce_question_cap(text: &str, cap: usize) -> String {
    if question_count(text) <= cap {
        return text.to_string();
    }
    let mut kept_questions = 0;
    split_sentences(text)
        .into_iter()
        .filter(|s| {
            if !is_question(s) {
                return true;
            }
            kept_questions += 1;
            kept_questions <= cap
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn referral(deliberative_name: &str) -> String {
    format!("If you would like to discuss opinions about the project, {deliberative_name} will talk with you in the next step.")
}

/// Role-specific clean-up of a provider reply. For the fact persona an
/// opinion question replaces the reply with the refusal plus a referral.
pub fn postprocess_reply(persona: &PersonaConfig, raw: &str, opinion_question: bool, deliberative_name: &str) -> String {
    match persona.role {
        PersonaRole::Fact if opinion_question => {
            let refusal = persona
                .refusal_message
                .as_deref()
                .unwrap_or("I can only share factual information from the project documentation.");
            format!("{refusal} {}", referral(deliberative_name))
        }
        PersonaRole::Fact => raw.trim().to_string(),
        PersonaRole::Deliberative => {
            enforce_question_cap(raw.trim(), persona.max_followup_questions.unwrap_or(1) as usize)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::retrieval::retrieve;
    use crate::persona::ChatTurn;
    use crate::study::{build_fact_package, lausanne_fixture};
    use chrono::Utc;

    fn conv(text: &str) -> Conversation {
        Conversation {
            session_id: "s".into(),
            persona_id: "flo".into(),
            turns: vec![ChatTurn::participant(text, Utc::now())],
        }
    }

    #[test]
    fn flo_prompt_holds_exactly_the_retrieved_facts() {
        let study = lausanne_fixture();
        let package = build_fact_package(&study);
        let flo = study.persona("flo").unwrap();
        let q = "how many new trees will be planted";
        let r = retrieve(&package, q, 3).unwrap();
        assert_eq!(r.ranked.len(), 3);
        let req = compose_prompt(flo, &conv(q), &package, Some(&r)).unwrap();
        let system = &req.messages[0].content;
        for f in package.facts() {
            let inside = system.contains(&f.text);
            assert_eq!(inside, r.fact_ids().contains(&f.fact_id), "{}", f.fact_id);
            if inside {
                assert!(system.contains(&f.source_label));
            }
        }
        assert!(system.contains("Participant: how many new trees"));
        assert_eq!(req.messages.last().unwrap().content, q);
        assert!(!system.contains("{facts}"));
    }

    #[test]
    fn role_separation() {
        let study = lausanne_fixture();
        let package = build_fact_package(&study);
        let r = retrieve(&package, "trees", 3).unwrap();
        let gustavo = study.persona("gustavo").unwrap();
        assert!(matches!(
            compose_prompt(gustavo, &conv("trees"), &package, Some(&r)),
            Err(TemplateError::RetrievalForbidden(_))
        ));
        let req = compose_prompt(gustavo, &conv("trees"), &package, None).unwrap();
        assert_eq!(req.grounding.len(), package.len());
        assert!(req.messages[0].content.contains("at most 1 question per reply"));
        let flo = study.persona("flo").unwrap();
        assert!(matches!(compose_prompt(flo, &conv("trees"), &package, None), Err(TemplateError::RetrievalRequired(_))));
    }

    #[test]
    fn template_errors() {
        let study = lausanne_fixture();
        let package = build_fact_package(&study);
        let r = retrieve(&package, "trees", 3).unwrap();
        let mut flo = study.persona("flo").unwrap().clone();
        flo.system_template = "Facts missing. {history}".into();
        assert!(matches!(
            compose_prompt(&flo, &conv("trees"), &package, Some(&r)),
            Err(TemplateError::MissingPlaceholder { placeholder: "facts", .. })
        ));
        flo.system_template = "{facts} {history} {mood}".into();
        assert!(matches!(
            compose_prompt(&flo, &conv("trees"), &package, Some(&r)),
            Err(TemplateError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn question_cap_keeps_first_question() {
        let raw = "Fewer parking spaces free room for trees. Who loses the most here? \
                   Shop owners rely on deliveries. Have you asked a neighbour? What about cyclists?";
        let out = enforce_question_cap(raw, 1);
        assert_eq!(
            out,
            "Fewer parking spaces free room for trees. Who loses the most here? Shop owners rely on deliveries."
        );
        assert_eq!(enforce_question_cap(&out, 1), out);
        let plain = "No questions here. None at all.";
        assert_eq!(enforce_question_cap(plain, 1), plain);
    }

    #[test]
    fn flo_refuses_opinions_with_referral() {
        let study = lausanne_fixture();
        let flo = study.persona("flo").unwrap();
        let out = postprocess_reply(flo, "The trees are lovely.", true, "Gustavo");
        assert!(out.starts_with(flo.refusal_message.as_deref().unwrap()));
        assert!(out.contains("Gustavo"));
        assert_eq!(postprocess_reply(flo, &out, true, "Gustavo"), out);
    }
}

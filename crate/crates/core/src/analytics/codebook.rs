//! Qualitative coding of free-text responses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::persona::{ChatProvider, Message, ProviderError, ProviderRequest};
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("invalid codebook `{0}`: {1}")]
    Invalid(String, String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Code {
    pub code_id: String,
    pub label: String,
    pub definition: String,
    pub higher_category: String,
    /// Phrases for the offline fallback. A trailing `*` matches any suffix.
    #[serde(default)]
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codebook {
    pub codebook_id: String,
    /// Free-text field the codebook applies to.
    pub field: String,
    pub codes: Vec<Code>,
}

impl Codebook {
    pub fn validate(&self) -> Result<(), CodebookError> {
        let invalid = |m: String| Err(CodebookError::Invalid(self.codebook_id.clone(), m));
        if self.codes.is_empty() {
            return invalid("no codes".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.codes {
            if c.code_id.is_empty() {
                return invalid("empty code id".into());
            }
            if !seen.insert(&c.code_id) {
                return invalid(format!("duplicate code `{}`", c.code_id));
            }
        }
        Ok(())
    }

    pub fn code(&self, code_id: &str) -> Option<&Code> {
        self.codes.iter().find(|c| c.code_id == code_id)
    }
}

pub const CODEBOOKS: &str = include_str!("../../fixtures/codebooks.json");

pub fn bundled_codebooks() -> Vec<Codebook> {
    serde_json::from_str(CODEBOOKS).expect("bundled codebooks parse")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedResponse {
    pub response_id: String,
    pub text: String,
    pub codes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub response_id: String,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub counts: BTreeMap<String, usize>,
    pub spot_checks: Vec<SpotCheck>,
    /// Responses whose provider label could not be used; left uncoded.
    pub unparseable: Vec<String>,
}

fn keyword_matches(keyword: &str, tokens: &[String]) -> bool {
    let parts = tokenize(keyword.trim_end_matches('*'));
    if parts.is_empty() {
        return false;
    }
    let wildcard = keyword.ends_with('*');
    tokens.windows(parts.len()).any(|w| {
        w.iter().zip(&parts).enumerate().all(|(i, (t, p))| {
            if wildcard && i == parts.len() - 1 {
                t.starts_with(p.as_str())
            } else {
                t == p
            }
        })
    })
}

/// Codes whose keywords occur in the text.
pub fn keyword_codes(text: &str, codebook: &Codebook) -> BTreeSet<String> {
    let tokens = tokenize(text);
    codebook
        .codes
        .iter()
        .filter(|c| c.keywords.iter().any(|k| keyword_matches(k, &tokens)))
        .map(|c| c.code_id.clone())
        .collect()
}

fn labeling_request(text: &str, codebook: &Codebook) -> ProviderRequest {
    let listing = codebook
        .codes
        .iter()
        .map(|c| format!("- {}: {} ({})", c.code_id, c.label, c.definition))
        .collect::<Vec<_>>()
        .join("\n");
    ProviderRequest {
        messages: vec![
            Message::new(
                "system",
                format!(
                    "Assign codes from this codebook to the participant response. Reply with a JSON array of \
code ids only, for example [\"a\", \"b\"], or [] if none apply.\n{listing}"
                ),
            ),
            Message::new("user", text),
        ],
        persona_id: String::new(),
        role: None,
        grounding: Vec::new(),
        corrective: false,
    }
}

fn parse_label(reply: &str, codebook: &Codebook) -> Option<BTreeSet<String>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    let ids: Vec<String> = serde_json::from_str(reply.get(start..=end)?).ok()?;
    ids.iter().all(|id| codebook.code(id).is_some()).then(|| ids.into_iter().collect())
}

/// Codes `(response_id, text)` pairs. With a provider each response is
/// labeled by it and the first `spot_checks` coded responses are reviewed;
/// without one the keyword rules apply.
pub fn apply_codebook(
    responses: &[(String, String)],
    codebook: &Codebook,
    provider: Option<&dyn ChatProvider>,
    spot_checks: usize,
) -> Result<(Vec<CodedResponse>, ConsistencyReport), CodebookError> {
    codebook.validate()?;
    let mut report = ConsistencyReport::default();
    let mut coded = Vec::with_capacity(responses.len());
    for (id, text) in responses {
        let codes = match provider {
            None => keyword_codes(text, codebook),
            Some(p) => match parse_label(&p.complete(&labeling_request(text, codebook))?, codebook) {
                Some(codes) => codes,
                None => {
                    log::warn!("unusable code label for response {id}");
                    report.unparseable.push(id.clone());
                    BTreeSet::new()
                }
            },
        };
        coded.push(CodedResponse { response_id: id.clone(), text: text.clone(), codes });
    }
    for c in &codebook.codes {
        report.counts.insert(c.code_id.clone(), coded.iter().filter(|r| r.codes.contains(&c.code_id)).count());
    }
    if let Some(p) = provider {
        for r in coded.iter().filter(|r| !r.codes.is_empty()).take(spot_checks) {
            let request = ProviderRequest {
                messages: vec![
                    Message::new(
                        "system",
                        "You review qualitative coding. Answer yes if the codes fit the response, otherwise no.",
                    ),
                    Message::new(
                        "user",
                        format!("Response: {}\nCodes: {}", r.text, r.codes.iter().cloned().collect::<Vec<_>>().join(", ")),
                    ),
                ],
                persona_id: String::new(),
                role: None,
                grounding: Vec::new(),
                corrective: false,
            };
            let verdict = p.complete(&request)?;
            report.spot_checks.push(SpotCheck {
                response_id: r.response_id.clone(),
                consistent: verdict.trim().to_lowercase().starts_with("yes"),
            });
        }
    }
    Ok((coded, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::{FixedProvider, ScriptedProvider};

    fn book(id: &str) -> Codebook {
        bundled_codebooks().into_iter().find(|b| b.codebook_id == id).unwrap()
    }

    fn one(text: &str) -> Vec<(String, String)> {
        vec![("r1".to_string(), text.to_string())]
    }

    #[test]
    fn bundled_books_are_valid() {
        let books = bundled_codebooks();
        assert_eq!(books.len(), 4);
        books.iter().for_each(|b| b.validate().unwrap());
    }

    #[test]
    fn parking_question_is_logistics() {
        let (coded, _) = apply_codebook(&one("Where will people park their cars?"), &book("flo_chat"), None, 0).unwrap();
        assert_eq!(coded[0].codes, BTreeSet::from(["logistics_checks".to_string()]));
        let (coded, _) =
            apply_codebook(&one("Will the 150 trees help with the temperature?"), &book("flo_chat"), None, 0).unwrap();
        assert_eq!(coded[0].codes, BTreeSet::from(["fact_checking".to_string()]));
    }

    #[test]
    fn no_match_is_empty() {
        let (coded, report) = apply_codebook(&one("Hmm."), &book("flo_chat"), None, 0).unwrap();
        assert!(coded[0].codes.is_empty());
        assert!(report.counts.values().all(|&n| n == 0));
    }

    #[test]
    fn provider_codes_attached_verbatim() {
        let p = FixedProvider("[\"fact_checking\", \"recall_failures\"]".into());
        let (coded, _) = apply_codebook(&one("anything"), &book("flo_chat"), Some(&p), 0).unwrap();
        assert_eq!(coded[0].codes, BTreeSet::from(["fact_checking".to_string(), "recall_failures".to_string()]));
    }

    #[test]
    fn unknown_ids_leave_response_uncoded() {
        let p = ScriptedProvider::new(["[\"made_up\"]", "not json"]);
        let responses = vec![("a".to_string(), "x".to_string()), ("b".to_string(), "y".to_string())];
        let (coded, report) = apply_codebook(&responses, &book("flo_chat"), Some(&p), 0).unwrap();
        assert!(coded.iter().all(|r| r.codes.is_empty()));
        assert_eq!(report.unparseable, vec!["a", "b"]);
    }

    #[test]
    fn spot_checks_recorded() {
        let p = ScriptedProvider::new(["[\"fact_checking\"]", "yes, consistent"]);
        let (_, report) = apply_codebook(&one("x"), &book("flo_chat"), Some(&p), 3).unwrap();
        assert_eq!(report.spot_checks, vec![SpotCheck { response_id: "r1".into(), consistent: true }]);
    }

    #[test]
    fn wildcard_keywords() {
        let toks = tokenize("Parking garages everywhere");
        assert!(keyword_matches("park*", &toks));
        assert!(keyword_matches("garage*", &toks));
        assert!(!keyword_matches("garage", &toks));
    }
}

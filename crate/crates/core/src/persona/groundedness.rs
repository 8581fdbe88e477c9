//! Sentence-level support check of a reply against the fact package.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::study::FactPackage;
use crate::text::{split_sentences, unique_content_tokens};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Sentence openings that carry no project claim: greetings, self
/// descriptions, refusals, missing-information notices and referrals.
const EXEMPT_PREFIXES: [&str; 22] = [
    "hello",
    "hi",
    "hey",
    "welcome",
    "thank you",
    "thanks",
    "you're welcome",
    "i'm flo",
    "i'm gustavo",
    "i am an ai",
    "i'm an ai",
    "i can answer",
    "i can only",
    "i cannot",
    "i can't",
    "i'm here",
    "i do not answer",
    "if you would like",
    "feel free",
    "this information is not",
    "that information is not",
    "unfortunately, this information",
];

static CITATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[[^\]]*\]").expect("valid pattern"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Grounded,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceSupport {
    pub sentence: String,
    pub support_score: f64,
    pub supporting_fact_id: Option<String>,
    pub exempt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundednessVerdict {
    pub sentences: Vec<SentenceSupport>,
    pub overall: Overall,
    pub threshold: f64,
}

impl GroundednessVerdict {
    pub fn is_flagged(&self) -> bool {
        self.overall == Overall::Flagged
    }

    /// Supporting facts of the content sentences, first occurrence order.
    pub fn supporting_fact_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.sentences
            .iter()
            .filter(|s| !s.exempt && s.support_score >= self.threshold)
            .filter_map(|s| s.supporting_fact_id.as_deref())
            .filter(|id| seen.insert(*id))
            .collect()
    }
}

pub fn strip_citations(text: &str) -> String {
    CITATION.replace_all(text, "").split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_exempt(sentence: &str, content: &BTreeSet<String>, exempt_texts: &[&str]) -> bool {
    if content.is_empty() || sentence.trim_end_matches(['"', '\'', ')']).ends_with('?') {
        return true;
    }
    let lower = sentence.to_lowercase().replace('\u{2019}', "'");
    EXEMPT_PREFIXES.iter().any(|p| {
        lower.starts_with(p) && lower[p.len()..].chars().next().is_none_or(|c| !c.is_alphanumeric())
    }) || exempt_texts.iter().any(|t| split_sentences(t).iter().any(|s| s.eq_ignore_ascii_case(sentence)))
}

pub fn validate_groundedness(reply: &str, package: &FactPackage, threshold: f64) -> GroundednessVerdict {
    validate_groundedness_with(reply, package, threshold, &[])
}

/// As [`validate_groundedness`], with extra exempt texts (a persona's
/// refusal message, for instance) matched sentence by sentence.
pub fn validate_groundedness_with(
    reply: &str,
    package: &FactPackage,
    threshold: f64,
    exempt_texts: &[&str],
) -> GroundednessVerdict {
    let fact_tokens: Vec<BTreeSet<String>> = package.facts().iter().map(|f| unique_content_tokens(&f.text)).collect();
    let sentences: Vec<SentenceSupport> = split_sentences(&strip_citations(reply))
        .into_iter()
        .map(|sentence| {
            let content = unique_content_tokens(&sentence);
            if is_exempt(&sentence, &content, exempt_texts) {
                return SentenceSupport { sentence, support_score: 1.0, supporting_fact_id: None, exempt: true };
            }
            let mut best: Option<(usize, usize)> = None;
            for (i, fact) in fact_tokens.iter().enumerate() {
                let shared = content.intersection(fact).count();
                if shared > 0 && best.is_none_or(|(_, b)| shared > b) {
                    best = Some((i, shared));
                }
            }
            let (support_score, supporting_fact_id) = match best {
                Some((i, shared)) => (shared as f64 / content.len() as f64, Some(package.facts()[i].fact_id.clone())),
                None => (0.0, None),
            };
            SentenceSupport { sentence, support_score, supporting_fact_id, exempt: false }
        })
        .collect();
    let flagged = sentences.iter().any(|s| !s.exempt && s.support_score < threshold);
    GroundednessVerdict {
        sentences,
        overall: if flagged { Overall::Flagged } else { Overall::Grounded },
        threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::{build_fact_package, lausanne_fixture};

    fn package() -> FactPackage {
        build_fact_package(&lausanne_fixture())
    }

    #[test]
    fn paraphrase_of_depaving_fact() {
        let v = validate_groundedness("Roughly 100 square meters will be de-paved.", &package(), 0.5);
        assert_eq!(v.overall, Overall::Grounded);
        let s = &v.sentences[0];
        // roughly 100 square meters de paved: 5 of 6 shared
        assert!((s.support_score - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(s.supporting_fact_id.as_deref(), Some("sponge-depaved"));
    }

    #[test]
    fn unsupported_cost_claim() {
        let v = validate_groundedness("The project costs 2 million francs.", &package(), 0.5);
        assert!(v.is_flagged());
        assert_eq!(v.sentences[0].support_score, 0.0);
    }

    #[test]
    fn greeting_only_is_grounded() {
        let v = validate_groundedness("Hello! How can I help?", &package(), 0.5);
        assert_eq!(v.overall, Overall::Grounded);
        assert!(v.sentences.iter().all(|s| s.exempt));
    }

    #[test]
    fn citations_do_not_count() {
        let v = validate_groundedness(
            "150 new trees will be planted along the street. [Planting plan, tree schedule]",
            &package(),
            0.5,
        );
        assert_eq!(v.sentences.len(), 1);
        assert_eq!(v.sentences[0].support_score, 1.0);
        assert_eq!(v.supporting_fact_ids(), vec!["canopy-trees"]);
    }

    #[test]
    fn prefix_needs_word_boundary() {
        // "history" starts with "hi" but is not a greeting
        let v = validate_groundedness("History shows the mayor loves fountains.", &package(), 0.5);
        assert!(v.is_flagged());
    }

    #[test]
    fn threshold_edges() {
        let p = package();
        let v0 = validate_groundedness("The project costs 2 million francs.", &p, 0.0);
        assert!(!v0.is_flagged());
        let v1 = validate_groundedness("Roughly 100 square meters will be de-paved.", &p, 1.0);
        assert!(v1.is_flagged());
    }
}

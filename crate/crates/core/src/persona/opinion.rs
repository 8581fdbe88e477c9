//! Rule-based detection of questions asking for a judgment rather than a fact.

use std::sync::LazyLock;

use regex::Regex;

use super::GatewayError;

const PHRASES: [&str; 30] = [
    "your opinion",
    "your view",
    "your take",
    "your favorite",
    "your favourite",
    "in your eyes",
    "do you think",
    "do you believe",
    "do you feel",
    "do you like",
    "do you prefer",
    "do you agree",
    "do you support",
    "what do you",
    "how do you feel",
    "would you",
    "are you in favor",
    "are you in favour",
    "are you for",
    "are you against",
    "is it worth",
    "good idea",
    "bad idea",
    "happy with",
    "satisfied with",
    "unhappy with",
    "better or worse",
    "is it fair",
    "should i",
    "should we",
];

static PATTERNS: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"\bwhich\b(\s+\S+){0,4}\s+(is|are|was)\s+(the\s+)?(best|worst|better|worse|nicest|most important)\b",
        r"\b(is|are)\s+(it|this|that|the project|the redesign)\s+(a\s+)?(good|bad|great|worth|necessary|fair)\b",
        r"\bdo(es)?\s+(people|residents|citizens|everyone|anyone)\s+(like|love|hate|want|support)\b",
        r"\bshould\s+(the\s+)?(city|council|town|project)\b",
    ]
    .iter()
    .map(|p| Regex::new(p).expect("valid pattern"))
    .collect()
});

/// True iff the text matches one of the opinion phrases or patterns.
pub fn classify_opinion_question(text: &str) -> Result<bool, GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyInput);
    }
    let normalized = text
        .to_lowercase()
        .replace(['\u{2019}', '\u{2018}'], "'")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    Ok(PHRASES.iter().any(|p| normalized.contains(p)) || PATTERNS.iter().any(|r| r.is_match(&normalized)))
}

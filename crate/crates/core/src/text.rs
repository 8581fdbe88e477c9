//! Tokenization shared by retrieval, groundedness scoring and recall metrics.
//!
//! Tokens are lowercased maximal runs of alphanumeric characters. A `,` or `.`
//! sitting between two digits stays inside the token so `2,000` becomes
//! `2000` and `2.5` stays `2.5`. Content tokens are tokens minus [`STOP_WORDS`].

use std::collections::BTreeSet;

/// Fixed English function-word list (120 entries). Changing it changes every
/// overlap and groundedness score, so it is frozen.
pub const STOP_WORDS: [&str; 120] = [
    "a", "about", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "both", "but", "by", "can", "could", "d", "did",
    "do", "does", "doing", "don", "each", "few", "for", "from", "had", "has", "have", "having",
    "he", "her", "here", "him", "his", "how", "i", "if", "in", "into", "is", "isn", "it",
    "its", "just", "let", "ll", "m", "many", "may", "me", "might", "more", "most",
    "much", "must", "my", "no", "nor", "not", "now", "of", "off", "on", "once", "only", "or",
    "other", "our", "out", "over", "own", "per", "re", "s", "same", "shall", "she",
    "should", "so", "some", "such", "t", "than", "that", "the", "their", "them", "then",
    "there", "these", "they", "this", "those", "through", "to", "too", "up", "ve", "very", "was",
    "we", "were", "what", "when", "where", "which", "who", "will", "with", "would", "you",
    "your",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

/// Lowercased alphanumeric tokens in reading order.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
            continue;
        }
        let between_digits = (c == ',' || c == '.')
            && current.chars().last().is_some_and(|p| p.is_ascii_digit())
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if between_digits {
            if c == '.' {
                current.push('.');
            }
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Tokens that are not stop words, in reading order (duplicates kept).
pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_stop_word(t)).collect()
}

pub fn unique_content_tokens(text: &str) -> BTreeSet<String> {
    content_tokens(text).into_iter().collect()
}

/// Whitespace-delimited tokens containing at least one alphanumeric character.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .count()
}

const ABBREVIATIONS: [&str; 14] = [
    "e.g", "i.e", "etc", "vs", "approx", "dr", "mr", "mrs", "ms", "st", "no", "ca", "fig", "cf",
];

/// Splits at `.`, `?` and `!` followed by whitespace or end of text. A period
/// after a guarded abbreviation (`e.g.`, `approx.`, ...) does not end a sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '?' | '!') {
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], '.' | '?' | '!' | '"' | '\'' | ')' | '\u{201d}')
            {
                end += 1;
            }
            let at_boundary = end == chars.len() || chars[end].is_whitespace();
            let only_period = chars[i..end].iter().all(|&ch| !matches!(ch, '?' | '!'));
            if at_boundary && !(only_period && ends_with_abbreviation(&chars[start..i])) {
                push_sentence(&mut sentences, &chars[start..end]);
                start = end;
            }
            i = end;
        } else {
            i += 1;
        }
    }
    if start < chars.len() {
        push_sentence(&mut sentences, &chars[start..]);
    }
    sentences
}

fn ends_with_abbreviation(prefix: &[char]) -> bool {
    let word: String = prefix
        .iter()
        .rev()
        .take_while(|c| !c.is_whitespace() && **c != '(')
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect::<String>()
        .to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

fn push_sentence(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_list_is_sorted_and_sized() {
        let mut sorted = STOP_WORDS.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted, STOP_WORDS.to_vec());
        assert_eq!(STOP_WORDS.len(), 120);
        assert!(!is_stop_word("during"));
    }

    #[test]
    fn numbers_keep_grouping() {
        assert_eq!(
            tokenize("hold up to 2,000 liters, 2.5 m. Done"),
            vec!["hold", "up", "to", "2000", "liters", "2.5", "m", "done"]
        );
        assert_eq!(tokenize("30-centimeter"), vec!["30", "centimeter"]);
        assert_eq!(tokenize("Crêpe shop's"), vec!["crêpe", "shop", "s"]);
    }

    #[test]
    fn word_count_rule() {
        assert_eq!(word_count(""), 0);
        assert_eq!(word_count("less traffic \u{2014} more trees!"), 4);
        assert_eq!(word_count("  - -- ok  "), 1);
    }

    #[test]
    fn sentences() {
        assert_eq!(
            split_sentences("Hello! How can I help? Trees cool e.g. streets. Done"),
            vec!["Hello!", "How can I help?", "Trees cool e.g. streets.", "Done"]
        );
        assert_eq!(split_sentences("It holds 2.5 liters."), vec!["It holds 2.5 liters."]);
        assert!(split_sentences("   ").is_empty());
    }
}

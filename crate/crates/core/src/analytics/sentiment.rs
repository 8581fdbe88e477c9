//! Three-way sentiment labels and their distribution over a corpus.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::persona::{ChatProvider, Message, ProviderRequest};
use crate::text::tokenize;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SentimentError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sentiment classifier unavailable: {0}")]
    ClassifierUnavailable(String),
}

pub trait SentimentClassifier {
    fn classify(&self, text: &str) -> Result<Sentiment, SentimentError>;
}

const POSITIVE: [&str; 48] = [
    "amazing", "appreciate", "attractive", "beautiful", "benefit", "best", "better", "brilliant",
    "calm", "comfortable", "convenient", "delighted", "enjoy", "excellent", "excited", "fantastic",
    "glad", "good", "great", "happy", "helpful", "improve", "improved", "improvement", "improves",
    "interesting", "like", "love", "lovely", "nice", "perfect", "pleasant", "pleased", "positive",
    "safe", "safer", "support", "thank", "thanks", "useful", "welcome", "wonderful", "agree",
    "clear", "fair", "fun", "hope", "helped",
];

const NEGATIVE: [&str; 52] = [
    "absurd", "afraid", "against", "angry", "annoying", "awful", "bad", "chaos", "complain",
    "congestion", "dangerous", "destroy", "disappointed", "disaster", "dislike", "expensive",
    "fail", "failure", "hate", "horrible", "ignore", "ignored", "lose", "loss", "lost", "mess",
    "negative", "nightmare", "noise", "noisy", "nonsense", "pointless", "poor", "problem",
    "problems", "ridiculous", "ruin", "ruined", "sad", "scam", "stupid", "terrible", "ugly",
    "unfair", "unsafe", "useless", "waste", "wasting", "worried", "worse", "worst", "wrong",
];

/// Tokens that flip the polarity of the next three tokens. `t` covers the
/// tail of contractions such as "don't".
const NEGATORS: [&str; 9] = ["hardly", "neither", "never", "no", "nor", "not", "nothing", "t", "without"];
const NEGATION_WINDOW: usize = 3;

/// Word-list baseline with short-range negation.
#[derive(Debug, Clone, Default)]
pub struct LexiconClassifier;

impl LexiconClassifier {
    pub fn score(&self, text: &str) -> i64 {
        let mut score = 0i64;
        let mut negate_left = 0usize;
        for token in tokenize(text) {
            let t = token.as_str();
            if NEGATORS.contains(&t) {
                negate_left = NEGATION_WINDOW;
                continue;
            }
            let polarity = if POSITIVE.contains(&t) {
                1
            } else if NEGATIVE.contains(&t) {
                -1
            } else {
                0
            };
            score += if negate_left > 0 { -polarity } else { polarity };
            negate_left = negate_left.saturating_sub(1);
        }
        score
    }
}

impl SentimentClassifier for LexiconClassifier {
    fn classify(&self, text: &str) -> Result<Sentiment, SentimentError> {
        Ok(match self.score(text) {
            s if s > 0 => Sentiment::Positive,
            s if s < 0 => Sentiment::Negative,
            _ => Sentiment::Neutral,
        })
    }
}

/// Asks a chat provider for a one-word label.
pub struct ProviderSentimentClassifier<'a> {
    pub provider: &'a dyn ChatProvider,
}

impl SentimentClassifier for ProviderSentimentClassifier<'_> {
    fn classify(&self, text: &str) -> Result<Sentiment, SentimentError> {
        let request = ProviderRequest {
            messages: vec![
                Message::new(
                    "system",
                    "Classify the sentiment of the user's text. Reply with exactly one word: negative, neutral or positive.",
                ),
                Message::new("user", text),
            ],
            persona_id: String::new(),
            role: None,
            grounding: Vec::new(),
            corrective: false,
        };
        let reply = self.provider.complete(&request).map_err(|e| SentimentError::ClassifierUnavailable(e.to_string()))?;
        match reply.trim().trim_end_matches('.').to_lowercase().as_str() {
            "negative" => Ok(Sentiment::Negative),
            "neutral" => Ok(Sentiment::Neutral),
            "positive" => Ok(Sentiment::Positive),
            other => Err(SentimentError::ClassifierUnavailable(format!("unparseable label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentDistribution<F> {
    pub negative: F,
    pub neutral: F,
    pub positive: F,
    pub n: usize,
}

impl<F: Scalar> SentimentDistribution<F> {
    pub fn from_labels(labels: &[Sentiment]) -> Result<Self, SentimentError> {
        if labels.is_empty() {
            return Err(SentimentError::EmptyCorpus);
        }
        let n = labels.len();
        let share = |s: Sentiment| F::of_usize(labels.iter().filter(|&&l| l == s).count()) / F::of_usize(n);
        Ok(Self {
            negative: share(Sentiment::Negative),
            neutral: share(Sentiment::Neutral),
            positive: share(Sentiment::Positive),
            n,
        })
    }

    pub fn total(&self) -> F {
        self.negative + self.neutral + self.positive
    }
}

pub fn sentiment_distribution<F: Scalar, C: SentimentClassifier + ?Sized>(
    texts: &[String],
    classifier: &C,
) -> Result<SentimentDistribution<F>, SentimentError> {
    let labels = texts.iter().map(|t| classifier.classify(t)).collect::<Result<Vec<_>, _>>()?;
    SentimentDistribution::from_labels(&labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: Sentiment,
}

/// Public comments on a street project, used as the comparison corpus.
pub const COMMENT_CORPUS: &str = include_str!("../../fixtures/comment_corpus.json");

pub fn comment_corpus() -> Vec<LabeledText> {
    serde_json::from_str(COMMENT_CORPUS).expect("bundled corpus parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::FixedProvider;

    #[test]
    fn lexicon_examples() {
        let c = LexiconClassifier;
        assert_eq!(c.classify("this is a wonderful, great plan").unwrap(), Sentiment::Positive);
        assert_eq!(c.classify("this is not good").unwrap(), Sentiment::Negative);
        assert_eq!(c.classify("I don't hate it").unwrap(), Sentiment::Positive);
        assert_eq!(c.classify("When does construction start?").unwrap(), Sentiment::Neutral);
    }

    #[test]
    fn empty_corpus() {
        assert_eq!(
            sentiment_distribution::<f64, _>(&[], &LexiconClassifier).unwrap_err(),
            SentimentError::EmptyCorpus
        );
    }

    #[test]
    fn bundled_corpus_labels_hold() {
        let c = LexiconClassifier;
        for item in comment_corpus() {
            assert_eq!(c.classify(&item.text).unwrap(), item.label, "{}", item.text);
        }
    }

    #[test]
    fn provider_labels() {
        let p = FixedProvider("Positive.".into());
        let c = ProviderSentimentClassifier { provider: &p };
        assert_eq!(c.classify("x").unwrap(), Sentiment::Positive);
        let bad = FixedProvider("meh".into());
        assert!(ProviderSentimentClassifier { provider: &bad }.classify("x").is_err());
    }
}

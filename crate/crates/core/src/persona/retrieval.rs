//! Lexical fact retrieval.
//!
//! score(fact) = sum over distinct query content tokens t of
//! tf(t, fact) * ln(1 + N / df(t)), with N the package size and df the number
//! of facts containing t. Zero scores are dropped; ties keep package order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::study::FactPackage;
use crate::text::{content_tokens, unique_content_tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFact {
    pub fact_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub ranked: Vec<ScoredFact>,
}

impl RetrievalResult {
    pub fn fact_ids(&self) -> Vec<String> {
        self.ranked.iter().map(|s| s.fact_id.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

pub fn retrieve(package: &FactPackage, query: &str, k: usize) -> Result<RetrievalResult, GatewayError> {
    if package.is_empty() {
        return Err(GatewayError::EmptyPackage);
    }
    if k == 0 {
        return Err(GatewayError::InvalidK);
    }
    let n = package.len() as f64;
    let docs: Vec<Vec<String>> = package.facts().iter().map(|f| content_tokens(&f.text)).collect();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &docs {
        let mut seen: Vec<&str> = doc.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }

    let query_tokens = unique_content_tokens(query);
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            let score = query_tokens
                .iter()
                .filter_map(|t| {
                    let tf = doc.iter().filter(|d| *d == t).count();
                    (tf > 0).then(|| tf as f64 * (1.0 + n / df[t.as_str()] as f64).ln())
                })
                .sum::<f64>();
            (i, score)
        })
        .filter(|&(_, s)| s > 0.0)
        .collect();
    // stable sort keeps package order on ties
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);

    Ok(RetrievalResult {
        query: query.to_string(),
        ranked: scored
            .into_iter()
            .map(|(i, score)| ScoredFact { fact_id: package.facts()[i].fact_id.clone(), score })
            .collect(),
    })
}

//! Free recall: length and lexical overlap with the material a participant saw.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::Arm;
use crate::study::{InformationBlock, StudyDefinition};
use crate::text::{tokenize, unique_content_tokens, word_count};
use crate::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecallError {
    #[error("source text has no content tokens")]
    DegenerateSource,
}

/// Share of the source's distinct content tokens that occur in the recall.
pub fn lexical_overlap<F: Scalar>(source: &str, recall: &str) -> Result<F, RecallError> {
    let source_tokens = unique_content_tokens(source);
    if source_tokens.is_empty() {
        return Err(RecallError::DegenerateSource);
    }
    let recalled: std::collections::HashSet<String> = tokenize(recall).into_iter().collect();
    let hits = source_tokens.iter().filter(|t| recalled.contains(*t)).count();
    Ok(F::of_usize(hits) / F::of_usize(source_tokens.len()))
}

/// The text a participant of the given arm was shown for a block.
pub fn source_text(block: &InformationBlock, arm: Arm) -> &str {
    match arm {
        Arm::Treatment => &block.narration_script,
        Arm::Control => &block.body_control,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallMetrics<F> {
    pub session_id: String,
    pub word_count: usize,
    pub overlap_total: F,
    pub overlap_by_block: BTreeMap<String, F>,
}

pub fn recall_metrics<F: Scalar>(
    study: &StudyDefinition,
    arm: Arm,
    session_id: &str,
    recall: &str,
) -> Result<RecallMetrics<F>, RecallError> {
    let mut overlap_by_block = BTreeMap::new();
    for block in &study.blocks {
        overlap_by_block.insert(block.block_id.clone(), lexical_overlap(source_text(block, arm), recall)?);
    }
    let whole: Vec<&str> = study.blocks.iter().map(|b| source_text(b, arm)).collect();
    Ok(RecallMetrics {
        session_id: session_id.to_string(),
        word_count: word_count(recall),
        overlap_total: lexical_overlap(&whole.join(" "), recall)?,
        overlap_by_block,
    })
}

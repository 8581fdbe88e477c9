//! Measurements over finished sessions.

pub mod codebook;
pub mod recall;
pub mod report;
pub mod sentiment;
pub mod stats;
pub mod tags;

pub use crate::text::word_count;

use proptest::prelude::*;
use serde::Deserialize;
use townhall_core::analytics::recall::{lexical_overlap, recall_metrics};
use townhall_core::analytics::word_count;
use townhall_core::study::lausanne_fixture;
use townhall_core::Arm;

#[derive(Deserialize)]
struct Replay {
    treatment: Vec<String>,
    control: Vec<String>,
}

fn mean_words(texts: &[String]) -> f64 {
    texts.iter().map(|t| word_count(t)).sum::<usize>() as f64 / texts.len() as f64
}

#[test]
fn replay_word_count_means() {
    let replay: Replay = serde_json::from_str(include_str!("../fixtures/recall_replay.json")).unwrap();
    assert_eq!(mean_words(&replay.treatment), 22.2);
    assert_eq!(mean_words(&replay.control), 15.9);
}

#[test]
fn replay_overlap_is_in_range() {
    let study = lausanne_fixture();
    let replay: Replay = serde_json::from_str(include_str!("../fixtures/recall_replay.json")).unwrap();
    for (arm, texts) in [(Arm::Treatment, &replay.treatment), (Arm::Control, &replay.control)] {
        for (i, t) in texts.iter().enumerate() {
            let m = recall_metrics::<f64>(&study, arm, &format!("s{i}"), t).unwrap();
            assert!(m.overlap_total > 0.0 && m.overlap_total <= 1.0);
            assert_eq!(m.overlap_by_block.len(), 6);
        }
    }
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{2,9}", 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1_000, ..ProptestConfig::default() })]

    #[test]
    fn overlap_bounds_and_identity(src in words(), rec in words()) {
        let source = src.join(" ");
        let recall = rec.join(" ");
        if let Ok(v) = lexical_overlap::<f64>(&source, &recall) {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(lexical_overlap::<f64>(&source, &source).unwrap(), 1.0);
            prop_assert_eq!(lexical_overlap::<f64>(&source, "").unwrap(), 0.0);
            // adding source words never lowers the score
            let more = format!("{recall} {}", src[0]);
            prop_assert!(lexical_overlap::<f64>(&source, &more).unwrap() >= v);
        }
    }

    #[test]
    fn word_count_counts_whitespace_tokens(rec in words()) {
        prop_assert_eq!(word_count(&rec.join("  \n ")), rec.len());
    }
}

use std::collections::BTreeMap;

use proptest::prelude::*;
use townhall_core::analytics::sentiment::{comment_corpus, SentimentDistribution, sentiment_distribution, LexiconClassifier, Sentiment};
use townhall_core::analytics::stats::{fisher_exact, ContingencyTable2x2};
use townhall_core::analytics::tags::{is_selected, tag_diff_filter};


fn reference_selected(t: u64, c: u64) -> bool {
    let (larger, smaller) = if t > c { (t, c) } else { (c, t) };
    larger >= 11 && larger >= smaller + 6
}

#[test]
fn predicate_boundaries() {
    assert!(!is_selected(10, 4));
    assert!(is_selected(11, 5));
    assert!(!is_selected(11, 6));
    assert!(is_selected(3, 20));
}

#[test]
fn comment_corpus_shares() {
    let corpus = comment_corpus();
    let texts: Vec<String> = corpus.iter().map(|i| i.text.clone()).collect();
    let d: SentimentDistribution<f64> = sentiment_distribution(&texts, &LexiconClassifier).unwrap();
    let r3 = |x: f64| (x * 1000.0).round() / 1000.0;
    assert_eq!((r3(d.negative), r3(d.neutral), r3(d.positive)), (0.507, 0.209, 0.284));
}

fn label() -> impl Strategy<Value = Sentiment> {
    prop_oneof![Just(Sentiment::Negative), Just(Sentiment::Neutral), Just(Sentiment::Positive)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2_000, ..ProptestConfig::default() })]

    #[test]
    fn predicate_agrees_with_reference(t in 0u64..60, c in 0u64..60) {
        prop_assert_eq!(is_selected(t, c), reference_selected(t, c));
    }

    #[test]
    fn filter_rows(rows in prop::collection::btree_map("[a-e]", (0u64..40, 0u64..40), 0..5)) {
        let tm: BTreeMap<String, u64> = rows.iter().map(|(k, v)| (k.clone(), v.0)).collect();
        let cm: BTreeMap<String, u64> = rows.iter().map(|(k, v)| (k.clone(), v.1)).collect();
        let out = tag_diff_filter::<f64>(&tm, &cm, 50, 50);
        prop_assert_eq!(out.len(), rows.len());
        for d in out {
            prop_assert_eq!(d.selected, reference_selected(d.count_treatment, d.count_control));
            prop_assert_eq!(d.p_value.is_some(), d.selected);
            if let Some(p) = d.p_value {
                let want = fisher_exact::<f64>(ContingencyTable2x2::from_counts(d.count_treatment, 50, d.count_control, 50)).p_value;
                prop_assert_eq!(p, want);
                prop_assert_eq!(d.significant, p < 0.05);
            } else {
                prop_assert!(!d.significant);
            }
        }
    }

    #[test]
    fn shares_sum_to_one(labels in prop::collection::vec(label(), 1..300)) {
        let d = SentimentDistribution::<f64>::from_labels(&labels).unwrap();
        prop_assert!((d.total() - 1.0).abs() < 1e-12);
        prop_assert_eq!(d.n, labels.len());
        let d32 = SentimentDistribution::<f32>::from_labels(&labels).unwrap();
        prop_assert!((d32.total() - 1.0).abs() < 1e-5);
    }
}

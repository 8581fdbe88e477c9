//! Code-frequency comparison between the two arms.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::stats::{fisher_exact, ContingencyTable2x2};
use crate::Scalar;

pub const MIN_MENTIONS: u64 = 10;
pub const MIN_DIFF: u64 = 5;
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagDiff<F> {
    pub code: String,
    pub count_treatment: u64,
    pub count_control: u64,
    pub selected: bool,
    /// Fisher p of selected codes only.
    pub p_value: Option<F>,
    pub significant: bool,
}

/// More than ten mentions in either group and a count difference above five.
pub fn is_selected(count_treatment: u64, count_control: u64) -> bool {
    count_treatment.max(count_control) > MIN_MENTIONS && count_treatment.abs_diff(count_control) > MIN_DIFF
}

/// One row per code present in either map, ordered by code.
pub fn tag_diff_filter<F: Scalar>(
    treatment: &BTreeMap<String, u64>,
    control: &BTreeMap<String, u64>,
    n_treatment: u64,
    n_control: u64,
) -> Vec<TagDiff<F>> {
    let codes: BTreeSet<&String> = treatment.keys().chain(control.keys()).collect();
    codes
        .into_iter()
        .map(|code| {
            let t = treatment.get(code).copied().unwrap_or(0);
            let c = control.get(code).copied().unwrap_or(0);
            let selected = is_selected(t, c);
            let p_value = selected.then(|| {
                fisher_exact::<F>(ContingencyTable2x2::from_counts(
                    t.min(n_treatment),
                    n_treatment,
                    c.min(n_control),
                    n_control,
                ))
                .p_value
            });
            TagDiff {
                code: code.clone(),
                count_treatment: t,
                count_control: c,
                selected,
                significant: p_value.is_some_and(|p| p < F::of(ALPHA)),
                p_value,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(t: u64, c: u64) -> TagDiff<f64> {
        let tm = BTreeMap::from([("x".to_string(), t)]);
        let cm = BTreeMap::from([("x".to_string(), c)]);
        tag_diff_filter(&tm, &cm, 95, 100).remove(0)
    }

    #[test]
    fn rule_examples() {
        assert!(one(11, 4).selected);
        assert!(!one(10, 3).selected);
        assert!(one(10, 3).p_value.is_none());
        let strong = one(30, 10);
        assert!(strong.selected && strong.significant);
        let p = strong.p_value.unwrap();
        assert!(p > 1e-4 && p < 1e-3, "{p}");
    }

    #[test]
    fn missing_codes_count_zero() {
        let tm = BTreeMap::from([("a".to_string(), 12)]);
        let rows = tag_diff_filter::<f64>(&tm, &BTreeMap::new(), 95, 100);
        assert_eq!(rows[0].count_control, 0);
        assert!(rows[0].selected);
    }
}
